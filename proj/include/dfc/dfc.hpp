// Copyright 2026 The DFC Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "dfc/channelsim.hpp"
#include "dfc/codec.hpp"
#include "dfc/config.hpp"
#include "dfc/entropy.hpp"
#include "dfc/error.hpp"
#include "dfc/numeric.hpp"
#include "dfc/random.hpp"
#include "dfc/rdp.hpp"
#include "dfc/schedule.hpp"
#include "dfc/sources.hpp"
