/*
 * Copyright 2026 The dcil-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */


#pragma once

#include "dcil/error.hpp"
#include "dcil/rng.hpp"
#include "dcil/nn.hpp"
#include "dcil/data.hpp"
#include "dcil/local_learner.hpp"
#include "dcil/distillation.hpp"
#include "dcil/parallel.hpp"
#include "dcil/orchestrator.hpp"
#include "dcil/config.hpp"
#include "dcil/cli.hpp"
