// ----------------------------------------------------------------------------
//  sllm-desk
//  Copyright (c) sllm-desk contributors 2026
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//
//   You may obtain a copy of the License at
//
//                   http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.
//  ----------------------------------------------------------------------------

#pragma once

#include "sllm/ckpt_format.hpp"
#include "sllm/cluster_model.hpp"
#include "sllm/common.hpp"
#include "sllm/inference_engine.hpp"
#include "sllm/migration.hpp"
#include "sllm/router.hpp"
#include "sllm/scheduler.hpp"
#include "sllm/simulation.hpp"
#include "sllm/workload.hpp"
