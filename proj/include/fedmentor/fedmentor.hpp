// Copyright 2026 The FedMentor Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include "fedmentor/dp.hpp"
#include "fedmentor/error.hpp"
#include "fedmentor/experiment.hpp"
#include "fedmentor/federation.hpp"
#include "fedmentor/linalg.hpp"
#include "fedmentor/lora.hpp"
#include "fedmentor/metrics.hpp"
#include "fedmentor/synth.hpp"
#include "fedmentor/trainer.hpp"
