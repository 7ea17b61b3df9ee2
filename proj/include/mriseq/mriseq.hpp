/*
 * Copyright 2026 The mriseq Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once
#pragma once

#include "mriseq/autodiff/adam.hpp"
#include "mriseq/autodiff/grad_check.hpp"
#include "mriseq/autodiff/ops.hpp"
#include "mriseq/autodiff/tensor.hpp"
#include "mriseq/checkpoint.hpp"
#include "mriseq/error.hpp"
#include "mriseq/gradcam.hpp"
#include "mriseq/inference.hpp"
#include "mriseq/labels.hpp"
#include "mriseq/manifest.hpp"
#include "mriseq/metrics.hpp"
#include "mriseq/models.hpp"
#include "mriseq/preprocess.hpp"
#include "mriseq/seeding.hpp"
#include "mriseq/synth.hpp"
#include "mriseq/training.hpp"
#include "mriseq/volume.hpp"
