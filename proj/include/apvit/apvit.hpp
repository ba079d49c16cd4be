// Copyright 2026 The APViT-Desk Authors. All Rights Reserved.
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

#ifndef APVIT_APVIT_HPP_
#define APVIT_APVIT_HPP_

#include "apvit/analysis.hpp"
#include "apvit/app.hpp"
#include "apvit/checkpoint.hpp"
#include "apvit/config.hpp"
#include "apvit/data.hpp"
#include "apvit/errors.hpp"
#include "apvit/model.hpp"
#include "apvit/ops.hpp"
#include "apvit/random.hpp"
#include "apvit/stem.hpp"
#include "apvit/tensor.hpp"
#include "apvit/train.hpp"
#include "apvit/transformer.hpp"

#endif  // APVIT_APVIT_HPP_
