// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dialogbert/checkpoint.hpp"
#include "dialogbert/data.hpp"
#include "dialogbert/error.hpp"
#include "dialogbert/metrics.hpp"
#include "dialogbert/model.hpp"
#include "dialogbert/objectives.hpp"
#include "dialogbert/ops.hpp"
#include "dialogbert/rng.hpp"
#include "dialogbert/tensor.hpp"
#include "dialogbert/train.hpp"
#include "dialogbert/transformer.hpp"
