// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "packtrain/checkpoint.hpp"
#include "packtrain/data.hpp"
#include "packtrain/device_sim.hpp"
#include "packtrain/error.hpp"
#include "packtrain/graph.hpp"
#include "packtrain/optimizer.hpp"
#include "packtrain/pack.hpp"
#include "packtrain/random.hpp"
#include "packtrain/tensor.hpp"
#include "packtrain/train.hpp"
#include "packtrain/tuner.hpp"
