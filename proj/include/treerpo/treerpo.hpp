// Copyright 2026 The TreeRPO Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "treerpo/compare.hpp"
#include "treerpo/config.hpp"
#include "treerpo/credit.hpp"
#include "treerpo/env.hpp"
#include "treerpo/errors.hpp"
#include "treerpo/eval.hpp"
#include "treerpo/policy.hpp"
#include "treerpo/rng.hpp"
#include "treerpo/trainer.hpp"
#include "treerpo/tree.hpp"

#define TREERPO_VERSION "0.1.0"
