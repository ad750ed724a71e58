// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "msdino/client.hpp"
#include "msdino/cost_model.hpp"
#include "msdino/downstream.hpp"
#include "msdino/error.hpp"
#include "msdino/feature_store.hpp"
#include "msdino/fl_baseline.hpp"
#include "msdino/metrics.hpp"
#include "msdino/ops.hpp"
#include "msdino/param_set.hpp"
#include "msdino/permuter.hpp"
#include "msdino/privacy_attack.hpp"
#include "msdino/rng.hpp"
#include "msdino/serialize.hpp"
#include "msdino/tensor.hpp"
#include "msdino/trainer.hpp"
#include "msdino/verify.hpp"
#include "msdino/vit.hpp"
