// SPDX-License-Identifier: Apache-2.0
// Umbrella header.
#pragma once

#include "mmt/autodiff.hpp"
#include "mmt/checks.hpp"
#include "mmt/config.hpp"
#include "mmt/data.hpp"
#include "mmt/errors.hpp"
#include "mmt/finetune.hpp"
#include "mmt/grad_check.hpp"
#include "mmt/log.hpp"
#include "mmt/model.hpp"
#include "mmt/optim.hpp"
#include "mmt/pretrain.hpp"
#include "mmt/synth.hpp"
#include "mmt/tensor.hpp"
#include "mmt/weights.hpp"
