// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "locomt/numerics.hpp"
#include "locomt/viewconfig.hpp"
#include "locomt/tape.hpp"
#include "locomt/attention.hpp"
#include "locomt/model.hpp"
#include "locomt/costmodel.hpp"
#include "locomt/training.hpp"
#include "locomt/dataset.hpp"
#include "locomt/config.hpp"
#include "locomt/harness.hpp"
