#pragma once

#include "ctncf/baselines.hpp"
#include "ctncf/data.hpp"
#include "ctncf/error.hpp"
#include "ctncf/experiment.hpp"
#include "ctncf/metrics.hpp"
#include "ctncf/model.hpp"
#include "ctncf/ops.hpp"
#include "ctncf/tape.hpp"
#include "ctncf/tensor.hpp"
#include "ctncf/training.hpp"
