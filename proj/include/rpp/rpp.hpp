// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rpp/analysis.hpp"
#include "rpp/checkpoint.hpp"
#include "rpp/config.hpp"
#include "rpp/csv.hpp"
#include "rpp/data.hpp"
#include "rpp/errors.hpp"
#include "rpp/experiment.hpp"
#include "rpp/graph.hpp"
#include "rpp/model.hpp"
#include "rpp/model_config.hpp"
#include "rpp/optim.hpp"
#include "rpp/params.hpp"
#include "rpp/pruning.hpp"
#include "rpp/report.hpp"
#include "rpp/rng.hpp"
#include "rpp/tensor.hpp"
