#pragma once

#include "splos/checkpoint.hpp"
#include "splos/cmmc.hpp"
#include "splos/data.hpp"
#include "splos/dmc.hpp"
#include "splos/errors.hpp"
#include "splos/metrics.hpp"
#include "splos/networks.hpp"
#include "splos/ops.hpp"
#include "splos/optim.hpp"
#include "splos/random.hpp"
#include "splos/report.hpp"
#include "splos/svd.hpp"
#include "splos/tensor.hpp"
#include "splos/threshold.hpp"
#include "splos/trainer.hpp"

namespace splos {
inline constexpr const char* kVersion = "0.1.0";
}
