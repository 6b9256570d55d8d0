#pragma once

#include "rcal/calibrate.hpp"
#include "rcal/dataset.hpp"
#include "rcal/error.hpp"
#include "rcal/lowess.hpp"
#include "rcal/matrix.hpp"
#include "rcal/metrics.hpp"
#include "rcal/synth.hpp"

namespace rcal {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace rcal
