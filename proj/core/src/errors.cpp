// Copyright 2026 The peftlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/errors.hpp"

#include <fmt/format.h>

namespace peftlab {

DivergenceError::DivergenceError(std::int64_t step)
    : Error(fmt::format("training diverged (non-finite loss) at step {}", step)), step_(step) {}

}  // namespace peftlab
