#pragma once

#include <cstdint>

#include "ddvr/adjoint.hpp"
#include "ddvr/model.hpp"

namespace ddvr::train {

/// Finite-difference check of the full training step (encoder, classifier,
/// compositing, decoder, combined loss) on a seeded 8^3 scene and a 4x4 image
/// at s = 1 with a fixed jitter seed.
ad::FdReport gradcheck_tiny(ModelKind kind, std::uint64_t seed, double eps = 1e-5);

/// Relative-error floor used by gradcheck_tiny; see ad::finite_diff_check.
inline constexpr double kGradcheckFloor = 1e-5;

} // namespace ddvr::train
