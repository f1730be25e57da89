#pragma once

// Straight-line simplex flow used as a comparison point for the toy runs.

#include <span>
#include <vector>

namespace sflow {

/// Latest time the linear field is evaluated at; later t are clamped here.
inline constexpr double kLinearTimeClamp = 1.0 - 1e-6;

/// Mixture over `predicted` of (e_k - x) / (1 - t), i.e. (p - x) / (1 - t).
/// t >= 1 is a DomainError; t in (1 - 1e-6, 1) is clamped.
std::vector<double> linear_baseline_velocity(std::span<const double> x_t,
                                             std::span<const double> predicted, double t);

}  // namespace sflow
