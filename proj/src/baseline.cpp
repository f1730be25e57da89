#include "sflow/baseline.hpp"

#include <algorithm>
#include <string>

#include "sflow/errors.hpp"

namespace sflow {

std::vector<double> linear_baseline_velocity(std::span<const double> x_t,
                                             std::span<const double> predicted, double t) {
    if (x_t.size() != predicted.size()) throw ConfigError("linear_baseline_velocity: size mismatch");
    if (!(t < 1.0) || t < 0.0) {
        throw DomainError("linear baseline undefined at t=" + std::to_string(t));
    }
    const double inv = 1.0 / (1.0 - std::min(t, kLinearTimeClamp));
    std::vector<double> u(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) u[i] = (predicted[i] - x_t[i]) * inv;
    return u;
}

}  // namespace sflow
