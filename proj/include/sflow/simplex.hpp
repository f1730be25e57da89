#pragma once

// Primitives on the probability simplex: temperature schedule, Gumbel noise,
// the Gumbel-Softmax and ExpConcrete interpolants, and Euclidean projection.

#include <cstddef>
#include <span>
#include <vector>

#include "sflow/rng.hpp"

namespace sflow {

/// A categorical distribution over V tokens.
struct SimplexPoint {
    std::vector<double> probs;

    std::size_t size() const { return probs.size(); }
    bool valid(double tol = 1e-9) const;
};

/// Natural-log coordinates of a simplex point; logsumexp is zero.
struct LogSimplexPoint {
    std::vector<double> log_probs;

    std::size_t size() const { return log_probs.size(); }
    bool valid(double tol = 1e-7) const;
};

/// Vertex e_k of the simplex.
struct OneHotToken {
    std::size_t index = 0;
    std::size_t vocab = 0;

    OneHotToken(std::size_t k, std::size_t v);
    double delta(std::size_t i) const { return i == index ? 1.0 : 0.0; }
    std::vector<double> dense() const;
};

/// L rows of V probabilities, stored row-major.
class SequenceState {
public:
    SequenceState() = default;
    SequenceState(std::size_t length, std::size_t vocab, double fill = 0.0);

    /// Every row at 1/V.
    static SequenceState uniform(std::size_t length, std::size_t vocab);

    std::size_t length() const { return length_; }
    std::size_t vocab() const { return vocab_; }

    std::span<double> row(std::size_t pos) { return {data_.data() + pos * vocab_, vocab_}; }
    std::span<const double> row(std::size_t pos) const {
        return {data_.data() + pos * vocab_, vocab_};
    }
    std::span<double> flat() { return data_; }
    std::span<const double> flat() const { return data_; }

    bool valid(double tol = 1e-9) const;
    bool operator==(const SequenceState&) const = default;

private:
    std::size_t length_ = 0;
    std::size_t vocab_ = 0;
    std::vector<double> data_;
};

/// tau(t) = tau_max * exp(-lambda * t).
struct TemperatureSchedule {
    double tau_max = 10.0;
    double lambda = 3.0;

    TemperatureSchedule() = default;
    TemperatureSchedule(double tau_max_, double lambda_);

    double at(double t) const;
    /// lambda / tau(t) = d/dt (1 / tau(t)), the prefactor shared by the velocity fields.
    double rate(double t) const { return lambda / at(t); }
};

/// Gumbel noise scaling. `noise_free` is an explicit state: it yields exact zeros.
struct NoiseConfig {
    double beta = 2.0;
    double epsilon = 1e-20;
    bool noise_free = false;

    static NoiseConfig none() {
        NoiseConfig n;
        n.noise_free = true;
        return n;
    }
};

double temperature_at(const TemperatureSchedule& schedule, double t);

/// Transform of a single uniform draw: -log(-log(u + eps) + eps) / beta.
double gumbel_from_uniform(double u, const NoiseConfig& noise);

/// `count` i.i.d. beta-scaled Gumbel variates (zeros in noise-free mode; the
/// generator is not advanced in that case).
std::vector<double> sample_gumbel(Rng& rng, std::size_t count, const NoiseConfig& noise);

double logsumexp(std::span<const double> v);
std::vector<double> softmax(std::span<const double> v);
std::vector<double> log_softmax(std::span<const double> v);
/// Lowest index among maximal entries.
std::size_t argmax(std::span<const double> v);

/// softmax((log_pi + g) / tau) for general positive weights pi.
SimplexPoint gs_from_logits(std::span<const double> log_pi, std::span<const double> g, double tau);
/// (log_pi + g) / tau - logsumexp(...).
LogSimplexPoint expconcrete_from_logits(std::span<const double> log_pi,
                                        std::span<const double> g, double tau);

/// Gumbel-Softmax interpolant toward vertex e_k: softmax((delta_k + g) / tau).
/// `g` is taken as already beta-scaled.
SimplexPoint gs_interpolant(const OneHotToken& target, std::span<const double> g, double tau);

/// Log of gs_interpolant, computed directly in log space.
LogSimplexPoint expconcrete_interpolant(const OneHotToken& target, std::span<const double> g,
                                        double tau);

/// Euclidean projection onto the simplex (sort-and-threshold). Points that are
/// already feasible to 1e-12 are returned unchanged.
SimplexPoint simplex_project(std::span<const double> v);
void simplex_project_inplace(std::span<double> v);

/// Flat Dirichlet draw, i.e. a uniform point on the simplex.
void sample_uniform_simplex(Rng& rng, std::span<double> out);

}  // namespace sflow
