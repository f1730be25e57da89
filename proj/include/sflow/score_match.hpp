#pragma once

// Gumbel-Softmax score matching: ExpConcrete / Concrete log-densities, their
// analytic gradients, the softmax score head, training and ascent sampling.

#include <cstdint>
#include <span>
#include <vector>

#include "sflow/denoiser.hpp"
#include "sflow/flow_match.hpp"
#include "sflow/rng.hpp"
#include "sflow/simplex.hpp"

namespace sflow {

/// Per-position score rows; same layout as a velocity field.
using ScoreField = VelocityField;

/// log density of the ExpConcrete variable (log of a Gumbel-Softmax draw) with
/// logits delta_k, at log-point x. The density is with respect to Lebesgue
/// measure on the V-1 free log-coordinates.
double expconcrete_log_density(const LogSimplexPoint& x, const OneHotToken& target, double tau);

/// Gradient of expconcrete_log_density in the ambient log coordinates:
/// -tau + tau * V * softmax(delta_k - tau * x).
std::vector<double> conditional_score(const LogSimplexPoint& x, const OneHotToken& target,
                                      double tau);

/// log density of the Concrete (Gumbel-Softmax) distribution. Entries below
/// 1e-12 are a DomainError.
double gs_log_density(const SimplexPoint& x, const OneHotToken& target, double tau);

/// Ambient gradient of gs_log_density: (1 / x_j) * conditional_score(log x)_j - 1 / x_j.
std::vector<double> gs_score(const SimplexPoint& x, const OneHotToken& target, double tau);

/// -tau + tau * V * softmax(row) for each of the rows of `raw` (length L*V).
ScoreField score_parameterize(std::span<const double> raw, double tau, std::size_t vocab);

enum class ScoreLoss {
    kSoftmax,  // |softmax(delta_k - tau * x_log) - softmax(raw)|^2
    kRaw,      // |raw - (delta_k + tau * x)|^2 with x in probability space
};

/// Mean over positions of the softmax-matching loss. `x_log` holds log-points
/// row by row (its rows do not sum to one).
double score_loss(std::span<const double> raw, const SequenceState& x_log,
                  std::span<const std::uint32_t> tokens, double tau);

struct SmTrainConfig {
    TemperatureSchedule schedule;
    NoiseConfig noise;
    ScoreLoss loss = ScoreLoss::kSoftmax;
};

/// One optimizer step. The network sees the probability-space interpolant and
/// its raw outputs are the pre-softmax score logits. Returns the batch loss.
double sm_train_step(DenoiserParams& params, OptimizerState& opt,
                     std::span<const TokenSequence> batch, Rng& rng, const SmTrainConfig& config);

struct SmSamplerConfig {
    double eta = 0.5;
    std::size_t n_steps = 100;
    StartState start = StartState::kCentroid;
};

/// Projected score ascent x <- proj(x + eta * s(x, t)) with t advancing by
/// 1 / n_steps, then per-position argmax.
SampleResult sm_sample(const DenoiserParams& params, std::size_t n, const SmSamplerConfig& sampler,
                       const TemperatureSchedule& schedule, Rng& rng, const StepHook& hook = {});

}  // namespace sflow
