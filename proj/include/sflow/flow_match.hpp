#pragma once

// Gumbel-Softmax flow matching: conditional and marginal velocity fields,
// the denoising training step, and the projected Euler sampler.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "sflow/denoiser.hpp"
#include "sflow/rng.hpp"
#include "sflow/simplex.hpp"

namespace sflow {

using TokenSequence = std::vector<std::uint32_t>;

/// Per-position tangent vectors (entries of each row sum to zero), L x V row-major.
class VelocityField {
public:
    VelocityField() = default;
    VelocityField(std::size_t length, std::size_t vocab)
        : length_(length), vocab_(vocab), data_(length * vocab, 0.0) {}

    std::size_t length() const { return length_; }
    std::size_t vocab() const { return vocab_; }
    std::span<double> row(std::size_t p) { return {data_.data() + p * vocab_, vocab_}; }
    std::span<const double> row(std::size_t p) const {
        return {data_.data() + p * vocab_, vocab_};
    }
    std::span<const double> flat() const { return data_; }

    /// Largest |sum of a row| over all positions.
    double max_row_sum() const;

private:
    std::size_t length_ = 0;
    std::size_t vocab_ = 0;
    std::vector<double> data_;
};

/// Time derivative of the Gumbel-Softmax interpolant under fixed noise:
/// u_i = (lambda / tau) x_i sum_j x_j ((delta_ik + g_i) - (delta_jk + g_j)).
std::vector<double> conditional_velocity_train(std::span<const double> x_t,
                                               const OneHotToken& target,
                                               std::span<const double> g,
                                               const TemperatureSchedule& schedule, double t);

/// Noise-free field (lambda / tau) x_k (e_k - x).
std::vector<double> conditional_velocity_inference(std::span<const double> x_t,
                                                   const OneHotToken& target,
                                                   const TemperatureSchedule& schedule, double t);

/// Mixture of noise-free conditional fields weighted by `predicted`, via the
/// closed form (lambda / tau) (x * p - x <x, p>).
std::vector<double> marginal_velocity(std::span<const double> x_t,
                                      std::span<const double> predicted,
                                      const TemperatureSchedule& schedule, double t);

/// Mean over positions of -log p(true token), each term floored at log(1e-12).
double fm_loss_nll(const SequenceState& predicted, std::span<const std::uint32_t> tokens);

/// Mean squared difference over all L x V entries.
double fm_loss_mse(const VelocityField& predicted, const VelocityField& truth);

enum class FmLoss { kNll, kMse };

/// Probability path used by the trainer/sampler. kLinear is the straight-line
/// baseline x_t = (1 - t) x_0 + t e_k with a flat-Dirichlet x_0.
enum class ProbabilityPath { kGumbelSoftmax, kLinear };

struct FmTrainConfig {
    TemperatureSchedule schedule;
    NoiseConfig noise;
    FmLoss loss = FmLoss::kNll;
    ProbabilityPath path = ProbabilityPath::kGumbelSoftmax;
};

/// One optimizer step on a batch of clean sequences; returns the batch loss
/// (before the update). t is drawn per sequence.
double fm_train_step(DenoiserParams& params, OptimizerState& opt,
                     std::span<const TokenSequence> batch, Rng& rng,
                     const FmTrainConfig& config);

enum class SamplerMode { kDenoise, kVelocity };

/// Where the integration starts. kUniformSimplex draws x_0 uniformly from the
/// simplex (flat Dirichlet); kCentroid starts every position at exactly 1/V.
enum class StartState { kUniformSimplex, kCentroid };

struct SamplerConfig {
    std::size_t n_steps = 100;
    SamplerMode mode = SamplerMode::kDenoise;
    StartState start = StartState::kUniformSimplex;
    ProbabilityPath path = ProbabilityPath::kGumbelSoftmax;

    double dt() const { return 1.0 / static_cast<double>(n_steps); }
};

/// Batch-averaged summary of the state after one integration step.
struct TraceRow {
    std::size_t step = 0;
    double t = 0.0;
    double tau = 0.0;
    std::vector<double> entropy;   // per position, nats
    std::vector<double> max_prob;  // per position
};

void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace);

struct SampleResult {
    std::vector<TokenSequence> sequences;
    std::vector<TraceRow> trace;
    std::vector<SequenceState> final_states;
};

/// Called after each Euler step with (step index, t after the step, states).
using StepHook = std::function<void(std::size_t, double, std::vector<SequenceState>&)>;

/// Draw the initial states for `n` sequences.
std::vector<SequenceState> initial_states(std::size_t n, std::size_t length, std::size_t vocab,
                                          StartState start, Rng& rng);

/// Projected Euler integration of the predicted marginal velocity for `n`
/// sequences, then per-position argmax. `hook` runs after every step.
SampleResult fm_sample(const DenoiserParams& params, std::size_t n, const SamplerConfig& sampler,
                       const TemperatureSchedule& schedule, Rng& rng,
                       const StepHook& hook = {});

/// Per-position argmax decode, lowest index on ties.
TokenSequence decode_argmax(const SequenceState& state);

/// Mean over batch of per-position entropy/max-probability.
TraceRow summarize(std::size_t step, double t, double tau, std::span<const SequenceState> states);

}  // namespace sflow
