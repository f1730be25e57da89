#pragma once

// Time-conditioned dense network with hand-written reverse mode and Adam.
//
// Layout: input = [flattened L x V state | sin/cos time features], then
// `depth` hidden SiLU layers of width `hidden`, then a linear L x V head.
// Activations are stored feature-major (one column per batch element).

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sflow/rng.hpp"
#include "sflow/simplex.hpp"

namespace sflow {

/// How a simplex state is presented to the first layer.
enum class InputEncoding : std::uint32_t {
    kProbabilities = 0,  // V * x - 1, zero at the centroid
    kCenteredLog = 1,    // log(max(x, floor)) minus its per-position mean
};

struct DenoiserConfig {
    std::size_t length = 4;
    std::size_t vocab = 8;
    std::size_t hidden = 256;
    std::size_t depth = 3;
    std::size_t n_freq = 8;
    InputEncoding encoding = InputEncoding::kProbabilities;

    std::size_t state_dim() const { return length * vocab; }
    std::size_t input_dim() const { return state_dim() + 2 * n_freq; }
    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

struct DenseLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
};

/// Weights of the network. `version` advances on every in-place update so a
/// cache from an earlier forward pass can be recognized as stale.
struct DenoiserParams {
    DenoiserConfig config;
    std::vector<DenseLayer> layers;
    std::uint64_t version = 0;

    /// Fan-in scaled uniform init; the output layer is zeroed when `zero_head`.
    static DenoiserParams init(const DenoiserConfig& config, Rng& rng, bool zero_head = true);

    std::size_t parameter_count() const;
    bool all_finite() const;
    bool same_values(const DenoiserParams& other) const;
};

/// Gradient (or moment accumulator) congruent to DenoiserParams::layers.
struct ParamGrads {
    std::vector<DenseLayer> layers;

    static ParamGrads zeros_like(const DenoiserParams& params);
    void set_zero();
    double squared_norm() const;
};

struct ForwardCache {
    std::uint64_t params_version = 0;
    bool consumed = false;
    Eigen::MatrixXd input;                  // input_dim x B
    std::vector<Eigen::MatrixXd> pre;       // pre-activations of hidden layers
    std::vector<Eigen::MatrixXd> post;      // SiLU outputs of hidden layers
    Eigen::MatrixXd logits;                 // (L*V) x B
    Eigen::MatrixXd probs;                  // row-wise softmax over each position block
};

/// Sinusoidal features [sin(w_j t), cos(w_j t)] with w_j = pi * 2^j.
std::vector<double> time_features(double t, std::size_t n_freq);

/// Encode a batch of states and times as the network input matrix.
Eigen::MatrixXd encode_inputs(const DenoiserConfig& config, std::span<const SequenceState> states,
                              std::span<const double> times);

/// Forward pass over a batch. Throws ConfigError on any shape mismatch.
ForwardCache forward_batch(const DenoiserParams& params, std::span<const SequenceState> states,
                           std::span<const double> times);

/// Forward pass from an already encoded input matrix.
ForwardCache forward_encoded(const DenoiserParams& params, Eigen::MatrixXd input);

struct Prediction {
    Eigen::MatrixXd logits;  // L x V
    SequenceState probs;
};

/// Single-state convenience wrapper.
Prediction forward(const DenoiserParams& params, const SequenceState& state, double t);

/// Reverse pass for d(loss)/d(logits) given as an (L*V) x B matrix. Marks the
/// cache consumed; a second call, or a call after the parameters changed,
/// throws UsageError. If `input_grad` is non-null it receives d(loss)/d(input).
ParamGrads backward(const DenoiserParams& params, ForwardCache& cache,
                    const Eigen::MatrixXd& logit_grad, Eigen::MatrixXd* input_grad = nullptr);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    AdamConfig config;
    ParamGrads first;
    ParamGrads second;
    std::uint64_t step = 0;

    static OptimizerState for_params(const DenoiserParams& params, AdamConfig config = {});
};

/// Bias-corrected adaptive-moment update, in place.
void adam_step(DenoiserParams& params, const ParamGrads& grads, OptimizerState& opt);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<double> per_layer;  // max relative error per dense layer
    double input_rel_error = 0.0;   // through the state and time-embedding inputs
    std::size_t checked = 0;
};

/// Optional hook that rewrites the analytic gradient before comparison; used to
/// confirm that the check catches corrupted backward passes.
using GradMutator = std::function<void(ParamGrads&)>;

/// Compare analytic gradients of a fixed probe loss with central finite
/// differences (h = 1e-5) on a random subset of parameters from every layer.
GradCheckReport grad_check(const DenoiserParams& params, const SequenceState& probe, double t,
                           std::uint64_t seed = 7, std::size_t per_layer = 24,
                           GradMutator mutate = {});

/// Versioned little-endian binary container.
struct CheckpointMeta {
    std::uint32_t kind = 0;  // model family tag, see harness
    double tau_max = 10.0;
    double lambda = 3.0;
    bool operator==(const CheckpointMeta&) const = default;
};

void save_checkpoint(std::ostream& out, const DenoiserParams& params, const CheckpointMeta& meta);
void save_checkpoint(const std::string& path, const DenoiserParams& params,
                     const CheckpointMeta& meta);
DenoiserParams load_checkpoint(std::istream& in, CheckpointMeta* meta = nullptr);
DenoiserParams load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace sflow
