#pragma once

// Toy categorical experiment: target generation, KL evaluation, experiment
// configs and the end-to-end runner used by the CLI.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sflow/denoiser.hpp"
#include "sflow/flow_match.hpp"
#include "sflow/rng.hpp"
#include "sflow/score_match.hpp"
#include "sflow/simplex.hpp"
#include "sflow/stgflow.hpp"

namespace sflow {

struct ToySpec {
    std::size_t K = 20;
    std::size_t L = 4;
    std::size_t n_train = 100000;
    std::uint64_t seed = 0;

    void validate() const;
};

/// L independent rows, each a flat-Dirichlet draw over K tokens.
SequenceState gen_toy_target(const ToySpec& spec, Rng& rng);

/// i.i.d. per-position categorical draws. n == 0 is a UsageError.
std::vector<TokenSequence> sample_dataset(const SequenceState& target, std::size_t n, Rng& rng);

/// Per-position KL(q || target) of add-alpha smoothed empirical frequencies,
/// alpha = alpha_scale * n. Returns one entry per position.
std::vector<double> per_position_kl(std::span<const TokenSequence> samples,
                                    const SequenceState& target, double alpha_scale = 1e-9);

/// Sum of per_position_kl.
double empirical_kl(std::span<const TokenSequence> samples, const SequenceState& target,
                    double alpha_scale = 1e-9);

enum class Matcher { kGumbelFm, kScore, kLinearFm };

/// Model family tag stored in checkpoints.
enum class ModelKind : std::uint32_t {
    kFmDenoise = 1,
    kFmVelocity = 2,
    kScore = 3,
    kLinearDenoise = 4,
    kLinearVelocity = 5,
};

struct TrainingSettings {
    std::size_t steps = 20000;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    std::string loss;  // nll | mse for flows, softmax | raw for score; empty = default
    std::size_t log_every = 100;
};

struct SamplingSettings {
    std::size_t n_steps = 100;
    double eta = 0.5;
    std::string start;  // uniform_simplex | centroid; empty = matcher default
    std::size_t n_generate = 10000;
    std::size_t chunk = 500;
};

struct GuidanceSettings {
    double gamma = 10.0;
    std::size_t candidates = 10;
    std::size_t top_k = 0;
    std::uint64_t classifier_seed = 1;
};

struct ExperimentConfig {
    Matcher matcher = Matcher::kGumbelFm;
    ToySpec toy;
    TemperatureSchedule schedule;
    NoiseConfig noise;
    DenoiserConfig model;  // length and vocab follow toy.L and toy.K
    TrainingSettings training;
    SamplingSettings sampling;
    std::optional<GuidanceSettings> guidance;
    std::string output_dir = "runs/toy";
    std::uint64_t seed = 0;

    /// Parse strict JSON: unknown keys and wrong types are ConfigErrors, missing
    /// keys take defaults.
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig load(const std::string& path);
    /// Canonical form: every field present, keys sorted.
    std::string to_json() const;
    /// FNV-1a 64 of to_json() with output_dir blanked, as 16 hex digits.
    std::string hash() const;
    void validate() const;

    FmLoss fm_loss() const;
    ScoreLoss score_loss() const;
    StartState start_state() const;
    ModelKind model_kind() const;
};

struct LossRecord {
    std::size_t step;
    double loss;
    double wall_ms;
};

struct ToyReport {
    double final_kl = 0.0;
    std::vector<double> position_kl;
    std::vector<LossRecord> losses;
    double wall_ms = 0.0;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::optional<double> mean_classifier_score;

    /// report.json body. Wall time is left out so reruns compare byte-equal.
    std::string to_json(const ExperimentConfig& config) const;
};

const char* git_revision();

/// Worker count from SFLOW_THREADS (default 1).
std::size_t worker_count();

/// Train the configured model. `losses` receives a record every log_every
/// steps and at the last step.
DenoiserParams train_model(const ExperimentConfig& config,
                           std::span<const TokenSequence> dataset, Rng& rng,
                           std::vector<LossRecord>* losses = nullptr);

/// Generate `n` sequences from a trained model, fanned out in fixed chunks with
/// one split stream per chunk so the result does not depend on the worker count.
std::vector<TokenSequence> generate(const DenoiserParams& params, ModelKind kind,
                                    const ExperimentConfig& config, std::size_t n, const Rng& rng,
                                    const SequenceClassifier* classifier = nullptr);

/// Full pipeline: target, dataset, training, generation, KL; writes
/// metrics.csv, report.json and model.ckpt under config.output_dir.
ToyReport run_toy_experiment(const ExperimentConfig& config);

/// Invariant suite behind `check`. Prints one line per check; true if all pass.
bool run_self_check(std::ostream& out);

/// Entry point of the command line tool.
int cli_dispatch(int argc, char** argv);

}  // namespace sflow
