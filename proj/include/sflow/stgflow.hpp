#pragma once

// Straight-through classifier guidance on top of the flow sampler.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sflow/denoiser.hpp"
#include "sflow/flow_match.hpp"
#include "sflow/rng.hpp"
#include "sflow/simplex.hpp"

namespace sflow {

/// Scores discrete sequences. input_gradient takes the one-hot rendering of a
/// sequence and returns d(score)/d(one-hot entries) as an L x V row-major list.
class SequenceClassifier {
public:
    virtual ~SequenceClassifier() = default;
    virtual double score(std::span<const std::uint32_t> tokens) const = 0;
    virtual std::vector<double> input_gradient(const SequenceState& one_hot) const = 0;
};

/// score = mean over positions of weights[p][token_p].
class ToyLinearClassifier : public SequenceClassifier {
public:
    ToyLinearClassifier(std::size_t length, std::size_t vocab, std::vector<double> weights);
    /// Weights i.i.d. uniform on [-1, 1].
    static ToyLinearClassifier random(std::size_t length, std::size_t vocab, Rng& rng);

    double score(std::span<const std::uint32_t> tokens) const override;
    /// weights / L, independent of the point.
    std::vector<double> input_gradient(const SequenceState& one_hot) const override;

    double min_score() const;
    double max_score() const;
    std::span<const double> weights() const { return weights_; }

private:
    std::size_t length_;
    std::size_t vocab_;
    std::vector<double> weights_;
};

struct GuidanceConfig {
    double gamma = 10.0;
    std::size_t candidates = 10;  // M
    std::size_t top_k = 0;        // 0 means min(10, V)
    const SequenceClassifier* classifier = nullptr;

    std::size_t effective_top_k(std::size_t vocab) const;
    void validate(std::size_t vocab) const;
};

/// Softmax over the k largest entries (taken as logits), zero elsewhere.
/// Ties at the cut go to the lower index.
SimplexPoint topk_renormalize(std::span<const double> row, std::size_t k);

/// M independent per-position categorical draws.
std::vector<TokenSequence> sample_candidates(const SequenceState& dist, std::size_t m, Rng& rng);

/// upstream * d softmax(x)_k / dx.
std::vector<double> straight_through_grad(std::span<const double> x_t, std::size_t k,
                                          double upstream);

/// One-hot rendering of a token sequence.
SequenceState one_hot_state(std::span<const std::uint32_t> tokens, std::size_t vocab);

/// x <- proj(x + gamma * sum_m straight-through gradient of candidate m).
/// gamma == 0 leaves x untouched.
void guided_step(SequenceState& x, std::span<const TokenSequence> candidates,
                 const SequenceClassifier& classifier, double gamma);

struct GuidanceTraceRow {
    std::size_t step = 0;
    double t = 0.0;
    double mean_score = 0.0;
    double max_score = 0.0;
    double gamma = 0.0;
};

void write_guidance_csv(std::ostream& out, std::span<const GuidanceTraceRow> trace);

struct GuidedResult {
    SampleResult sample;
    std::vector<GuidanceTraceRow> guidance;
};

/// fm_sample with a guided step after every Euler step. Candidates are drawn
/// from the top-k distribution of the post-step state.
GuidedResult stgflow_sample(const DenoiserParams& params, std::size_t n,
                            const GuidanceConfig& guidance, const SamplerConfig& sampler,
                            const TemperatureSchedule& schedule, Rng& rng);

}  // namespace sflow
