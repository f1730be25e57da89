#include "sflow/stgflow.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "sflow/errors.hpp"

namespace sflow {

ToyLinearClassifier::ToyLinearClassifier(std::size_t length, std::size_t vocab,
                                         std::vector<double> weights)
    : length_(length), vocab_(vocab), weights_(std::move(weights)) {
    if (length == 0 || vocab == 0 || weights_.size() != length * vocab) {
        throw ConfigError("classifier weights must be L x V");
    }
}

ToyLinearClassifier ToyLinearClassifier::random(std::size_t length, std::size_t vocab, Rng& rng) {
    std::vector<double> w(length * vocab);
    for (double& v : w) v = 2.0 * rng.uniform() - 1.0;
    return {length, vocab, std::move(w)};
}

double ToyLinearClassifier::score(std::span<const std::uint32_t> tokens) const {
    if (tokens.size() != length_) throw ConfigError("classifier: sequence length mismatch");
    double s = 0.0;
    for (std::size_t p = 0; p < length_; ++p) {
        if (tokens[p] >= vocab_) throw ConfigError("classifier: token outside vocabulary");
        s += weights_[p * vocab_ + tokens[p]];
    }
    return s / static_cast<double>(length_);
}

std::vector<double> ToyLinearClassifier::input_gradient(const SequenceState& one_hot) const {
    if (one_hot.length() != length_ || one_hot.vocab() != vocab_) {
        throw ConfigError("classifier: input shape mismatch");
    }
    std::vector<double> g = weights_;
    for (double& v : g) v /= static_cast<double>(length_);
    return g;
}

double ToyLinearClassifier::min_score() const {
    double s = 0.0;
    for (std::size_t p = 0; p < length_; ++p) {
        const auto row = std::span(weights_).subspan(p * vocab_, vocab_);
        s += *std::min_element(row.begin(), row.end());
    }
    return s / static_cast<double>(length_);
}

double ToyLinearClassifier::max_score() const {
    double s = 0.0;
    for (std::size_t p = 0; p < length_; ++p) {
        const auto row = std::span(weights_).subspan(p * vocab_, vocab_);
        s += *std::max_element(row.begin(), row.end());
    }
    return s / static_cast<double>(length_);
}

std::size_t GuidanceConfig::effective_top_k(std::size_t vocab) const {
    return top_k == 0 ? std::min<std::size_t>(10, vocab) : top_k;
}

void GuidanceConfig::validate(std::size_t vocab) const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be >= 0");
    if (candidates == 0) throw ConfigError("need at least one guidance candidate");
    const std::size_t k = effective_top_k(vocab);
    if (k < 1 || k > vocab) throw ConfigError("top_k must lie in [1, V]");
    if (classifier == nullptr) throw ConfigError("guidance needs a classifier");
}

SimplexPoint topk_renormalize(std::span<const double> row, std::size_t k) {
    if (k < 1 || k > row.size()) throw ConfigError("top_k must lie in [1, V]");
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    order.resize(k);
    std::vector<double> kept(k);
    for (std::size_t j = 0; j < k; ++j) kept[j] = row[order[j]];
    const auto sm = softmax(kept);
    SimplexPoint out{std::vector<double>(row.size(), 0.0)};
    for (std::size_t j = 0; j < k; ++j) out.probs[order[j]] = sm[j];
    return out;
}

std::vector<TokenSequence> sample_candidates(const SequenceState& dist, std::size_t m, Rng& rng) {
    if (m == 0) throw ConfigError("need at least one candidate");
    std::vector<TokenSequence> out(m, TokenSequence(dist.length()));
    for (auto& seq : out) {
        for (std::size_t p = 0; p < dist.length(); ++p) {
            seq[p] = static_cast<std::uint32_t>(rng.categorical(dist.row(p)));
        }
    }
    return out;
}

std::vector<double> straight_through_grad(std::span<const double> x_t, std::size_t k,
                                          double upstream) {
    if (k >= x_t.size()) throw ConfigError("sampled token outside vocabulary");
    auto sm = softmax(x_t);
    const double sk = sm[k];
    for (std::size_t i = 0; i < sm.size(); ++i) {
        sm[i] = i == k ? upstream * sm[i] * (1.0 - sk) : -upstream * sm[i] * sk;
    }
    return sm;
}

SequenceState one_hot_state(std::span<const std::uint32_t> tokens, std::size_t vocab) {
    SequenceState s(tokens.size(), vocab);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        if (tokens[p] >= vocab) throw ConfigError("token outside vocabulary");
        s.row(p)[tokens[p]] = 1.0;
    }
    return s;
}

void guided_step(SequenceState& x, std::span<const TokenSequence> candidates,
                 const SequenceClassifier& classifier, double gamma) {
    if (gamma == 0.0) return;
    const std::size_t V = x.vocab();
    std::vector<double> total(x.flat().size(), 0.0);
    for (std::size_t m = 0; m < candidates.size(); ++m) {
        const auto& cand = candidates[m];
        if (cand.size() != x.length()) throw ConfigError("candidate length mismatch");
        std::vector<double> up;
        try {
            up = classifier.input_gradient(one_hot_state(cand, V));
        } catch (const std::exception& e) {
            throw ClassifierError(e.what(), m);
        }
        if (up.size() != total.size()) throw ClassifierError("gradient has wrong shape", m);
        for (std::size_t p = 0; p < x.length(); ++p) {
            const std::size_t k = cand[p];
            const auto g = straight_through_grad(x.row(p), k, up[p * V + k]);
            for (std::size_t i = 0; i < V; ++i) total[p * V + i] += g[i];
        }
    }
    auto flat = x.flat();
    for (std::size_t j = 0; j < flat.size(); ++j) flat[j] += gamma * total[j];
    for (std::size_t p = 0; p < x.length(); ++p) simplex_project_inplace(x.row(p));
}

void write_guidance_csv(std::ostream& out, std::span<const GuidanceTraceRow> trace) {
    out << "step,t,mean_score,max_score,gamma\n" << std::setprecision(17);
    for (const auto& r : trace) {
        out << r.step << ',' << r.t << ',' << r.mean_score << ',' << r.max_score << ',' << r.gamma
            << '\n';
    }
}

GuidedResult stgflow_sample(const DenoiserParams& params, std::size_t n,
                            const GuidanceConfig& guidance, const SamplerConfig& sampler,
                            const TemperatureSchedule& schedule, Rng& rng) {
    const std::size_t V = params.config.vocab;
    guidance.validate(V);
    const std::size_t k = guidance.effective_top_k(V);
    const SequenceClassifier& clf = *guidance.classifier;

    GuidedResult result;
    result.guidance.reserve(sampler.n_steps);
    auto hook = [&](std::size_t step, double t, std::vector<SequenceState>& states) {
        double sum = 0.0;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t count = 0;
        for (auto& x : states) {
            SequenceState dist(x.length(), V);
            for (std::size_t p = 0; p < x.length(); ++p) {
                const auto row = topk_renormalize(x.row(p), k);
                std::copy(row.probs.begin(), row.probs.end(), dist.row(p).begin());
            }
            const auto cands = sample_candidates(dist, guidance.candidates, rng);
            for (std::size_t m = 0; m < cands.size(); ++m) {
                double s = 0.0;
                try {
                    s = clf.score(cands[m]);
                } catch (const std::exception& e) {
                    throw ClassifierError(e.what(), m);
                }
                sum += s;
                best = std::max(best, s);
                ++count;
            }
            guided_step(x, cands, clf, guidance.gamma);
        }
        GuidanceTraceRow row;
        row.step = step;
        row.t = t;
        row.mean_score = count ? sum / static_cast<double>(count) : 0.0;
        row.max_score = count ? best : 0.0;
        row.gamma = guidance.gamma;
        result.guidance.push_back(row);
    };
    result.sample = fm_sample(params, n, sampler, schedule, rng, hook);
    return result;
}

}  // namespace sflow
