#include "sflow/score_match.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sflow/errors.hpp"

namespace sflow {

namespace {

constexpr double kInteriorFloor = 1e-12;

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw DomainError("temperature must be positive, got " + std::to_string(tau));
    }
}

void check_vocab(std::size_t n, const OneHotToken& target) {
    if (n != target.vocab) throw ConfigError("point and token disagree on vocabulary size");
}

// log pi_i - tau * y_i with pi_i = exp(delta_ik)
std::vector<double> tilted(std::span<const double> y, const OneHotToken& target, double tau) {
    std::vector<double> a(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) a[i] = target.delta(i) - tau * y[i];
    return a;
}

double log_normalizer(std::size_t V, double tau) {
    const double n = static_cast<double>(V);
    return std::lgamma(n) + (n - 1.0) * std::log(tau);
}

}  // namespace

double expconcrete_log_density(const LogSimplexPoint& x, const OneHotToken& target, double tau) {
    check_tau(tau);
    check_vocab(x.size(), target);
    const auto a = tilted(x.log_probs, target, tau);
    double sum = 0.0;
    for (double v : a) sum += v;
    return log_normalizer(x.size(), tau) + sum -
           static_cast<double>(x.size()) * logsumexp(a);
}

std::vector<double> conditional_score(const LogSimplexPoint& x, const OneHotToken& target,
                                      double tau) {
    check_tau(tau);
    check_vocab(x.size(), target);
    auto s = softmax(tilted(x.log_probs, target, tau));
    const double tv = tau * static_cast<double>(x.size());
    for (double& v : s) v = -tau + tv * v;
    return s;
}

double gs_log_density(const SimplexPoint& x, const OneHotToken& target, double tau) {
    check_tau(tau);
    check_vocab(x.size(), target);
    std::vector<double> logx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x.probs[i] >= kInteriorFloor)) {
            throw DomainError("Concrete density needs an interior point");
        }
        logx[i] = std::log(x.probs[i]);
    }
    const auto a = tilted(logx, target, tau);
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] - logx[i];
    return log_normalizer(x.size(), tau) + sum -
           static_cast<double>(x.size()) * logsumexp(a);
}

std::vector<double> gs_score(const SimplexPoint& x, const OneHotToken& target, double tau) {
    LogSimplexPoint lx;
    lx.log_probs.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x.probs[i] >= kInteriorFloor)) {
            throw DomainError("Concrete score needs an interior point");
        }
        lx.log_probs[i] = std::log(x.probs[i]);
    }
    auto s = conditional_score(lx, target, tau);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = (s[i] - 1.0) / x.probs[i];
    return s;
}

ScoreField score_parameterize(std::span<const double> raw, double tau, std::size_t vocab) {
    if (vocab == 0 || raw.size() % vocab != 0) throw ConfigError("raw output not a multiple of V");
    const std::size_t length = raw.size() / vocab;
    ScoreField out(length, vocab);
    const double tv = tau * static_cast<double>(vocab);
    for (std::size_t p = 0; p < length; ++p) {
        const auto sm = softmax(raw.subspan(p * vocab, vocab));
        auto row = out.row(p);
        for (std::size_t i = 0; i < vocab; ++i) row[i] = -tau + tv * sm[i];
    }
    return out;
}

double score_loss(std::span<const double> raw, const SequenceState& x_log,
                  std::span<const std::uint32_t> tokens, double tau) {
    const std::size_t V = x_log.vocab();
    if (raw.size() != x_log.length() * V || tokens.size() != x_log.length()) {
        throw ConfigError("score_loss: shape mismatch");
    }
    double total = 0.0;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const OneHotToken target(tokens[p], V);
        const auto q = softmax(tilted(x_log.row(p), target, tau));
        const auto s = softmax(raw.subspan(p * V, V));
        for (std::size_t i = 0; i < V; ++i) total += (s[i] - q[i]) * (s[i] - q[i]);
    }
    return total / static_cast<double>(tokens.size());
}

double sm_train_step(DenoiserParams& params, OptimizerState& opt,
                     std::span<const TokenSequence> batch, Rng& rng, const SmTrainConfig& config) {
    if (batch.empty()) throw UsageError("sm_train_step: empty batch");
    const auto& cfg = params.config;
    const std::size_t n = batch.size();
    const std::size_t V = cfg.vocab;
    std::vector<SequenceState> inputs;
    inputs.reserve(n);
    std::vector<double> times(n);
    // per-column regression target, (L*V) x B
    Eigen::MatrixXd targets(static_cast<Eigen::Index>(cfg.state_dim()),
                            static_cast<Eigen::Index>(n));

    for (std::size_t b = 0; b < n; ++b) {
        if (batch[b].size() != cfg.length) throw ConfigError("sm_train_step: sequence length");
        const double t = rng.uniform();
        const double tau = config.schedule.at(t);
        times[b] = t;
        SequenceState x(cfg.length, V);
        for (std::size_t p = 0; p < cfg.length; ++p) {
            const OneHotToken target(batch[b][p], V);
            const auto g = sample_gumbel(rng, V, config.noise);
            const auto xl = expconcrete_interpolant(target, g, tau);
            auto row = x.row(p);
            for (std::size_t i = 0; i < V; ++i) row[i] = std::exp(xl.log_probs[i]);
            std::vector<double> goal(V);
            if (config.loss == ScoreLoss::kSoftmax) {
                goal = softmax(tilted(xl.log_probs, target, tau));
            } else {
                for (std::size_t i = 0; i < V; ++i) goal[i] = target.delta(i) + tau * row[i];
            }
            for (std::size_t i = 0; i < V; ++i) {
                targets(static_cast<Eigen::Index>(p * V + i), static_cast<Eigen::Index>(b)) = goal[i];
            }
        }
        inputs.push_back(std::move(x));
    }

    ForwardCache cache = forward_batch(params, inputs, times);
    Eigen::MatrixXd grad(cache.logits.rows(), cache.logits.cols());
    const double scale = 1.0 / static_cast<double>(n * cfg.length);
    double loss = 0.0;
    if (config.loss == ScoreLoss::kSoftmax) {
        // d/draw |s - q|^2 = 2 J_s (s - q), J_s = diag(s) - s s^T
        const Eigen::MatrixXd diff = cache.probs - targets;
        loss = diff.squaredNorm() * scale;
        for (Eigen::Index b = 0; b < grad.cols(); ++b) {
            for (std::size_t p = 0; p < cfg.length; ++p) {
                const auto off = static_cast<Eigen::Index>(p * V);
                const auto n_v = static_cast<Eigen::Index>(V);
                const auto s = cache.probs.col(b).segment(off, n_v);
                const auto d = diff.col(b).segment(off, n_v);
                const double inner = s.dot(d);
                grad.col(b).segment(off, n_v) =
                    2.0 * scale * s.cwiseProduct(d - Eigen::VectorXd::Constant(n_v, inner));
            }
        }
    } else {
        const Eigen::MatrixXd diff = cache.logits - targets;
        loss = diff.squaredNorm() * scale;
        grad = 2.0 * scale * diff;
    }
    ParamGrads grads = backward(params, cache, grad);
    adam_step(params, grads, opt);
    return loss;
}

SampleResult sm_sample(const DenoiserParams& params, std::size_t n, const SmSamplerConfig& sampler,
                       const TemperatureSchedule& schedule, Rng& rng, const StepHook& hook) {
    if (!(sampler.eta > 0.0)) throw ConfigError("score ascent step size must be positive");
    if (sampler.n_steps == 0) throw ConfigError("sampler needs n_steps >= 1");
    const auto& cfg = params.config;
    const std::size_t V = cfg.vocab;
    std::vector<SequenceState> states = initial_states(n, cfg.length, V, sampler.start, rng);
    const double dt = 1.0 / static_cast<double>(sampler.n_steps);

    SampleResult result;
    result.trace.reserve(sampler.n_steps);
    std::vector<double> times(n);
    std::vector<double> raw(cfg.state_dim());
    for (std::size_t step = 0; step < sampler.n_steps; ++step) {
        const double t = static_cast<double>(step) * dt;
        const double tau = schedule.at(t);
        std::fill(times.begin(), times.end(), t);
        if (n > 0) {
            const ForwardCache cache = forward_batch(params, states, times);
            for (std::size_t b = 0; b < n; ++b) {
                const auto col = cache.logits.col(static_cast<Eigen::Index>(b));
                std::copy(col.data(), col.data() + col.size(), raw.begin());
                const ScoreField s = score_parameterize(raw, tau, V);
                for (std::size_t p = 0; p < cfg.length; ++p) {
                    auto x = states[b].row(p);
                    const auto sp = s.row(p);
                    for (std::size_t i = 0; i < V; ++i) x[i] += sampler.eta * sp[i];
                    for (double xi : x) {
                        if (!std::isfinite(xi)) {
                            throw NumericalError("non-finite sampler state", static_cast<long>(step));
                        }
                    }
                    simplex_project_inplace(x);
                }
            }
        }
        if (hook) hook(step, std::min(t + dt, 1.0), states);
        result.trace.push_back(summarize(step, t, tau, states));
    }
    result.sequences.reserve(n);
    for (const auto& s : states) result.sequences.push_back(decode_argmax(s));
    result.final_states = std::move(states);
    return result;
}

}  // namespace sflow
