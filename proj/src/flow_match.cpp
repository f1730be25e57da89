#include "sflow/flow_match.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>

#include "sflow/baseline.hpp"
#include "sflow/errors.hpp"

namespace sflow {

namespace {

constexpr double kMinTau = 1e-8;
constexpr double kNllFloor = 1e-12;

double velocity_prefactor(const TemperatureSchedule& schedule, double t) {
    const double tau = schedule.at(t);
    if (tau < kMinTau) {
        throw DomainError("temperature " + std::to_string(tau) + " below 1e-8 at t=" +
                          std::to_string(t));
    }
    return schedule.lambda / tau;
}

void check_sizes(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw ConfigError(std::string(what) + ": length mismatch");
}

}  // namespace

double VelocityField::max_row_sum() const {
    double worst = 0.0;
    for (std::size_t p = 0; p < length_; ++p) {
        double s = 0.0;
        for (double v : row(p)) s += v;
        worst = std::max(worst, std::abs(s));
    }
    return worst;
}

std::vector<double> conditional_velocity_train(std::span<const double> x_t,
                                               const OneHotToken& target,
                                               std::span<const double> g,
                                               const TemperatureSchedule& schedule, double t) {
    check_sizes(x_t.size(), g.size(), "conditional_velocity_train");
    check_sizes(x_t.size(), target.vocab, "conditional_velocity_train");
    const double c = velocity_prefactor(schedule, t);
    // sum_j x_j (a_i - a_j) = a_i * sum_j x_j - <x, a>
    double x_sum = 0.0;
    double mean_a = 0.0;
    for (std::size_t j = 0; j < x_t.size(); ++j) {
        const double a = target.delta(j) + g[j];
        x_sum += x_t[j];
        mean_a += x_t[j] * a;
    }
    std::vector<double> u(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double a = target.delta(i) + g[i];
        u[i] = c * x_t[i] * (a * x_sum - mean_a);
    }
    return u;
}

std::vector<double> conditional_velocity_inference(std::span<const double> x_t,
                                                   const OneHotToken& target,
                                                   const TemperatureSchedule& schedule, double t) {
    check_sizes(x_t.size(), target.vocab, "conditional_velocity_inference");
    const double c = velocity_prefactor(schedule, t) * x_t[target.index];
    std::vector<double> u(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) u[i] = c * (target.delta(i) - x_t[i]);
    return u;
}

std::vector<double> marginal_velocity(std::span<const double> x_t,
                                      std::span<const double> predicted,
                                      const TemperatureSchedule& schedule, double t) {
    check_sizes(x_t.size(), predicted.size(), "marginal_velocity");
    const double c = velocity_prefactor(schedule, t);
    double inner = 0.0;
    for (std::size_t i = 0; i < x_t.size(); ++i) inner += x_t[i] * predicted[i];
    std::vector<double> u(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) u[i] = c * (x_t[i] * predicted[i] - x_t[i] * inner);
    return u;
}

double fm_loss_nll(const SequenceState& predicted, std::span<const std::uint32_t> tokens) {
    check_sizes(predicted.length(), tokens.size(), "fm_loss_nll");
    double total = 0.0;
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        if (tokens[p] >= predicted.vocab()) throw ConfigError("token outside vocabulary");
        total -= std::log(std::max(predicted.row(p)[tokens[p]], kNllFloor));
    }
    return total / static_cast<double>(tokens.size());
}

double fm_loss_mse(const VelocityField& predicted, const VelocityField& truth) {
    if (predicted.length() != truth.length() || predicted.vocab() != truth.vocab()) {
        throw ConfigError("fm_loss_mse: shape mismatch");
    }
    const auto a = predicted.flat();
    const auto b = truth.flat();
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
    return total / static_cast<double>(a.size());
}

double fm_train_step(DenoiserParams& params, OptimizerState& opt,
                     std::span<const TokenSequence> batch, Rng& rng,
                     const FmTrainConfig& config) {
    if (batch.empty()) throw UsageError("fm_train_step: empty batch");
    const auto& cfg = params.config;
    const std::size_t n = batch.size();
    std::vector<SequenceState> states;
    states.reserve(n);
    std::vector<double> times(n);
    // Noise-free target velocities for the MSE branch, (L*V) x B.
    Eigen::MatrixXd velocity_targets;
    if (config.loss == FmLoss::kMse) {
        velocity_targets.resize(static_cast<Eigen::Index>(cfg.state_dim()),
                                static_cast<Eigen::Index>(n));
    }

    for (std::size_t b = 0; b < n; ++b) {
        const TokenSequence& seq = batch[b];
        check_sizes(seq.size(), cfg.length, "fm_train_step");
        const double t = rng.uniform();
        times[b] = t;
        SequenceState x(cfg.length, cfg.vocab);
        for (std::size_t p = 0; p < cfg.length; ++p) {
            const OneHotToken target(seq[p], cfg.vocab);
            auto row = x.row(p);
            if (config.path == ProbabilityPath::kGumbelSoftmax) {
                const double tau = config.schedule.at(t);
                const auto g = sample_gumbel(rng, cfg.vocab, config.noise);
                const auto pt = gs_interpolant(target, g, tau);
                std::copy(pt.probs.begin(), pt.probs.end(), row.begin());
            } else {
                sample_uniform_simplex(rng, row);
                for (std::size_t i = 0; i < cfg.vocab; ++i) {
                    row[i] = (1.0 - t) * row[i] + t * target.delta(i);
                }
            }
            if (config.loss == FmLoss::kMse) {
                const auto u = config.path == ProbabilityPath::kGumbelSoftmax
                                   ? conditional_velocity_inference(row, target, config.schedule, t)
                                   : linear_baseline_velocity(row, target.dense(),
                                                              std::min(t, kLinearTimeClamp));
                for (std::size_t i = 0; i < cfg.vocab; ++i) {
                    velocity_targets(static_cast<Eigen::Index>(p * cfg.vocab + i),
                                     static_cast<Eigen::Index>(b)) = u[i];
                }
            }
        }
        states.push_back(std::move(x));
    }

    ForwardCache cache = forward_batch(params, states, times);
    Eigen::MatrixXd grad;
    double loss = 0.0;
    if (config.loss == FmLoss::kNll) {
        grad = cache.probs;
        const double scale = 1.0 / static_cast<double>(n * cfg.length);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t p = 0; p < cfg.length; ++p) {
                const auto idx = static_cast<Eigen::Index>(p * cfg.vocab + batch[b][p]);
                const auto col = static_cast<Eigen::Index>(b);
                loss -= std::log(std::max(cache.probs(idx, col), kNllFloor));
                grad(idx, col) -= 1.0;
            }
        }
        loss *= scale;
        grad *= scale;
    } else {
        const double scale = 1.0 / static_cast<double>(velocity_targets.size());
        const Eigen::MatrixXd diff = cache.logits - velocity_targets;
        loss = diff.squaredNorm() * scale;
        grad = 2.0 * scale * diff;
    }
    ParamGrads grads = backward(params, cache, grad);
    adam_step(params, grads, opt);
    return loss;
}

std::vector<SequenceState> initial_states(std::size_t n, std::size_t length, std::size_t vocab,
                                          StartState start, Rng& rng) {
    std::vector<SequenceState> states;
    states.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (start == StartState::kCentroid) {
            states.push_back(SequenceState::uniform(length, vocab));
            continue;
        }
        SequenceState s(length, vocab);
        for (std::size_t p = 0; p < length; ++p) sample_uniform_simplex(rng, s.row(p));
        states.push_back(std::move(s));
    }
    return states;
}

TokenSequence decode_argmax(const SequenceState& state) {
    TokenSequence out(state.length());
    for (std::size_t p = 0; p < state.length(); ++p) {
        out[p] = static_cast<std::uint32_t>(argmax(state.row(p)));
    }
    return out;
}

TraceRow summarize(std::size_t step, double t, double tau, std::span<const SequenceState> states) {
    TraceRow row;
    row.step = step;
    row.t = t;
    row.tau = tau;
    if (states.empty()) return row;
    const std::size_t length = states.front().length();
    row.entropy.assign(length, 0.0);
    row.max_prob.assign(length, 0.0);
    for (const auto& s : states) {
        for (std::size_t p = 0; p < length; ++p) {
            double h = 0.0;
            double m = 0.0;
            for (double x : s.row(p)) {
                if (x > 0.0) h -= x * std::log(x);
                m = std::max(m, x);
            }
            row.entropy[p] += h;
            row.max_prob[p] += m;
        }
    }
    const double inv = 1.0 / static_cast<double>(states.size());
    for (std::size_t p = 0; p < length; ++p) {
        row.entropy[p] *= inv;
        row.max_prob[p] *= inv;
    }
    return row;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> trace) {
    const std::size_t length = trace.empty() ? 0 : trace.front().entropy.size();
    out << "step,t,tau";
    for (std::size_t p = 0; p < length; ++p) out << ",entropy_" << p;
    for (std::size_t p = 0; p < length; ++p) out << ",max_prob_" << p;
    out << '\n';
    out << std::setprecision(17);
    for (const auto& r : trace) {
        out << r.step << ',' << r.t << ',' << r.tau;
        for (double h : r.entropy) out << ',' << h;
        for (double m : r.max_prob) out << ',' << m;
        out << '\n';
    }
}

SampleResult fm_sample(const DenoiserParams& params, std::size_t n, const SamplerConfig& sampler,
                       const TemperatureSchedule& schedule, Rng& rng, const StepHook& hook) {
    if (sampler.n_steps == 0) throw ConfigError("sampler needs n_steps >= 1");
    const auto& cfg = params.config;
    const std::size_t V = cfg.vocab;
    std::vector<SequenceState> states = initial_states(n, cfg.length, V, sampler.start, rng);
    const double dt = sampler.dt();

    SampleResult result;
    result.trace.reserve(sampler.n_steps);
    std::vector<double> times(n);
    for (std::size_t step = 0; step < sampler.n_steps; ++step) {
        const double t = static_cast<double>(step) * dt;
        std::fill(times.begin(), times.end(), t);
        if (n > 0) {
            const ForwardCache cache = forward_batch(params, states, times);
            for (std::size_t b = 0; b < n; ++b) {
                const auto col = static_cast<Eigen::Index>(b);
                for (std::size_t p = 0; p < cfg.length; ++p) {
                    auto x = states[b].row(p);
                    const auto off = static_cast<Eigen::Index>(p * V);
                    std::vector<double> u(V);
                    if (sampler.mode == SamplerMode::kVelocity) {
                        for (std::size_t i = 0; i < V; ++i) {
                            u[i] = cache.logits(off + static_cast<Eigen::Index>(i), col);
                        }
                    } else {
                        std::vector<double> pred(V);
                        for (std::size_t i = 0; i < V; ++i) {
                            pred[i] = cache.probs(off + static_cast<Eigen::Index>(i), col);
                        }
                        u = sampler.path == ProbabilityPath::kGumbelSoftmax
                                ? marginal_velocity(x, pred, schedule, t)
                                : linear_baseline_velocity(x, pred, std::min(t, kLinearTimeClamp));
                    }
                    for (std::size_t i = 0; i < V; ++i) x[i] += dt * u[i];
                    for (double xi : x) {
                        if (!std::isfinite(xi)) {
                            throw NumericalError("non-finite sampler state", static_cast<long>(step));
                        }
                    }
                    simplex_project_inplace(x);
                }
            }
        }
        const double t_next = static_cast<double>(step + 1) * dt;
        if (hook) hook(step, std::min(t_next, 1.0), states);
        result.trace.push_back(summarize(step, t, schedule.at(t), states));
    }
    result.sequences.reserve(n);
    for (const auto& s : states) result.sequences.push_back(decode_argmax(s));
    result.final_states = std::move(states);
    return result;
}

}  // namespace sflow
