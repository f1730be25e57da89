#include "sflow/simplex.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

#include "sflow/errors.hpp"

namespace sflow {

bool SimplexPoint::valid(double tol) const {
    if (probs.empty()) return false;
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) return false;
        sum += p;
    }
    return std::abs(sum - 1.0) <= tol;
}

bool LogSimplexPoint::valid(double tol) const {
    if (log_probs.empty()) return false;
    return std::abs(logsumexp(log_probs)) <= tol;
}

OneHotToken::OneHotToken(std::size_t k, std::size_t v) : index(k), vocab(v) {
    if (v == 0 || k >= v) {
        throw ConfigError("token index " + std::to_string(k) + " outside vocabulary of size " +
                          std::to_string(v));
    }
}

std::vector<double> OneHotToken::dense() const {
    std::vector<double> out(vocab, 0.0);
    out[index] = 1.0;
    return out;
}

SequenceState::SequenceState(std::size_t length, std::size_t vocab, double fill)
    : length_(length), vocab_(vocab), data_(length * vocab, fill) {
    if (length == 0 || vocab == 0) throw ConfigError("sequence state needs L >= 1 and V >= 1");
}

SequenceState SequenceState::uniform(std::size_t length, std::size_t vocab) {
    return SequenceState(length, vocab, 1.0 / static_cast<double>(vocab));
}

bool SequenceState::valid(double tol) const {
    for (std::size_t p = 0; p < length_; ++p) {
        auto r = row(p);
        SimplexPoint pt{{r.begin(), r.end()}};
        if (!pt.valid(tol)) return false;
    }
    return length_ > 0;
}

TemperatureSchedule::TemperatureSchedule(double tau_max_, double lambda_)
    : tau_max(tau_max_), lambda(lambda_) {
    if (!(tau_max_ > 0.0) || !std::isfinite(tau_max_)) {
        throw ConfigError("tau_max must be positive and finite");
    }
    if (!(lambda_ >= 0.0) || !std::isfinite(lambda_)) {
        throw ConfigError("lambda must be nonnegative and finite");
    }
}

double TemperatureSchedule::at(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw DomainError("temperature requested at t=" + std::to_string(t) +
                          ", outside [0, 1]");
    }
    return tau_max * std::exp(-lambda * t);
}

double temperature_at(const TemperatureSchedule& schedule, double t) { return schedule.at(t); }

double gumbel_from_uniform(double u, const NoiseConfig& noise) {
    if (noise.noise_free) return 0.0;
    return -std::log(-std::log(u + noise.epsilon) + noise.epsilon) / noise.beta;
}

std::vector<double> sample_gumbel(Rng& rng, std::size_t count, const NoiseConfig& noise) {
    std::vector<double> g(count, 0.0);
    if (noise.noise_free) return g;
    for (auto& x : g) x = gumbel_from_uniform(rng.uniform(), noise);
    return g;
}

double logsumexp(std::span<const double> v) {
    if (v.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> v) {
    std::vector<double> out(v.size());
    if (v.empty()) return out;
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        s += out[i];
    }
    for (auto& x : out) x /= s;
    return out;
}

std::vector<double> log_softmax(std::span<const double> v) {
    const double lse = logsumexp(v);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
    return out;
}

std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

namespace {

std::vector<double> tempered_logits(std::span<const double> log_pi, std::span<const double> g,
                                    double tau) {
    if (log_pi.size() != g.size()) throw ConfigError("noise length differs from vocabulary");
    if (!(tau > 0.0)) throw DomainError("temperature must be positive");
    std::vector<double> z(log_pi.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (log_pi[i] + g[i]) / tau;
    return z;
}

std::vector<double> one_hot_logits(const OneHotToken& target, std::size_t size) {
    if (size != target.vocab) throw ConfigError("noise length differs from vocabulary");
    return target.dense();
}

}  // namespace

SimplexPoint gs_from_logits(std::span<const double> log_pi, std::span<const double> g,
                            double tau) {
    return {softmax(tempered_logits(log_pi, g, tau))};
}

LogSimplexPoint expconcrete_from_logits(std::span<const double> log_pi,
                                        std::span<const double> g, double tau) {
    return {log_softmax(tempered_logits(log_pi, g, tau))};
}

SimplexPoint gs_interpolant(const OneHotToken& target, std::span<const double> g, double tau) {
    return gs_from_logits(one_hot_logits(target, g.size()), g, tau);
}

LogSimplexPoint expconcrete_interpolant(const OneHotToken& target, std::span<const double> g,
                                        double tau) {
    return expconcrete_from_logits(one_hot_logits(target, g.size()), g, tau);
}

void simplex_project_inplace(std::span<double> v) {
    if (v.empty()) throw DomainError("cannot project an empty vector");
    bool feasible = true;
    double sum = 0.0;
    for (double x : v) {
        if (!std::isfinite(x)) throw DomainError("non-finite entry in simplex projection");
        if (x < 0.0) feasible = false;
        sum += x;
    }
    if (feasible && std::abs(sum - 1.0) <= 1e-12) return;

    std::vector<double> u(v.begin(), v.end());
    std::sort(u.begin(), u.end(), std::greater<>());
    double cumulative = 0.0;
    double theta = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) {
        cumulative += u[j];
        const double candidate = (cumulative - 1.0) / static_cast<double>(j + 1);
        if (u[j] - candidate > 0.0) theta = candidate;
    }
    for (auto& x : v) x = std::max(x - theta, 0.0);
}

SimplexPoint simplex_project(std::span<const double> v) {
    SimplexPoint out{{v.begin(), v.end()}};
    simplex_project_inplace(out.probs);
    return out;
}

void sample_uniform_simplex(Rng& rng, std::span<double> out) {
    double total = 0.0;
    for (auto& x : out) {
        x = rng.exponential();
        total += x;
    }
    for (auto& x : out) x /= total;
}

}  // namespace sflow
