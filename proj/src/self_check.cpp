// Quick invariant sweep run by `sflow check`. Sizes are kept small so the
// whole thing finishes in a couple of seconds.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>

#include "sflow/harness.hpp"

namespace sflow {

namespace {

double rel_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0.0;
    double scale = 1e-12;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a[i] - b[i]));
        scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    }
    return diff / scale;
}

double row_sum(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

struct Checker {
    std::ostream& out;
    bool all_ok = true;

    void report(const std::string& name, bool ok, double value) {
        out << (ok ? "ok   " : "FAIL ") << name << "  (" << value << ")\n";
        all_ok = all_ok && ok;
    }
};

std::vector<double> random_point(Rng& rng, std::size_t V) {
    std::vector<double> x(V);
    sample_uniform_simplex(rng, x);
    return x;
}

}  // namespace

bool run_self_check(std::ostream& out) {
    Checker c{out};
    Rng rng(2024);
    const TemperatureSchedule sched;
    const NoiseConfig noise;

    {  // velocity vs finite difference of the interpolant in t
        double worst = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t V = 2 + rng.below(15);
            const OneHotToken tok(rng.below(V), V);
            const auto g = sample_gumbel(rng, V, noise);
            const double t = 0.02 + 0.96 * rng.uniform();
            const double h = 1e-6;
            const auto xp = gs_interpolant(tok, g, sched.at(t + h)).probs;
            const auto xm = gs_interpolant(tok, g, sched.at(t - h)).probs;
            std::vector<double> fd(V);
            for (std::size_t i = 0; i < V; ++i) fd[i] = (xp[i] - xm[i]) / (2 * h);
            const auto x = gs_interpolant(tok, g, sched.at(t)).probs;
            worst = std::max(worst, rel_error(conditional_velocity_train(x, tok, g, sched, t), fd));
        }
        c.report("velocity matches d/dt of the interpolant", worst <= 1e-4, worst);
    }
    {  // score vs finite difference of the ExpConcrete density
        double worst = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t V = 2 + rng.below(10);
            const OneHotToken tok(rng.below(V), V);
            const double tau = 0.3 + 9.7 * rng.uniform();
            LogSimplexPoint x{log_softmax(random_point(rng, V))};
            for (double& v : x.log_probs) v = std::log(std::max(std::exp(v), 1e-6));
            const auto s = conditional_score(x, tok, tau);
            std::vector<double> fd(V);
            for (std::size_t i = 0; i < V; ++i) {
                const double h = 1e-6;
                LogSimplexPoint a = x, b = x;
                a.log_probs[i] += h;
                b.log_probs[i] -= h;
                fd[i] = (expconcrete_log_density(a, tok, tau) - expconcrete_log_density(b, tok, tau)) /
                        (2 * h);
            }
            worst = std::max(worst, rel_error(s, fd));
        }
        c.report("score matches gradient of the log-density", worst <= 1e-4, worst);
    }
    {  // tangency
        double worst = 0.0;
        double score_worst = 0.0;
        for (int trial = 0; trial < 500; ++trial) {
            const std::size_t V = 2 + rng.below(30);
            const OneHotToken tok(rng.below(V), V);
            const auto x = random_point(rng, V);
            const auto p = random_point(rng, V);
            const auto g = sample_gumbel(rng, V, noise);
            const double t = rng.uniform();
            worst = std::max(worst, std::abs(row_sum(conditional_velocity_train(x, tok, g, sched, t))));
            worst = std::max(worst, std::abs(row_sum(marginal_velocity(x, p, sched, t))));
            worst = std::max(worst, std::abs(row_sum(straight_through_grad(x, tok.index, 1.0))));
            LogSimplexPoint lx{log_softmax(x)};
            score_worst = std::max(score_worst, std::abs(row_sum(conditional_score(lx, tok, sched.at(t)))));
        }
        c.report("velocity and straight-through rows sum to zero", worst <= 1e-9, worst);
        c.report("score rows sum to zero", score_worst <= 1e-7, score_worst);
    }
    {  // Concrete vs ExpConcrete gradients
        double worst = 0.0;
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t V = 2 + rng.below(6);
            const OneHotToken tok(rng.below(V), V);
            const double tau = 0.5 + 4.0 * rng.uniform();
            auto x = random_point(rng, V);
            for (double& v : x) v = 0.02 + v;
            const double s = row_sum(x);
            for (double& v : x) v /= s;
            const auto gs = gs_score(SimplexPoint{x}, tok, tau);
            std::vector<double> fd(V);
            for (std::size_t i = 0; i < V; ++i) {
                const double h = 1e-7;
                SimplexPoint a{x}, b{x};
                a.probs[i] += h;
                b.probs[i] -= h;
                fd[i] = (gs_log_density(a, tok, tau) - gs_log_density(b, tok, tau)) / (2 * h);
            }
            worst = std::max(worst, rel_error(gs, fd));
        }
        c.report("Concrete gradient equals rescaled ExpConcrete gradient", worst <= 1e-4, worst);
    }
    {  // denoiser gradients
        DenoiserConfig cfg;
        cfg.length = 3;
        cfg.vocab = 5;
        cfg.hidden = 16;
        cfg.depth = 2;
        cfg.n_freq = 3;
        Rng init(11);
        const auto params = DenoiserParams::init(cfg, init, false);
        SequenceState probe(cfg.length, cfg.vocab);
        for (std::size_t p = 0; p < cfg.length; ++p) sample_uniform_simplex(rng, probe.row(p));
        const auto rep = grad_check(params, probe, 0.37);
        c.report("denoiser backward matches finite differences", rep.max_rel_error <= 1e-4,
                 rep.max_rel_error);
        const auto bad = grad_check(params, probe, 0.37, 7, 24, [](ParamGrads& g) {
            for (auto& l : g.layers) l.weight *= 2.0;
        });
        c.report("grad check catches a doubled gradient", bad.max_rel_error > 1e-2, bad.max_rel_error);
    }
    {  // boundary behaviour of the noise-free interpolant
        bool ok = true;
        double worst_ratio = 0.0;
        for (std::size_t V : {2u, 8u, 20u, 512u}) {
            const auto zero = sample_gumbel(rng, V, NoiseConfig::none());
            for (std::size_t k = 0; k < V; ++k) {
                const OneHotToken tok(k, V);
                const auto x0 = gs_interpolant(tok, zero, sched.at(0.0)).probs;
                const auto [lo, hi] = std::minmax_element(x0.begin(), x0.end());
                worst_ratio = std::max(worst_ratio, *hi / *lo);
                ok = ok && argmax(gs_interpolant(tok, zero, sched.at(1.0)).probs) == k;
            }
        }
        ok = ok && worst_ratio <= std::exp(1.0 / sched.tau_max) * (1 + 1e-12);
        c.report("interpolant endpoints: near-uniform start, correct argmax at t=1", ok, worst_ratio);
    }
    {  // projection lands on the simplex
        double worst = 0.0;
        for (int trial = 0; trial < 500; ++trial) {
            const std::size_t V = 1 + rng.below(40);
            std::vector<double> v(V);
            for (double& x : v) x = 4.0 * (rng.uniform() - 0.5);
            const auto p = simplex_project(v);
            worst = std::max(worst, std::abs(row_sum(p.probs) - 1.0));
            for (double x : p.probs) worst = std::max(worst, -x);
        }
        c.report("projection output is a distribution", worst <= 1e-12, worst);
    }
    out << (c.all_ok ? "all checks passed\n" : "some checks FAILED\n");
    return c.all_ok;
}

}  // namespace sflow
