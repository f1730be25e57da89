#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sflow/errors.hpp"
#include "sflow/score_match.hpp"

using namespace sflow;

namespace {

LogSimplexPoint log_point(std::vector<double> p) {
    LogSimplexPoint x;
    for (double v : p) x.log_probs.push_back(std::log(v));
    return x;
}

LogSimplexPoint random_log_point(Rng& rng, std::size_t V) {
    std::vector<double> p(V);
    sample_uniform_simplex(rng, p);
    for (double& v : p) v = 0.01 + v;
    const double s = oracle::sum(p);
    for (double& v : p) v /= s;
    return log_point(p);
}

}  // namespace

TEST_CASE("ExpConcrete density fixture") {
    // V=2, tau=1, k=0 at the uniform point: 1 - 2 log(1 + e)
    const auto x = log_point({0.5, 0.5});
    CHECK(expconcrete_log_density(x, OneHotToken(0, 2), 1.0) ==
          doctest::Approx(1.0 - 2.0 * std::log1p(std::exp(1.0))).epsilon(1e-14));
}

TEST_CASE("ExpConcrete density normalizes on the V=2 log-simplex") {
    // parameterize the curve by u = x_0 - x_1; the density is with respect to du
    for (double tau : {0.5, 1.0, 3.0, 10.0}) {
        for (std::size_t k : {0u, 1u}) {
            const OneHotToken tok(k, 2);
            auto f = [&](double u) {
                LogSimplexPoint x{log_softmax(std::vector<double>{u, 0.0})};
                return std::exp(expconcrete_log_density(x, tok, tau));
            };
            const double A = 60.0 / tau + 10.0;
            CHECK(oracle::simpson(f, -A, A, 40000) == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
}

TEST_CASE("ExpConcrete concentration") {
    const OneHotToken tok(0, 3);
    const auto uniform = log_point({1.0 / 3, 1.0 / 3, 1.0 / 3});
    const auto vertex = log_point({0.98, 0.01, 0.01});
    // small temperature: mass moves toward the vertex
    CHECK(expconcrete_log_density(vertex, tok, 0.1) > expconcrete_log_density(uniform, tok, 0.1));
    // the noise-free point is the mode at any temperature
    for (double tau : {0.3, 1.0, 10.0}) {
        LogSimplexPoint mode{log_softmax(std::vector<double>{1.0 / tau, 0.0, 0.0})};
        CHECK(expconcrete_log_density(mode, tok, tau) > expconcrete_log_density(uniform, tok, tau));
        CHECK(expconcrete_log_density(mode, tok, tau) > expconcrete_log_density(vertex, tok, tau));
    }
}

TEST_CASE("conditional score is the gradient of the log-density") {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t V = 2 + rng.below(12);
        const OneHotToken tok(rng.below(V), V);
        const double tau = 0.3 + 9.7 * rng.uniform();
        const auto x = random_log_point(rng, V);
        const auto fd = oracle::fd_grad(
            [&](const std::vector<double>& y) {
                return expconcrete_log_density(LogSimplexPoint{y}, tok, tau);
            },
            x.log_probs, 1e-6);
        const auto s = conditional_score(x, tok, tau);
        CHECK(oracle::rel_err(s, fd) <= 1e-4);
        CHECK(std::abs(oracle::sum(s)) <= 1e-7);
    }
}

TEST_CASE("score at the symmetric V=2 point is antisymmetric") {
    const auto s = conditional_score(log_point({0.5, 0.5}), OneHotToken(0, 2), 1.0);
    CHECK(s[0] > 0);
    CHECK(s[0] == doctest::Approx(-s[1]));
}

TEST_CASE("Concrete density fixture and domain") {
    // V=2, tau=1, k=0 at [1/2, 1/2]: 1 + 2 log 2 - 2 log(1 + e)
    SimplexPoint x{{0.5, 0.5}};
    CHECK(gs_log_density(x, OneHotToken(0, 2), 1.0) ==
          doctest::Approx(1.0 + 2 * std::log(2.0) - 2 * std::log1p(std::exp(1.0))).epsilon(1e-14));
    CHECK_THROWS_AS(gs_log_density(SimplexPoint{{1.0, 0.0}}, OneHotToken(0, 2), 1.0), DomainError);
    CHECK_THROWS_AS(gs_score(SimplexPoint{{1.0, 0.0}}, OneHotToken(0, 2), 1.0), DomainError);
    CHECK_THROWS_AS(expconcrete_log_density(log_point({0.5, 0.5}), OneHotToken(0, 2), 0.0), DomainError);
}

TEST_CASE("Concrete density normalizes on [0, 1]") {
    for (double tau : {0.5, 1.0, 2.0}) {
        const OneHotToken tok(0, 2);
        // y = sigmoid(u), dy = y (1 - y) du
        auto f = [&](double u) {
            const double y = 1.0 / (1.0 + std::exp(-u));
            if (y < 1e-12 || 1 - y < 1e-12) return 0.0;
            return std::exp(gs_log_density(SimplexPoint{{y, 1 - y}}, tok, tau)) * y * (1 - y);
        };
        const double A = 50.0 / tau + 10.0;
        CHECK(oracle::simpson(f, -A, A, 40000) == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("Concrete and ExpConcrete gradients are related by the log map") {
    Rng rng(22);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t V = 2 + rng.below(6);
        const OneHotToken tok(rng.below(V), V);
        const double tau = 0.3 + 5.0 * rng.uniform();
        const auto lx = random_log_point(rng, V);
        std::vector<double> x(V);
        for (std::size_t i = 0; i < V; ++i) x[i] = std::exp(lx.log_probs[i]);

        const auto fd_gs = oracle::fd_grad(
            [&](const std::vector<double>& y) { return gs_log_density(SimplexPoint{y}, tok, tau); }, x,
            1e-7);
        const auto fd_ec = oracle::fd_grad(
            [&](const std::vector<double>& y) {
                return expconcrete_log_density(LogSimplexPoint{y}, tok, tau);
            },
            lx.log_probs, 1e-6);
        std::vector<double> mapped(V);
        for (std::size_t j = 0; j < V; ++j) mapped[j] = fd_ec[j] / x[j] - 1.0 / x[j];
        CHECK(oracle::rel_err(fd_gs, mapped) <= 1e-4);
        CHECK(oracle::rel_err(gs_score(SimplexPoint{x}, tok, tau), fd_gs) <= 1e-4);
    }
}

TEST_CASE("score parameterization") {
    const auto zero = score_parameterize(std::vector<double>(8, 0.0), 3.0, 4);
    for (double v : zero.flat()) CHECK(v == doctest::Approx(0.0).scale(1.0));

    Rng rng(23);
    std::vector<double> raw(15);
    for (double& v : raw) v = 4 * rng.uniform() - 2;
    const double tau = 2.5;
    const auto s = score_parameterize(raw, tau, 5);
    for (std::size_t p = 0; p < 3; ++p) {
        const auto sm = oracle::softmax(std::span<const double>(raw).subspan(p * 5, 5));
        for (std::size_t i = 0; i < 5; ++i) CHECK(s.row(p)[i] == doctest::Approx(-tau + tau * 5 * sm[i]));
        CHECK(std::abs(oracle::sum(s.row(p))) <= 1e-12);
    }
    CHECK_THROWS_AS(score_parameterize(raw, tau, 4), ConfigError);
}

TEST_CASE("score loss") {
    Rng rng(24);
    const std::size_t L = 3, V = 4;
    const double tau = 1.7;
    SequenceState xl(L, V);
    std::vector<std::uint32_t> tok(L);
    for (std::size_t p = 0; p < L; ++p) {
        const auto lp = random_log_point(rng, V);
        std::copy(lp.log_probs.begin(), lp.log_probs.end(), xl.row(p).begin());
        tok[p] = static_cast<std::uint32_t>(rng.below(V));
    }
    std::vector<double> exact(L * V);
    for (std::size_t p = 0; p < L; ++p) {
        for (std::size_t i = 0; i < V; ++i) exact[p * V + i] = (i == tok[p]) - tau * xl.row(p)[i];
    }
    CHECK(score_loss(exact, xl, tok, tau) == doctest::Approx(0.0).scale(1.0));

    std::vector<double> raw(L * V);
    for (double& v : raw) v = 3 * rng.uniform();
    double ref = 0.0;
    for (std::size_t p = 0; p < L; ++p) {
        const auto q = oracle::softmax(std::span<const double>(exact).subspan(p * V, V));
        const auto s = oracle::softmax(std::span<const double>(raw).subspan(p * V, V));
        for (std::size_t i = 0; i < V; ++i) ref += (q[i] - s[i]) * (q[i] - s[i]);
    }
    const double got = score_loss(raw, xl, tok, tau);
    CHECK(got == doctest::Approx(ref / L).epsilon(1e-12));

    auto shifted = raw;
    for (double& v : shifted) v += 5.0;
    CHECK(score_loss(shifted, xl, tok, tau) == doctest::Approx(got).epsilon(1e-12));
}

TEST_CASE("score training step") {
    DenoiserConfig cfg;
    cfg.length = 4;
    cfg.vocab = 8;
    Rng data_rng(25);
    SequenceState target(4, 8);
    for (std::size_t p = 0; p < 4; ++p) sample_uniform_simplex(data_rng, target.row(p));
    std::vector<TokenSequence> data(2048, TokenSequence(4));
    for (auto& s : data) {
        for (std::size_t p = 0; p < 4; ++p) s[p] = static_cast<std::uint32_t>(data_rng.categorical(target.row(p)));
    }

    auto train = [&](std::size_t steps, ScoreLoss loss) {
        Rng rng(26);
        auto params = DenoiserParams::init(cfg, rng);
        auto opt = OptimizerState::for_params(params);
        SmTrainConfig tc;
        tc.loss = loss;
        std::vector<double> losses;
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<TokenSequence> batch(64);
            for (auto& b : batch) b = data[rng.below(data.size())];
            losses.push_back(sm_train_step(params, opt, batch, rng, tc));
        }
        return std::make_pair(params, losses);
    };
    const auto [p1, l1] = train(500, ScoreLoss::kSoftmax);
    double head = 0, tail = 0;
    for (int i = 0; i < 25; ++i) {
        head += l1[i];
        tail += l1[l1.size() - 1 - i];
    }
    CHECK(tail < head);
    const auto [p2, l2] = train(20, ScoreLoss::kSoftmax);
    const auto [p3, l3] = train(20, ScoreLoss::kSoftmax);
    CHECK(p2.same_values(p3));
    CHECK(l2 == l3);
    const auto [p4, l4] = train(20, ScoreLoss::kRaw);
    CHECK(p4.all_finite());

    Rng rng(1);
    auto params = DenoiserParams::init(cfg, rng);
    auto opt = OptimizerState::for_params(params);
    CHECK_THROWS_AS(sm_train_step(params, opt, {}, rng, SmTrainConfig{}), UsageError);
}

TEST_CASE("score ascent sampler") {
    DenoiserConfig cfg;
    cfg.length = 2;
    cfg.vocab = 5;
    cfg.hidden = 16;
    cfg.depth = 1;
    Rng rng(27);
    const auto zero = DenoiserParams::init(cfg, rng);
    SmSamplerConfig sc;
    const auto res = sm_sample(zero, 3, sc, TemperatureSchedule{}, rng);
    // -tau + tau * V * (1 / V) is zero up to rounding
    for (const auto& x : res.final_states) {
        for (double v : x.flat()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
    }
    CHECK(res.trace.size() == 100);

    const auto net = DenoiserParams::init(cfg, rng, false);
    sm_sample(net, 4, sc, TemperatureSchedule{}, rng,
              [](std::size_t, double, std::vector<SequenceState>& xs) {
                  for (const auto& x : xs) CHECK(x.valid(1e-9));
              });
    sc.eta = 0.0;
    CHECK_THROWS_AS(sm_sample(net, 1, sc, TemperatureSchedule{}, rng), ConfigError);
}
