// Acceptance gate. Prints one PASS/FAIL line per criterion; exit status is
// nonzero if any selected criterion fails.
//
//   acceptance [--only NAME]... [--list] [--work-dir DIR] [--sflow PATH]
//
// --sflow defaults to ../tools/sflow next to this binary.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sflow/harness.hpp"

using namespace sflow;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kFdTol = 1e-4;
constexpr double kVelocityTangencyTol = 1e-9;
constexpr double kScoreTangencyTol = 1e-7;
constexpr double kRelationTol = 1e-3;
constexpr double kGradCheckTol = 1e-4;
constexpr double kFdBudgetSec = 10.0;
constexpr double kToyK20Kl = 0.1;
constexpr double kToyK20BudgetSec = 15 * 60.0;
constexpr double kToyK8Kl = 0.15;
constexpr double kToyK8BudgetSec = 120.0;
constexpr double kScoreKl = 0.15;
constexpr double kGuidanceGainFraction = 0.2;
constexpr std::size_t kGuidanceSamples = 50;

struct Outcome {
    bool pass;
    std::string detail;
};

struct Criterion {
    std::string name;
    std::function<Outcome()> run;
};

struct Options {
    fs::path work_dir = "acceptance_runs";
    std::string sflow;
};

Options g_opts;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::vector<double> random_point(Rng& rng, std::size_t V, double floor = 0.0) {
    std::vector<double> x(V);
    sample_uniform_simplex(rng, x);
    if (floor > 0.0) {
        for (double& v : x) v += floor;
        const double s = oracle::sum(x);
        for (double& v : x) v /= s;
    }
    return x;
}

Outcome fd_velocity() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    const TemperatureSchedule sched{10.0, 3.0};
    const double h = 1e-6;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t V = 2 + rng.below(30);
        const std::size_t k = rng.below(V);
        const auto g = sample_gumbel(rng, V, NoiseConfig{});
        const double t = 2 * h + (1 - 4 * h) * rng.uniform();
        const auto up = oracle::gs_point(k, g, oracle::temperature(t + h));
        const auto dn = oracle::gs_point(k, g, oracle::temperature(t - h));
        std::vector<double> fd(V);
        for (std::size_t i = 0; i < V; ++i) fd[i] = (up[i] - dn[i]) / (2 * h);
        const auto x = gs_interpolant(OneHotToken(k, V), g, sched.at(t)).probs;
        worst = std::max(worst, oracle::rel_err(conditional_velocity_train(x, OneHotToken(k, V), g, sched, t), fd));
    }
    const double sec = seconds_since(t0);
    return {worst <= kFdTol && sec < kFdBudgetSec,
            "max rel err " + fmt(worst) + ", " + fmt(sec) + " s"};
}

Outcome fd_score() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(102);
    double worst = 0.0;
    double flipped_best = INFINITY;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t V = 2 + rng.below(20);
        const OneHotToken tok(rng.below(V), V);
        const double tau = 0.3 + 9.7 * rng.uniform();
        std::vector<double> lx = random_point(rng, V, 1e-3);
        for (double& v : lx) v = std::log(v);
        const auto fd = oracle::fd_grad(
            [&](const std::vector<double>& y) { return expconcrete_log_density(LogSimplexPoint{y}, tok, tau); },
            lx, 1e-6);
        auto s = conditional_score(LogSimplexPoint{lx}, tok, tau);
        worst = std::max(worst, oracle::rel_err(s, fd));
        for (double& v : s) v = -v;
        flipped_best = std::min(flipped_best, oracle::rel_err(s, fd));
    }
    const double sec = seconds_since(t0);
    // the opposite sign convention must be clearly rejected on every draw
    const bool sign_resolved = flipped_best > 1.0;
    return {worst <= kFdTol && sign_resolved && sec < kFdBudgetSec,
            "max rel err " + fmt(worst) + ", opposite sign min err " + fmt(flipped_best) + ", " +
                fmt(sec) + " s"};
}

Outcome tangency() {
    Rng rng(103);
    const TemperatureSchedule sched;
    double vel = 0.0, st = 0.0, score = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t V = 2 + rng.below(40);
        const OneHotToken tok(rng.below(V), V);
        const auto x = random_point(rng, V);
        const auto p = random_point(rng, V);
        const auto g = sample_gumbel(rng, V, NoiseConfig{});
        const double t = rng.uniform();
        vel = std::max(vel, std::abs(oracle::sum(conditional_velocity_train(x, tok, g, sched, t))));
        vel = std::max(vel, std::abs(oracle::sum(conditional_velocity_inference(x, tok, sched, t))));
        vel = std::max(vel, std::abs(oracle::sum(marginal_velocity(x, p, sched, t))));
        st = std::max(st, std::abs(oracle::sum(straight_through_grad(x, tok.index, 4 * rng.uniform() - 2))));
        auto lx = random_point(rng, V, 1e-6);
        for (double& v : lx) v = std::log(v);
        score = std::max(score, std::abs(oracle::sum(conditional_score(LogSimplexPoint{lx}, tok, sched.at(t)))));
        std::vector<double> raw(V);
        for (double& v : raw) v = 6 * rng.uniform() - 3;
        score = std::max(score, std::abs(oracle::sum(score_parameterize(raw, sched.at(t), V).row(0))));
    }
    return {vel <= kVelocityTangencyTol && st <= kVelocityTangencyTol && score <= kScoreTangencyTol,
            "velocity " + fmt(vel) + ", straight-through " + fmt(st) + ", score " + fmt(score)};
}

Outcome concrete_relation() {
    Rng rng(104);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t V = 2 + rng.below(10);
        const OneHotToken tok(rng.below(V), V);
        const double tau = 0.3 + 9.7 * rng.uniform();
        const auto x = random_point(rng, V, 0.02);
        std::vector<double> lx(V);
        for (std::size_t i = 0; i < V; ++i) lx[i] = std::log(x[i]);
        const auto fd_gs = oracle::fd_grad(
            [&](const std::vector<double>& y) { return gs_log_density(SimplexPoint{y}, tok, tau); }, x, 1e-7);
        const auto fd_ec = oracle::fd_grad(
            [&](const std::vector<double>& y) { return expconcrete_log_density(LogSimplexPoint{y}, tok, tau); },
            lx, 1e-6);
        std::vector<double> mapped(V);
        for (std::size_t j = 0; j < V; ++j) mapped[j] = fd_ec[j] / x[j] - 1.0 / x[j];
        worst = std::max(worst, oracle::rel_err(fd_gs, mapped));
    }
    return {worst <= kRelationTol, "max rel err " + fmt(worst) + " over 200 points"};
}

Outcome grad_checks() {
    Rng rng(105);
    double worst = 0.0;
    double weakest_detection = INFINITY;
    for (auto enc : {InputEncoding::kProbabilities, InputEncoding::kCenteredLog}) {
        DenoiserConfig cfg;
        cfg.length = 4;
        cfg.vocab = 8;
        cfg.hidden = 32;
        cfg.depth = 3;
        cfg.n_freq = 6;
        cfg.encoding = enc;
        const auto params = DenoiserParams::init(cfg, rng, false);
        SequenceState probe(cfg.length, cfg.vocab);
        for (std::size_t p = 0; p < cfg.length; ++p) sample_uniform_simplex(rng, probe.row(p));
        const double t = rng.uniform();
        const auto rep = grad_check(params, probe, t);
        for (double e : rep.per_layer) worst = std::max(worst, e);
        worst = std::max(worst, rep.input_rel_error);
        for (std::size_t l = 0; l < params.layers.size(); ++l) {
            const auto bad = grad_check(params, probe, t, 7, 24, [l](ParamGrads& g) {
                g.layers[l].weight *= 2.0;
                g.layers[l].bias *= 2.0;
            });
            weakest_detection = std::min(weakest_detection, bad.per_layer[l]);
        }
    }
    // doubling the gradient gives a relative error of 1/2 on the touched layer
    const bool detected = weakest_detection > 0.1;
    return {worst <= kGradCheckTol && detected,
            "max layer err " + fmt(worst) + ", weakest 2x detection " + fmt(weakest_detection)};
}

ExperimentConfig toy_config(std::size_t K, std::size_t steps, std::uint64_t seed, const std::string& dir) {
    ExperimentConfig c;
    c.toy.K = K;
    c.toy.L = 4;
    c.toy.seed = seed;
    c.seed = seed;
    c.schedule = TemperatureSchedule{10.0, 3.0};
    c.noise.beta = 2.0;
    c.training.steps = steps;
    c.sampling.n_steps = 100;
    c.sampling.n_generate = 10000;
    c.output_dir = (g_opts.work_dir / dir).string();
    return c;
}

ExperimentConfig k8_flow_config() { return toy_config(8, 10000, 0, "toy_k8"); }

Outcome toy_k20() {
    const auto cfg = toy_config(20, 20000, 0, "toy_k20");
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = run_toy_experiment(cfg);
    const double sec = seconds_since(t0);
    return {rep.final_kl <= kToyK20Kl && sec <= kToyK20BudgetSec,
            "KL " + fmt(rep.final_kl) + " (need <= " + fmt(kToyK20Kl) + "), " + fmt(sec) + " s"};
}

Outcome toy_k8() {
    const auto cfg = k8_flow_config();
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = run_toy_experiment(cfg);
    const double sec = seconds_since(t0);
    return {rep.final_kl <= kToyK8Kl && sec <= kToyK8BudgetSec,
            "KL " + fmt(rep.final_kl) + " (need <= " + fmt(kToyK8Kl) + "), " + fmt(sec) + " s"};
}

Outcome score_k8() {
    auto cfg = toy_config(8, 10000, 0, "score_k8");
    cfg.matcher = Matcher::kScore;
    cfg.sampling.eta = 0.5;
    const auto rep = run_toy_experiment(cfg);
    const double worst = *std::max_element(rep.position_kl.begin(), rep.position_kl.end());
    std::string per;
    for (double v : rep.position_kl) per += (per.empty() ? "" : " ") + fmt(v);
    return {worst <= kScoreKl, "per-position KL [" + per + "] (need each <= " + fmt(kScoreKl) + ")"};
}

// Reuses the K=8 checkpoint written by toy.k8 when its config hash matches.
DenoiserParams k8_flow_model() {
    const auto cfg = k8_flow_config();
    const fs::path dir = cfg.output_dir;
    std::ifstream rep(dir / "report.json");
    if (rep) {
        const auto j = nlohmann::json::parse(rep, nullptr, false);
        if (!j.is_discarded() && j.value("config_hash", "") == cfg.hash() && fs::exists(dir / "model.ckpt")) {
            return load_checkpoint((dir / "model.ckpt").string());
        }
    }
    run_toy_experiment(cfg);
    return load_checkpoint((dir / "model.ckpt").string());
}

double mean_score(const std::vector<TokenSequence>& seqs, const SequenceClassifier& clf) {
    double s = 0.0;
    for (const auto& q : seqs) s += clf.score(q);
    return s / static_cast<double>(seqs.size());
}

Outcome stgflow_efficacy() {
    const auto params = k8_flow_model();
    Rng crng(1);
    const auto clf = ToyLinearClassifier::random(params.config.length, params.config.vocab, crng);
    const double range = clf.max_score() - clf.min_score();
    SamplerConfig sc;
    sc.n_steps = 100;
    const TemperatureSchedule sched{10.0, 3.0};

    GuidanceConfig g;
    g.classifier = &clf;
    Rng a(42), b(42), c(42);
    const auto guided = stgflow_sample(params, kGuidanceSamples, g, sc, sched, a);
    const auto plain = fm_sample(params, kGuidanceSamples, sc, sched, b);
    g.gamma = 0.0;
    const auto zero = stgflow_sample(params, kGuidanceSamples, g, sc, sched, c);

    const double gain = mean_score(guided.sample.sequences, clf) - mean_score(plain.sequences, clf);
    const double first = guided.guidance.front().mean_score;
    const double last = guided.guidance.back().mean_score;
    const bool identical = zero.sample.sequences == plain.sequences &&
                           zero.sample.final_states == plain.final_states;
    const bool ok = gain >= kGuidanceGainFraction * range && last > first && identical;
    return {ok, "gain " + fmt(gain) + " = " + fmt(gain / range) + " of range " + fmt(range) +
                    ", trace " + fmt(first) + " -> " + fmt(last) +
                    (identical ? ", gamma=0 identical" : ", gamma=0 DIFFERS")};
}

Outcome boundary() {
    const TemperatureSchedule sched{10.0, 3.0};
    const double bound = std::exp(1.0 / sched.tau_max);
    double worst_ratio = 0.0;
    std::size_t wrong = 0;
    for (std::size_t V : {2u, 8u, 20u, 512u}) {
        const std::vector<double> zero(V, 0.0);
        for (std::size_t k = 0; k < V; ++k) {
            const OneHotToken tok(k, V);
            const auto x0 = gs_interpolant(tok, zero, sched.at(0.0)).probs;
            const auto [lo, hi] = std::minmax_element(x0.begin(), x0.end());
            worst_ratio = std::max(worst_ratio, *hi / *lo);
            const auto x1 = gs_interpolant(tok, zero, sched.at(1.0)).probs;
            if (static_cast<std::size_t>(std::max_element(x1.begin(), x1.end()) - x1.begin()) != k) ++wrong;
        }
    }
    return {worst_ratio <= bound * (1 + 1e-12) && wrong == 0,
            "max/min at t=0 " + fmt(worst_ratio) + " (bound " + fmt(bound) + "), wrong argmax at t=1: " +
                std::to_string(wrong)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism() {
    if (g_opts.sflow.empty()) return {false, "no sflow binary given (--sflow)"};
    const fs::path dir = g_opts.work_dir / "determinism";
    fs::create_directories(dir);
    auto cfg = toy_config(8, 600, 3, "determinism/unused");
    cfg.sampling.n_generate = 2000;
    {
        std::ofstream out(dir / "config.json");
        out << cfg.to_json();
    }
    std::string reports[2];
    for (int run = 0; run < 2; ++run) {
        const fs::path out = dir / ("run" + std::to_string(run));
        fs::remove_all(out);
        const std::string cmd = "\"" + g_opts.sflow + "\" toy-kl --config \"" + (dir / "config.json").string() +
                                "\" --out \"" + out.string() + "\" > /dev/null";
        if (std::system(cmd.c_str()) != 0) return {false, "toy-kl run " + std::to_string(run) + " failed"};
        reports[run] = slurp(out / "report.json");
    }
    const bool same = !reports[0].empty() && reports[0] == reports[1];
    return {same, same ? std::to_string(reports[0].size()) + " byte reports identical" : "reports differ"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance gate"};
    std::vector<std::string> only;
    bool list = false;
    std::string work_dir = g_opts.work_dir.string();
    app.add_option("--only", only, "run only these criteria");
    app.add_flag("--list", list, "print criterion names");
    app.add_option("--work-dir", work_dir, "scratch directory for training runs");
    app.add_option("--sflow", g_opts.sflow, "path to the sflow CLI (for the determinism check)");
    CLI11_PARSE(app, argc, argv);
    g_opts.work_dir = work_dir;
    if (g_opts.sflow.empty()) {
        const auto sibling = fs::path(argv[0]).parent_path() / ".." / "tools" / "sflow";
        if (fs::exists(sibling)) g_opts.sflow = sibling.string();
    }

    const std::vector<Criterion> criteria{
        {"fd.velocity", fd_velocity},
        {"fd.score", fd_score},
        {"fd.tangency", tangency},
        {"fd.concrete_relation", concrete_relation},
        {"fd.grad_check", grad_checks},
        {"toy.k20", toy_k20},
        {"toy.k8", toy_k8},
        {"score.k8", score_k8},
        {"stgflow.efficacy", stgflow_efficacy},
        {"boundary", boundary},
        {"determinism", determinism},
    };

    if (list) {
        for (const auto& c : criteria) std::cout << c.name << "\n";
        return 0;
    }
    for (const auto& name : only) {
        if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == name; })) {
            std::cerr << "unknown criterion: " << name << "\n";
            return 2;
        }
    }

    fs::create_directories(g_opts.work_dir);
    bool all = true;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << "  " << o.detail << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
