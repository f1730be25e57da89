#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "sflow/errors.hpp"
#include "sflow/harness.hpp"

namespace sflow {

namespace {

void print_sequences(std::ostream& out, std::span<const TokenSequence> seqs) {
    for (const auto& s : seqs) {
        for (std::size_t p = 0; p < s.size(); ++p) out << (p ? " " : "") << s[p];
        out << '\n';
    }
}

ModelKind checked_kind(std::uint32_t raw) {
    if (raw < 1 || raw > 5) throw ConfigError("checkpoint has unknown model kind " + std::to_string(raw));
    return static_cast<ModelKind>(raw);
}

// Train only and leave the checkpoint plus loss curve in the output directory.
int train_only(ExperimentConfig config, bool score) {
    if (score) {
        config.matcher = Matcher::kScore;
        if (config.training.loss == "nll") config.training.loss = "softmax";
    } else if (config.matcher == Matcher::kScore) {
        config.matcher = Matcher::kGumbelFm;
        if (config.training.loss == "softmax") config.training.loss = "nll";
    }
    config.validate();
    const Rng master(config.seed);
    Rng target_rng = master.split(1);
    Rng data_rng = master.split(2);
    const auto target = gen_toy_target(config.toy, target_rng);
    const auto data = sample_dataset(target, config.toy.n_train, data_rng);
    std::vector<LossRecord> losses;
    Rng train_rng = master;
    const auto params = train_model(config, data, train_rng, &losses);

    namespace fs = std::filesystem;
    const fs::path dir(config.output_dir);
    fs::create_directories(dir);
    std::ofstream m(dir / "metrics.csv");
    m << "step,loss,wall_ms\n";
    m.precision(17);
    for (const auto& r : losses) m << r.step << ',' << r.loss << ',' << r.wall_ms << '\n';
    CheckpointMeta meta;
    meta.kind = static_cast<std::uint32_t>(config.model_kind());
    meta.tau_max = config.schedule.tau_max;
    meta.lambda = config.schedule.lambda;
    save_checkpoint((dir / "model.ckpt").string(), params, meta);
    std::ofstream(dir / "config.json") << config.to_json();
    std::cout << "final loss " << (losses.empty() ? 0.0 : losses.back().loss) << "\ncheckpoint "
              << (dir / "model.ckpt").string() << '\n';
    return 0;
}

}  // namespace

int cli_dispatch(int argc, char** argv) {
    CLI::App app{"Gumbel-Softmax flow and score matching on the simplex"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;

    auto* train_fm = app.add_subcommand("train-fm", "train a flow-matching model on the toy task");
    train_fm->add_option("--config", config_path, "experiment JSON")->required()->check(CLI::ExistingFile);
    train_fm->add_option("--out", out_dir, "output directory (overrides config)");

    auto* train_sm = app.add_subcommand("train-sm", "train a score-matching model on the toy task");
    train_sm->add_option("--config", config_path, "experiment JSON")->required()->check(CLI::ExistingFile);
    train_sm->add_option("--out", out_dir, "output directory (overrides config)");

    std::string ckpt;
    std::size_t n = 10;
    std::size_t steps = 100;
    double eta = 0.5;
    std::uint64_t seed = 0;
    std::string start;
    std::string trace_path;
    auto* sample = app.add_subcommand("sample", "draw sequences from a checkpoint");
    sample->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    sample->add_option("-n", n, "number of sequences")->check(CLI::PositiveNumber);
    sample->add_option("--steps", steps, "integration steps")->check(CLI::PositiveNumber);
    sample->add_option("--eta", eta, "score ascent step size")->check(CLI::PositiveNumber);
    sample->add_option("--seed", seed);
    sample->add_option("--start", start, "uniform_simplex or centroid")
        ->check(CLI::IsMember({"uniform_simplex", "centroid"}));
    sample->add_option("--trace", trace_path, "write per-step trace CSV here");

    double gamma = 10.0;
    std::size_t candidates = 10;
    std::size_t top_k = 0;
    std::uint64_t clf_seed = 1;
    auto* guide = app.add_subcommand("guide", "guided sampling with the toy linear classifier");
    guide->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    guide->add_option("-n", n, "number of sequences")->check(CLI::PositiveNumber);
    guide->add_option("--steps", steps, "integration steps")->check(CLI::PositiveNumber);
    guide->add_option("--seed", seed);
    guide->add_option("--gamma", gamma, "guidance scale")->check(CLI::NonNegativeNumber);
    guide->add_option("--candidates", candidates, "candidates per step")->check(CLI::PositiveNumber);
    guide->add_option("--top-k", top_k, "top-k cut (0 = min(10, V))");
    guide->add_option("--classifier-seed", clf_seed);
    guide->add_option("--trace", trace_path, "write guidance trace CSV here");

    auto* toy = app.add_subcommand("toy-kl", "train, sample and report KL on the toy task");
    toy->add_option("--config", config_path, "experiment JSON")->required()->check(CLI::ExistingFile);
    toy->add_option("--out", out_dir, "output directory (overrides config)");

    auto* check = app.add_subcommand("check", "run the invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*check) return run_self_check(std::cout) ? 0 : 1;

        if (*train_fm || *train_sm || *toy) {
            ExperimentConfig config = ExperimentConfig::load(config_path);
            if (!out_dir.empty()) config.output_dir = out_dir;
            if (*toy) {
                const auto report = run_toy_experiment(config);
                std::cout << "final_kl " << report.final_kl << "\nreport "
                          << (std::filesystem::path(config.output_dir) / "report.json").string()
                          << '\n';
                return 0;
            }
            return train_only(config, static_cast<bool>(*train_sm));
        }

        CheckpointMeta meta;
        const DenoiserParams params = load_checkpoint(ckpt, &meta);
        const ModelKind kind = checked_kind(meta.kind);
        const TemperatureSchedule schedule(meta.tau_max, meta.lambda);
        Rng rng(seed);
        const bool velocity = kind == ModelKind::kFmVelocity || kind == ModelKind::kLinearVelocity;
        const bool linear = kind == ModelKind::kLinearDenoise || kind == ModelKind::kLinearVelocity;
        SamplerConfig fm;
        fm.n_steps = steps;
        fm.mode = velocity ? SamplerMode::kVelocity : SamplerMode::kDenoise;
        fm.path = linear ? ProbabilityPath::kLinear : ProbabilityPath::kGumbelSoftmax;
        if (start == "centroid") fm.start = StartState::kCentroid;

        if (*sample) {
            SampleResult res;
            if (kind == ModelKind::kScore) {
                SmSamplerConfig sm;
                sm.eta = eta;
                sm.n_steps = steps;
                if (start == "uniform_simplex") sm.start = StartState::kUniformSimplex;
                res = sm_sample(params, n, sm, schedule, rng);
            } else {
                res = fm_sample(params, n, fm, schedule, rng);
            }
            print_sequences(std::cout, res.sequences);
            if (!trace_path.empty()) {
                std::ofstream t(trace_path);
                write_trace_csv(t, res.trace);
            }
            return 0;
        }

        // guide
        if (kind == ModelKind::kScore) throw ConfigError("guidance needs a flow-matching checkpoint");
        Rng crng(clf_seed);
        const auto clf = ToyLinearClassifier::random(params.config.length, params.config.vocab, crng);
        GuidanceConfig g{gamma, candidates, top_k, &clf};
        const auto res = stgflow_sample(params, n, g, fm, schedule, rng);
        print_sequences(std::cout, res.sample.sequences);
        if (!trace_path.empty()) {
            std::ofstream t(trace_path);
            write_guidance_csv(t, res.guidance);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace sflow
