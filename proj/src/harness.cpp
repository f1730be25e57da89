#include "sflow/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "sflow/errors.hpp"

namespace sflow {

using nlohmann::json;

void ToySpec::validate() const {
    if (K < 2) throw ConfigError("toy K must be >= 2");
    if (L < 1) throw ConfigError("toy L must be >= 1");
    if (n_train < 1) throw ConfigError("toy n_train must be >= 1");
}

SequenceState gen_toy_target(const ToySpec& spec, Rng& rng) {
    spec.validate();
    SequenceState target(spec.L, spec.K);
    for (std::size_t p = 0; p < spec.L; ++p) sample_uniform_simplex(rng, target.row(p));
    return target;
}

std::vector<TokenSequence> sample_dataset(const SequenceState& target, std::size_t n, Rng& rng) {
    if (n == 0) throw UsageError("sample_dataset: n must be >= 1");
    std::vector<TokenSequence> out(n, TokenSequence(target.length()));
    for (auto& seq : out) {
        for (std::size_t p = 0; p < target.length(); ++p) {
            seq[p] = static_cast<std::uint32_t>(rng.categorical(target.row(p)));
        }
    }
    return out;
}

std::vector<double> per_position_kl(std::span<const TokenSequence> samples,
                                    const SequenceState& target, double alpha_scale) {
    if (samples.empty()) throw UsageError("empirical_kl: no samples");
    const std::size_t L = target.length();
    const std::size_t K = target.vocab();
    const double n = static_cast<double>(samples.size());
    const double alpha = alpha_scale * n;
    std::vector<double> out(L, 0.0);
    std::vector<double> counts(K);
    for (std::size_t p = 0; p < L; ++p) {
        std::fill(counts.begin(), counts.end(), 0.0);
        for (const auto& seq : samples) {
            if (seq.size() != L || seq[p] >= K) throw ConfigError("sample does not fit the target");
            counts[seq[p]] += 1.0;
        }
        const double denom = n + alpha * static_cast<double>(K);
        const auto tp = target.row(p);
        for (std::size_t i = 0; i < K; ++i) {
            const double q = (counts[i] + alpha) / denom;
            if (q > 0.0) out[p] += q * std::log(q / tp[i]);
        }
    }
    return out;
}

double empirical_kl(std::span<const TokenSequence> samples, const SequenceState& target,
                    double alpha_scale) {
    double total = 0.0;
    for (double v : per_position_kl(samples, target, alpha_scale)) total += v;
    return total;
}

// ---- config --------------------------------------------------------------

namespace {

const char* matcher_name(Matcher m) {
    switch (m) {
        case Matcher::kGumbelFm: return "gumbel_fm";
        case Matcher::kScore: return "score";
        case Matcher::kLinearFm: return "linear_fm";
    }
    return "?";
}

const char* encoding_name(InputEncoding e) {
    return e == InputEncoding::kProbabilities ? "probabilities" : "centered_log";
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& item : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || item.key() == a;
        if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
}

void read(const json& obj, const char* key, std::size_t& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(std::string(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
}

void read(const json& obj, const char* key, std::uint64_t& out, int) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(std::string(key) + " must be a non-negative integer");
    out = v.get<std::uint64_t>();
}

void read(const json& obj, const char* key, double& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_number()) throw ConfigError(std::string(key) + " must be a number");
    out = v.get<double>();
}

void read(const json& obj, const char* key, bool& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_boolean()) throw ConfigError(std::string(key) + " must be a boolean");
    out = v.get<bool>();
}

void read(const json& obj, const char* key, std::string& out) {
    if (!obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_string()) throw ConfigError(std::string(key) + " must be a string");
    out = v.get<std::string>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(root, {"matcher", "seed", "output_dir", "toy", "schedule", "noise", "model",
                      "training", "sampling", "guidance"},
               "config");
    ExperimentConfig c;
    std::string matcher = matcher_name(c.matcher);
    read(root, "matcher", matcher);
    if (matcher == "gumbel_fm") c.matcher = Matcher::kGumbelFm;
    else if (matcher == "score") c.matcher = Matcher::kScore;
    else if (matcher == "linear_fm") c.matcher = Matcher::kLinearFm;
    else throw ConfigError("unknown matcher '" + matcher + "'");
    read(root, "seed", c.seed, 0);
    read(root, "output_dir", c.output_dir);

    if (root.contains("toy")) {
        const auto& o = root.at("toy");
        check_keys(o, {"K", "L", "n_train"}, "toy");
        read(o, "K", c.toy.K);
        read(o, "L", c.toy.L);
        read(o, "n_train", c.toy.n_train);
    }
    if (root.contains("schedule")) {
        const auto& o = root.at("schedule");
        check_keys(o, {"tau_max", "lambda"}, "schedule");
        read(o, "tau_max", c.schedule.tau_max);
        read(o, "lambda", c.schedule.lambda);
    }
    if (root.contains("noise")) {
        const auto& o = root.at("noise");
        check_keys(o, {"beta", "epsilon", "noise_free"}, "noise");
        read(o, "beta", c.noise.beta);
        read(o, "epsilon", c.noise.epsilon);
        read(o, "noise_free", c.noise.noise_free);
    }
    if (root.contains("model")) {
        const auto& o = root.at("model");
        check_keys(o, {"hidden", "depth", "n_freq", "encoding"}, "model");
        read(o, "hidden", c.model.hidden);
        read(o, "depth", c.model.depth);
        read(o, "n_freq", c.model.n_freq);
        std::string enc = encoding_name(c.model.encoding);
        read(o, "encoding", enc);
        if (enc == "probabilities") c.model.encoding = InputEncoding::kProbabilities;
        else if (enc == "centered_log") c.model.encoding = InputEncoding::kCenteredLog;
        else throw ConfigError("unknown encoding '" + enc + "'");
    }
    if (root.contains("training")) {
        const auto& o = root.at("training");
        check_keys(o, {"steps", "batch_size", "learning_rate", "loss", "log_every"}, "training");
        read(o, "steps", c.training.steps);
        read(o, "batch_size", c.training.batch_size);
        read(o, "learning_rate", c.training.learning_rate);
        read(o, "loss", c.training.loss);
        read(o, "log_every", c.training.log_every);
    }
    if (root.contains("sampling")) {
        const auto& o = root.at("sampling");
        check_keys(o, {"n_steps", "eta", "start", "n_generate", "chunk"}, "sampling");
        read(o, "n_steps", c.sampling.n_steps);
        read(o, "eta", c.sampling.eta);
        read(o, "start", c.sampling.start);
        read(o, "n_generate", c.sampling.n_generate);
        read(o, "chunk", c.sampling.chunk);
    }
    if (root.contains("guidance") && !root.at("guidance").is_null()) {
        const auto& o = root.at("guidance");
        check_keys(o, {"gamma", "candidates", "top_k", "classifier_seed"}, "guidance");
        GuidanceSettings g;
        read(o, "gamma", g.gamma);
        read(o, "candidates", g.candidates);
        read(o, "top_k", g.top_k);
        read(o, "classifier_seed", g.classifier_seed, 0);
        c.guidance = g;
    }
    // resolve matcher-dependent defaults so the canonical form is explicit
    if (c.training.loss.empty()) c.training.loss = c.matcher == Matcher::kScore ? "softmax" : "nll";
    if (c.sampling.start.empty()) {
        c.sampling.start = c.matcher == Matcher::kScore ? "centroid" : "uniform_simplex";
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["matcher"] = matcher_name(matcher);
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    j["toy"] = {{"K", toy.K}, {"L", toy.L}, {"n_train", toy.n_train}};
    j["schedule"] = {{"tau_max", schedule.tau_max}, {"lambda", schedule.lambda}};
    j["noise"] = {{"beta", noise.beta}, {"epsilon", noise.epsilon}, {"noise_free", noise.noise_free}};
    j["model"] = {{"hidden", model.hidden},
                  {"depth", model.depth},
                  {"n_freq", model.n_freq},
                  {"encoding", encoding_name(model.encoding)}};
    j["training"] = {{"steps", training.steps},
                     {"batch_size", training.batch_size},
                     {"learning_rate", training.learning_rate},
                     {"loss", training.loss},
                     {"log_every", training.log_every}};
    j["sampling"] = {{"n_steps", sampling.n_steps},
                     {"eta", sampling.eta},
                     {"start", sampling.start},
                     {"n_generate", sampling.n_generate},
                     {"chunk", sampling.chunk}};
    if (guidance) {
        j["guidance"] = {{"gamma", guidance->gamma},
                         {"candidates", guidance->candidates},
                         {"top_k", guidance->top_k},
                         {"classifier_seed", guidance->classifier_seed}};
    } else {
        j["guidance"] = nullptr;
    }
    return j.dump(2) + "\n";
}

std::string ExperimentConfig::hash() const {
    // where a run is written is not part of what it computes
    ExperimentConfig keyed = *this;
    keyed.output_dir.clear();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : keyed.to_json()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void ExperimentConfig::validate() const {
    toy.validate();
    TemperatureSchedule check(schedule.tau_max, schedule.lambda);
    (void)check;
    if (!(noise.beta > 0.0)) throw ConfigError("noise beta must be positive");
    if (!(noise.epsilon >= 0.0)) throw ConfigError("noise epsilon must be >= 0");
    DenoiserConfig m = model;
    m.length = toy.L;
    m.vocab = toy.K;
    m.validate();
    if (training.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(training.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (training.log_every == 0) throw ConfigError("log_every must be >= 1");
    fm_loss();
    score_loss();
    start_state();
    if (sampling.n_steps == 0) throw ConfigError("sampling n_steps must be >= 1");
    if (!(sampling.eta > 0.0)) throw ConfigError("sampling eta must be positive");
    if (sampling.n_generate == 0) throw ConfigError("n_generate must be >= 1");
    if (sampling.chunk == 0) throw ConfigError("chunk must be >= 1");
    if (guidance) {
        if (matcher == Matcher::kScore) throw ConfigError("guidance needs a flow matcher");
        GuidanceConfig g{guidance->gamma, guidance->candidates, guidance->top_k, nullptr};
        if (!(g.gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
        if (g.candidates == 0) throw ConfigError("guidance candidates must be >= 1");
        if (g.effective_top_k(toy.K) > toy.K) throw ConfigError("top_k must lie in [1, K]");
    }
}

FmLoss ExperimentConfig::fm_loss() const {
    if (matcher == Matcher::kScore) return FmLoss::kNll;
    if (training.loss == "nll" || training.loss.empty()) return FmLoss::kNll;
    if (training.loss == "mse") return FmLoss::kMse;
    throw ConfigError("flow loss must be nll or mse, got '" + training.loss + "'");
}

ScoreLoss ExperimentConfig::score_loss() const {
    if (matcher != Matcher::kScore) return ScoreLoss::kSoftmax;
    if (training.loss == "softmax" || training.loss.empty()) return ScoreLoss::kSoftmax;
    if (training.loss == "raw") return ScoreLoss::kRaw;
    throw ConfigError("score loss must be softmax or raw, got '" + training.loss + "'");
}

StartState ExperimentConfig::start_state() const {
    if (sampling.start == "centroid") return StartState::kCentroid;
    if (sampling.start == "uniform_simplex") return StartState::kUniformSimplex;
    if (sampling.start.empty()) {
        return matcher == Matcher::kScore ? StartState::kCentroid : StartState::kUniformSimplex;
    }
    throw ConfigError("start must be uniform_simplex or centroid, got '" + sampling.start + "'");
}

ModelKind ExperimentConfig::model_kind() const {
    const bool mse = fm_loss() == FmLoss::kMse;
    switch (matcher) {
        case Matcher::kGumbelFm: return mse ? ModelKind::kFmVelocity : ModelKind::kFmDenoise;
        case Matcher::kLinearFm: return mse ? ModelKind::kLinearVelocity : ModelKind::kLinearDenoise;
        case Matcher::kScore: return ModelKind::kScore;
    }
    return ModelKind::kFmDenoise;
}

std::string ToyReport::to_json(const ExperimentConfig& config) const {
    json j;
    j["final_kl"] = final_kl;
    j["position_kl"] = position_kl;
    j["kl_estimator"] = "factorized";
    j["config_hash"] = config_hash;
    j["git_rev"] = git_revision();
    j["seed"] = seed;
    j["matcher"] = matcher_name(config.matcher);
    j["K"] = config.toy.K;
    j["L"] = config.toy.L;
    j["training_steps"] = config.training.steps;
    j["n_generated"] = config.sampling.n_generate;
    j["final_loss"] = losses.empty() ? 0.0 : losses.back().loss;
    if (mean_classifier_score) j["mean_classifier_score"] = *mean_classifier_score;
    return j.dump(2) + "\n";
}

const char* git_revision() {
#ifdef SFLOW_GIT_REV
    return SFLOW_GIT_REV;
#else
    return "unknown";
#endif
}

std::size_t worker_count() {
    const char* env = std::getenv("SFLOW_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || v == 0) return 1;
    return static_cast<std::size_t>(v);
}

// ---- pipeline ------------------------------------------------------------

namespace {

DenoiserConfig network_config(const ExperimentConfig& config) {
    DenoiserConfig m = config.model;
    m.length = config.toy.L;
    m.vocab = config.toy.K;
    return m;
}

// fixed stream ids off the master seed
constexpr std::uint64_t kTargetStream = 1;
constexpr std::uint64_t kDataStream = 2;
constexpr std::uint64_t kInitStream = 3;
constexpr std::uint64_t kTrainStream = 4;
constexpr std::uint64_t kGenerateStream = 5;

template <class F>
auto in_phase(const char* phase, F&& f) {
    try {
        return f();
    } catch (const PhaseError&) {
        throw;
    } catch (const std::exception& e) {
        throw PhaseError(phase, e.what());
    }
}

}  // namespace

DenoiserParams train_model(const ExperimentConfig& config, std::span<const TokenSequence> dataset,
                           Rng& rng, std::vector<LossRecord>* losses) {
    if (dataset.empty()) throw UsageError("train_model: empty dataset");
    Rng init_rng = rng.split(kInitStream);
    Rng train_rng = rng.split(kTrainStream);
    DenoiserParams params = DenoiserParams::init(network_config(config), init_rng);
    AdamConfig adam;
    adam.learning_rate = config.training.learning_rate;
    OptimizerState opt = OptimizerState::for_params(params, adam);

    FmTrainConfig fm;
    fm.schedule = config.schedule;
    fm.noise = config.noise;
    fm.loss = config.fm_loss();
    fm.path = config.matcher == Matcher::kLinearFm ? ProbabilityPath::kLinear
                                                   : ProbabilityPath::kGumbelSoftmax;
    SmTrainConfig sm;
    sm.schedule = config.schedule;
    sm.noise = config.noise;
    sm.loss = config.score_loss();

    const auto start = std::chrono::steady_clock::now();
    std::vector<TokenSequence> batch(config.training.batch_size);
    for (std::size_t step = 0; step < config.training.steps; ++step) {
        for (auto& seq : batch) seq = dataset[train_rng.below(dataset.size())];
        const double loss = config.matcher == Matcher::kScore
                                ? sm_train_step(params, opt, batch, train_rng, sm)
                                : fm_train_step(params, opt, batch, train_rng, fm);
        if (!std::isfinite(loss)) throw NumericalError("non-finite training loss", static_cast<long>(step));
        const bool last = step + 1 == config.training.steps;
        if (losses != nullptr && (step % config.training.log_every == 0 || last)) {
            const std::chrono::duration<double, std::milli> el = std::chrono::steady_clock::now() - start;
            losses->push_back({step, loss, el.count()});
        }
    }
    return params;
}

std::vector<TokenSequence> generate(const DenoiserParams& params, ModelKind kind,
                                    const ExperimentConfig& config, std::size_t n, const Rng& rng,
                                    const SequenceClassifier* classifier) {
    const std::size_t chunk = config.sampling.chunk;
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    std::vector<std::vector<TokenSequence>> parts(n_chunks);
    std::vector<std::exception_ptr> errors(n_chunks);

    SamplerConfig fm;
    fm.n_steps = config.sampling.n_steps;
    fm.start = config.start_state();
    fm.mode = (kind == ModelKind::kFmVelocity || kind == ModelKind::kLinearVelocity)
                  ? SamplerMode::kVelocity
                  : SamplerMode::kDenoise;
    fm.path = (kind == ModelKind::kLinearDenoise || kind == ModelKind::kLinearVelocity)
                  ? ProbabilityPath::kLinear
                  : ProbabilityPath::kGumbelSoftmax;
    SmSamplerConfig sm;
    sm.eta = config.sampling.eta;
    sm.n_steps = config.sampling.n_steps;
    sm.start = config.start_state();
    GuidanceConfig guide;
    if (classifier != nullptr) {
        if (!config.guidance) throw ConfigError("classifier given without guidance settings");
        guide = {config.guidance->gamma, config.guidance->candidates, config.guidance->top_k,
                 classifier};
    }

    auto run_chunk = [&](std::size_t c) {
        const std::size_t count = std::min(chunk, n - c * chunk);
        Rng r = rng.split(c);
        if (kind == ModelKind::kScore) {
            parts[c] = sm_sample(params, count, sm, config.schedule, r).sequences;
        } else if (classifier != nullptr) {
            parts[c] = stgflow_sample(params, count, guide, fm, config.schedule, r).sample.sequences;
        } else {
            parts[c] = fm_sample(params, count, fm, config.schedule, r).sequences;
        }
    };

    const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(n_chunks, 1));
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t c = next++; c < n_chunks; c = next++) {
            try {
                run_chunk(c);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    std::vector<TokenSequence> out;
    out.reserve(n);
    for (auto& part : parts) {
        for (auto& seq : part) out.push_back(std::move(seq));
    }
    return out;
}

ToyReport run_toy_experiment(const ExperimentConfig& config) {
    config.validate();
    const Rng master(config.seed);
    const auto start = std::chrono::steady_clock::now();

    ToySpec spec = config.toy;
    spec.seed = config.seed;
    Rng target_rng = master.split(kTargetStream);
    Rng data_rng = master.split(kDataStream);
    const SequenceState target = gen_toy_target(spec, target_rng);
    const auto dataset = in_phase("data", [&] { return sample_dataset(target, spec.n_train, data_rng); });

    ToyReport report;
    report.seed = config.seed;
    report.config_hash = config.hash();
    Rng train_rng = master;
    const DenoiserParams params =
        in_phase("train", [&] { return train_model(config, dataset, train_rng, &report.losses); });

    std::optional<ToyLinearClassifier> clf;
    if (config.guidance) {
        Rng crng(config.guidance->classifier_seed);
        clf = ToyLinearClassifier::random(spec.L, spec.K, crng);
    }
    const auto samples = in_phase("sample", [&] {
        return generate(params, config.model_kind(), config, config.sampling.n_generate,
                        master.split(kGenerateStream), clf ? &*clf : nullptr);
    });
    report.position_kl = per_position_kl(samples, target);
    report.final_kl = 0.0;
    for (double v : report.position_kl) report.final_kl += v;
    if (clf) {
        double s = 0.0;
        for (const auto& seq : samples) s += clf->score(seq);
        report.mean_classifier_score = s / static_cast<double>(samples.size());
    }
    const std::chrono::duration<double, std::milli> el = std::chrono::steady_clock::now() - start;
    report.wall_ms = el.count();

    in_phase("write", [&] {
        namespace fs = std::filesystem;
        const fs::path dir(config.output_dir);
        fs::create_directories(dir);
        {
            std::ofstream m(dir / "metrics.csv");
            m << "step,loss,wall_ms\n";
            m.precision(17);
            for (const auto& r : report.losses) m << r.step << ',' << r.loss << ',' << r.wall_ms << '\n';
            if (!m) throw std::runtime_error("failed writing metrics.csv");
        }
        {
            std::ofstream r(dir / "report.json");
            r << report.to_json(config);
            if (!r) throw std::runtime_error("failed writing report.json");
        }
        {
            std::ofstream c(dir / "config.json");
            c << config.to_json();
        }
        CheckpointMeta meta;
        meta.kind = static_cast<std::uint32_t>(config.model_kind());
        meta.tau_max = config.schedule.tau_max;
        meta.lambda = config.schedule.lambda;
        save_checkpoint((dir / "model.ckpt").string(), params, meta);
        return 0;
    });
    return report;
}

}  // namespace sflow
