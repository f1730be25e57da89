#include "sflow/denoiser.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "sflow/errors.hpp"

namespace sflow {

namespace {

constexpr double kLogFloor = 1e-12;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::MatrixXd silu(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double x) { return x * sigmoid(x); });
}

Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double x) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
    });
}

Eigen::MatrixXd block_softmax(const Eigen::MatrixXd& logits, std::size_t length,
                              std::size_t vocab) {
    Eigen::MatrixXd probs(logits.rows(), logits.cols());
    const auto v = static_cast<Eigen::Index>(vocab);
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
        for (std::size_t p = 0; p < length; ++p) {
            const auto off = static_cast<Eigen::Index>(p) * v;
            auto in = logits.col(b).segment(off, v);
            const double m = in.maxCoeff();
            auto out = probs.col(b).segment(off, v);
            out = (in.array() - m).exp().matrix();
            out /= out.sum();
        }
    }
    return probs;
}

}  // namespace

void DenoiserConfig::validate() const {
    if (length == 0 || vocab < 2) throw ConfigError("denoiser needs L >= 1 and V >= 2");
    if (hidden == 0 || depth == 0) throw ConfigError("denoiser needs at least one hidden layer");
}

DenoiserParams DenoiserParams::init(const DenoiserConfig& config, Rng& rng, bool zero_head) {
    config.validate();
    DenoiserParams params;
    params.config = config;
    std::size_t in = config.input_dim();
    for (std::size_t l = 0; l <= config.depth; ++l) {
        const bool head = l == config.depth;
        const std::size_t out = head ? config.state_dim() : config.hidden;
        DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd(out)};
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        // Fill column-major so the draw order is independent of Eigen internals.
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
                layer.weight(r, c) = (head && zero_head) ? 0.0 : bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        for (Eigen::Index r = 0; r < layer.bias.size(); ++r) {
            layer.bias(r) = (head && zero_head) ? 0.0 : bound * (2.0 * rng.uniform() - 1.0);
        }
        params.layers.push_back(std::move(layer));
        in = out;
    }
    return params;
}

std::size_t DenoiserParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

bool DenoiserParams::all_finite() const {
    for (const auto& l : layers) {
        if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
}

bool DenoiserParams::same_values(const DenoiserParams& other) const {
    if (!(config == other.config) || layers.size() != other.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].weight != other.layers[i].weight) return false;
        if (layers[i].bias != other.layers[i].bias) return false;
    }
    return true;
}

ParamGrads ParamGrads::zeros_like(const DenoiserParams& params) {
    ParamGrads g;
    for (const auto& l : params.layers) {
        g.layers.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                            Eigen::VectorXd::Zero(l.bias.size())});
    }
    return g;
}

void ParamGrads::set_zero() {
    for (auto& l : layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
}

double ParamGrads::squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
    return s;
}

std::vector<double> time_features(double t, std::size_t n_freq) {
    std::vector<double> f(2 * n_freq);
    double w = std::numbers::pi;
    for (std::size_t j = 0; j < n_freq; ++j, w *= 2.0) {
        f[j] = std::sin(w * t);
        f[n_freq + j] = std::cos(w * t);
    }
    return f;
}

Eigen::MatrixXd encode_inputs(const DenoiserConfig& config, std::span<const SequenceState> states,
                              std::span<const double> times) {
    if (states.size() != times.size()) throw ConfigError("states and times differ in batch size");
    const auto batch = static_cast<Eigen::Index>(states.size());
    Eigen::MatrixXd input(static_cast<Eigen::Index>(config.input_dim()), batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
        const SequenceState& s = states[static_cast<std::size_t>(b)];
        if (s.length() != config.length || s.vocab() != config.vocab) {
            throw ConfigError("state shape " + std::to_string(s.length()) + "x" +
                              std::to_string(s.vocab()) + " does not match network " +
                              std::to_string(config.length) + "x" +
                              std::to_string(config.vocab));
        }
        Eigen::Index r = 0;
        for (std::size_t p = 0; p < config.length; ++p) {
            auto row = s.row(p);
            if (config.encoding == InputEncoding::kProbabilities) {
                const double scale = static_cast<double>(row.size());
                for (double x : row) input(r++, b) = scale * x - 1.0;
            } else {
                double mean = 0.0;
                const Eigen::Index start = r;
                for (double x : row) {
                    const double lx = std::log(std::max(x, kLogFloor));
                    input(r++, b) = lx;
                    mean += lx;
                }
                mean /= static_cast<double>(row.size());
                for (Eigen::Index i = start; i < r; ++i) input(i, b) -= mean;
            }
        }
        const auto tf = time_features(times[static_cast<std::size_t>(b)], config.n_freq);
        for (double f : tf) input(r++, b) = f;
    }
    return input;
}

ForwardCache forward_encoded(const DenoiserParams& params, Eigen::MatrixXd input) {
    const auto& cfg = params.config;
    if (params.layers.size() != cfg.depth + 1) throw ConfigError("layer count mismatch");
    if (input.rows() != static_cast<Eigen::Index>(cfg.input_dim())) {
        throw ConfigError("input width mismatch");
    }
    ForwardCache cache;
    cache.params_version = params.version;
    cache.input = std::move(input);
    const Eigen::MatrixXd* h = &cache.input;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const auto& layer = params.layers[l];
        Eigen::MatrixXd z = layer.weight * *h;
        z.colwise() += layer.bias;
        cache.post.push_back(silu(z));
        cache.pre.push_back(std::move(z));
        h = &cache.post.back();
    }
    const auto& head = params.layers.back();
    cache.logits = head.weight * *h;
    cache.logits.colwise() += head.bias;
    cache.probs = block_softmax(cache.logits, cfg.length, cfg.vocab);
    return cache;
}

ForwardCache forward_batch(const DenoiserParams& params, std::span<const SequenceState> states,
                           std::span<const double> times) {
    return forward_encoded(params, encode_inputs(params.config, states, times));
}

Prediction forward(const DenoiserParams& params, const SequenceState& state, double t) {
    ForwardCache cache = forward_batch(params, std::span(&state, 1), std::span(&t, 1));
    const auto& cfg = params.config;
    Prediction out{Eigen::MatrixXd(cfg.length, cfg.vocab), SequenceState(cfg.length, cfg.vocab)};
    for (std::size_t p = 0; p < cfg.length; ++p) {
        for (std::size_t v = 0; v < cfg.vocab; ++v) {
            const auto idx = static_cast<Eigen::Index>(p * cfg.vocab + v);
            out.logits(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(v)) =
                cache.logits(idx, 0);
            out.probs.row(p)[v] = cache.probs(idx, 0);
        }
    }
    return out;
}

ParamGrads backward(const DenoiserParams& params, ForwardCache& cache,
                    const Eigen::MatrixXd& logit_grad, Eigen::MatrixXd* input_grad) {
    if (cache.consumed) throw UsageError("forward cache already consumed by a backward pass");
    if (cache.params_version != params.version) {
        throw UsageError("forward cache is stale: parameters changed since the forward pass");
    }
    if (logit_grad.rows() != cache.logits.rows() || logit_grad.cols() != cache.logits.cols()) {
        throw ConfigError("logit gradient shape mismatch");
    }
    cache.consumed = true;

    const std::size_t depth = params.config.depth;
    ParamGrads grads;
    grads.layers.resize(depth + 1);

    Eigen::MatrixXd delta = logit_grad;
    for (std::size_t l = depth + 1; l-- > 0;) {
        const Eigen::MatrixXd& below = l == 0 ? cache.input : cache.post[l - 1];
        grads.layers[l].weight = delta * below.transpose();
        grads.layers[l].bias = delta.rowwise().sum();
        if (l == 0 && input_grad == nullptr) break;
        Eigen::MatrixXd up = params.layers[l].weight.transpose() * delta;
        if (l == 0) {
            *input_grad = std::move(up);
            break;
        }
        delta = up.cwiseProduct(silu_grad(cache.pre[l - 1]));
    }
    return grads;
}

OptimizerState OptimizerState::for_params(const DenoiserParams& params, AdamConfig config) {
    OptimizerState s;
    s.config = config;
    s.first = ParamGrads::zeros_like(params);
    s.second = ParamGrads::zeros_like(params);
    return s;
}

void adam_step(DenoiserParams& params, const ParamGrads& grads, OptimizerState& opt) {
    if (grads.layers.size() != params.layers.size() ||
        opt.first.layers.size() != params.layers.size()) {
        throw ConfigError("gradient/optimizer state not congruent with parameters");
    }
    const auto& c = opt.config;
    ++opt.step;
    const double step = static_cast<double>(opt.step);
    const double correction1 = 1.0 - std::pow(c.beta1, step);
    const double correction2 = 1.0 - std::pow(c.beta2, step);
    auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
        if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
            throw ConfigError("gradient shape mismatch");
        }
        m = c.beta1 * m + (1.0 - c.beta1) * grad;
        v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
        param.array() -= c.learning_rate * (m.array() / correction1) /
                         ((v.array() / correction2).sqrt() + c.epsilon);
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        update(params.layers[l].weight, grads.layers[l].weight, opt.first.layers[l].weight,
               opt.second.layers[l].weight);
        update(params.layers[l].bias, grads.layers[l].bias, opt.first.layers[l].bias,
               opt.second.layers[l].bias);
    }
    ++params.version;
}

namespace {

// Probe loss: sum over positions of <w_p, softmax(logits_p)> with fixed
// pseudo-random w, so the softmax Jacobian is exercised.
struct ProbeLoss {
    Eigen::VectorXd weights;

    double value(const ForwardCache& c) const { return weights.dot(c.probs.col(0)); }

    Eigen::MatrixXd logit_grad(const ForwardCache& c, const DenoiserConfig& cfg) const {
        Eigen::MatrixXd g(c.logits.rows(), 1);
        const auto v = static_cast<Eigen::Index>(cfg.vocab);
        for (std::size_t p = 0; p < cfg.length; ++p) {
            const auto off = static_cast<Eigen::Index>(p) * v;
            auto prob = c.probs.col(0).segment(off, v);
            auto w = weights.segment(off, v);
            const double mean = prob.dot(w);
            g.col(0).segment(off, v) = prob.cwiseProduct((w.array() - mean).matrix());
        }
        return g;
    }
};

double rel_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace

GradCheckReport grad_check(const DenoiserParams& params, const SequenceState& probe, double t,
                           std::uint64_t seed, std::size_t per_layer, GradMutator mutate) {
    constexpr double h = 1e-5;
    const auto& cfg = params.config;
    Rng rng(seed);
    ProbeLoss loss{Eigen::VectorXd(static_cast<Eigen::Index>(cfg.state_dim()))};
    for (Eigen::Index i = 0; i < loss.weights.size(); ++i) loss.weights(i) = 2.0 * rng.uniform() - 1.0;

    const Eigen::MatrixXd input = encode_inputs(cfg, std::span(&probe, 1), std::span(&t, 1));
    ForwardCache cache = forward_encoded(params, input);
    Eigen::MatrixXd input_grad;
    ParamGrads grads = backward(params, cache, loss.logit_grad(cache, cfg), &input_grad);
    if (mutate) mutate(grads);

    DenoiserParams work = params;
    auto eval = [&](const DenoiserParams& p) { return loss.value(forward_encoded(p, input)); };

    GradCheckReport report;
    report.per_layer.assign(params.layers.size(), 0.0);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& W = work.layers[l].weight;
        auto& b = work.layers[l].bias;
        const auto n_w = static_cast<std::uint64_t>(W.size());
        const auto n_total = n_w + static_cast<std::uint64_t>(b.size());
        for (std::size_t s = 0; s < per_layer; ++s) {
            const std::uint64_t idx = rng.below(n_total);
            double* slot = idx < n_w ? W.data() + idx : b.data() + (idx - n_w);
            const double analytic = idx < n_w ? grads.layers[l].weight.data()[idx]
                                              : grads.layers[l].bias.data()[idx - n_w];
            const double saved = *slot;
            *slot = saved + h;
            const double up = eval(work);
            *slot = saved - h;
            const double down = eval(work);
            *slot = saved;
            const double fd = (up - down) / (2.0 * h);
            const double err = rel_error(analytic, fd);
            report.per_layer[l] = std::max(report.per_layer[l], err);
            ++report.checked;
        }
        report.max_rel_error = std::max(report.max_rel_error, report.per_layer[l]);
    }

    // Time-embedding path: d loss / d t through the sinusoidal features.
    const auto n_freq = cfg.n_freq;
    const auto base = static_cast<Eigen::Index>(cfg.state_dim());
    double analytic_t = 0.0;
    double w = std::numbers::pi;
    for (std::size_t j = 0; j < n_freq; ++j, w *= 2.0) {
        analytic_t += input_grad(base + static_cast<Eigen::Index>(j), 0) * w * std::cos(w * t);
        analytic_t -= input_grad(base + static_cast<Eigen::Index>(n_freq + j), 0) * w * std::sin(w * t);
    }
    auto eval_t = [&](double tt) {
        return loss.value(forward_encoded(params, encode_inputs(cfg, std::span(&probe, 1),
                                                                 std::span(&tt, 1))));
    };
    const double fd_t = (eval_t(t + h) - eval_t(t - h)) / (2.0 * h);
    report.input_rel_error = rel_error(analytic_t, fd_t);
    report.max_rel_error = std::max(report.max_rel_error, report.input_rel_error);
    return report;
}

// Checkpoint container:
//   magic "SFLWCKPT" | u32 version | u32 kind | f64 tau_max | f64 lambda
//   u64 L | u64 V | u64 hidden | u64 depth | u64 n_freq | u32 encoding
//   u64 n_layers | per layer: u64 rows | u64 cols | rows*cols f64 (column-major) | rows f64
// All integers and floats little-endian.
namespace {

constexpr char kMagic[8] = {'S', 'F', 'L', 'W', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    U bits = std::bit_cast<U>(value);
    unsigned char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename T>
T get(std::istream& in) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    unsigned char bytes[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
        throw ConfigError("checkpoint truncated");
    }
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

}  // namespace

void save_checkpoint(std::ostream& out, const DenoiserParams& params, const CheckpointMeta& meta) {
    const auto& c = params.config;
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint32_t>(out, meta.kind);
    put<double>(out, meta.tau_max);
    put<double>(out, meta.lambda);
    for (std::size_t v : {c.length, c.vocab, c.hidden, c.depth, c.n_freq}) {
        put<std::uint64_t>(out, v);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c.encoding));
    put<std::uint64_t>(out, params.layers.size());
    for (const auto& l : params.layers) {
        put<std::uint64_t>(out, static_cast<std::uint64_t>(l.weight.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(l.weight.cols()));
        for (Eigen::Index i = 0; i < l.weight.size(); ++i) put<double>(out, l.weight.data()[i]);
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) put<double>(out, l.bias(i));
    }
    if (!out) throw ConfigError("failed writing checkpoint");
}

void save_checkpoint(const std::string& path, const DenoiserParams& params,
                     const CheckpointMeta& meta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
    save_checkpoint(out, params, meta);
}

DenoiserParams load_checkpoint(std::istream& in, CheckpointMeta* meta) {
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError("not a checkpoint file (bad magic)");
    }
    const auto version = get<std::uint32_t>(in);
    if (version != kFormatVersion) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    }
    CheckpointMeta m;
    m.kind = get<std::uint32_t>(in);
    m.tau_max = get<double>(in);
    m.lambda = get<double>(in);
    DenoiserParams params;
    auto& c = params.config;
    c.length = get<std::uint64_t>(in);
    c.vocab = get<std::uint64_t>(in);
    c.hidden = get<std::uint64_t>(in);
    c.depth = get<std::uint64_t>(in);
    c.n_freq = get<std::uint64_t>(in);
    const auto enc = get<std::uint32_t>(in);
    if (enc > 1) throw ConfigError("unknown input encoding in checkpoint");
    c.encoding = static_cast<InputEncoding>(enc);
    c.validate();
    const auto n_layers = get<std::uint64_t>(in);
    if (n_layers != c.depth + 1) throw ConfigError("checkpoint layer count disagrees with depth");
    std::size_t expected_in = c.input_dim();
    for (std::uint64_t l = 0; l < n_layers; ++l) {
        const auto rows = get<std::uint64_t>(in);
        const auto cols = get<std::uint64_t>(in);
        const std::size_t expected_out = l + 1 == n_layers ? c.state_dim() : c.hidden;
        if (rows != expected_out || cols != expected_in) {
            throw ConfigError("checkpoint layer " + std::to_string(l) + " has unexpected shape");
        }
        DenseLayer layer{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = get<double>(in);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = get<double>(in);
        params.layers.push_back(std::move(layer));
        expected_in = rows;
    }
    if (meta != nullptr) *meta = m;
    return params;
}

DenoiserParams load_checkpoint(const std::string& path, CheckpointMeta* meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint: " + path);
    return load_checkpoint(in, meta);
}

}  // namespace sflow
