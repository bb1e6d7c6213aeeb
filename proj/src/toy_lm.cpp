#include "evop/toy_lm.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "evop/error.h"
#include "evop/parallel.h"
#include "evop/rng.h"

namespace evop {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr const char* kCheckpointFormat = "evop-toylm";
constexpr int kCheckpointVersion = 1;

using Matrix = std::vector<double>;  // row-major [rows][cols]

void fill_normal(std::vector<float>& out, std::size_t count, double stddev, Rng& rng) {
    out.resize(count);
    for (auto& v : out) v = static_cast<float>(rng.normal() * stddev);
}

void fill_constant(std::vector<float>& out, std::size_t count, float value) {
    out.assign(count, value);
}

// Weights of one linear map transposed to [in][out] and widened to double, so
// the inner loop runs over outputs. Each output still accumulates bias first
// and then inputs in ascending order.
std::vector<double> transpose_to_double(const std::vector<float>& w, std::size_t n_out,
                                        std::size_t n_in) {
    std::vector<double> t(w.size());
    for (std::size_t o = 0; o < n_out; ++o) {
        for (std::size_t i = 0; i < n_in; ++i) t[i * n_out + o] = static_cast<double>(w[o * n_in + i]);
    }
    return t;
}

// out[t][o] = b[o] + sum_i in[t][i] * w[o][i], with wt = w transposed.
void linear(const Matrix& in, std::size_t rows, std::size_t n_in, const std::vector<double>& wt,
            const std::vector<float>& b, std::size_t n_out, Matrix& out) {
    out.resize(rows * n_out);
    for (std::size_t t = 0; t < rows; ++t) {
        const double* x = &in[t * n_in];
        double* y = &out[t * n_out];
        for (std::size_t o = 0; o < n_out; ++o) y[o] = b.empty() ? 0.0 : static_cast<double>(b[o]);
        for (std::size_t i = 0; i < n_in; ++i) {
            const double xi = x[i];
            const double* wr = &wt[i * n_out];
            for (std::size_t o = 0; o < n_out; ++o) y[o] += wr[o] * xi;
        }
    }
}

void layer_norm(const Matrix& in, std::size_t rows, std::size_t dim, const std::vector<float>& gain,
                const std::vector<float>& bias, Matrix& out) {
    out.resize(rows * dim);
    for (std::size_t t = 0; t < rows; ++t) {
        const double* x = &in[t * dim];
        double mean = 0.0;
        for (std::size_t i = 0; i < dim; ++i) mean += x[i];
        mean /= static_cast<double>(dim);
        double var = 0.0;
        for (std::size_t i = 0; i < dim; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= static_cast<double>(dim);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t i = 0; i < dim; ++i) {
            out[t * dim + i] = (x[i] - mean) * inv * gain[i] + bias[i];
        }
    }
}

double gelu(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

struct BlockScratch {
    Matrix normed, q, k, v, attn, proj, up, down;
    std::vector<double> scores;
};

void run_block(const BlockWeights& w, const PackedBlock& p, const ToyLMConfig& cfg,
               std::size_t len, Matrix& x, BlockScratch& s) {
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto heads = static_cast<std::size_t>(cfg.n_heads);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    const std::size_t head_dim = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    layer_norm(x, len, d, w.ln1_gain, w.ln1_bias, s.normed);
    linear(s.normed, len, d, p.wq, w.bq, d, s.q);
    linear(s.normed, len, d, p.wk, w.bk, d, s.k);
    linear(s.normed, len, d, p.wv, w.bv, d, s.v);

    s.attn.assign(len * d, 0.0);
    s.scores.resize(len);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * head_dim;
        for (std::size_t t = 0; t < len; ++t) {
            double max_score = -INFINITY;
            for (std::size_t u = 0; u <= t; ++u) {
                double dot = 0.0;
                for (std::size_t j = 0; j < head_dim; ++j) {
                    dot += s.q[t * d + off + j] * s.k[u * d + off + j];
                }
                s.scores[u] = dot * scale;
                max_score = std::max(max_score, s.scores[u]);
            }
            double denom = 0.0;
            for (std::size_t u = 0; u <= t; ++u) {
                s.scores[u] = std::exp(s.scores[u] - max_score);
                denom += s.scores[u];
            }
            double* out = &s.attn[t * d + off];
            for (std::size_t u = 0; u <= t; ++u) {
                const double p = s.scores[u] / denom;
                for (std::size_t j = 0; j < head_dim; ++j) out[j] += p * s.v[u * d + off + j];
            }
        }
    }
    linear(s.attn, len, d, p.wo, w.bo, d, s.proj);
    for (std::size_t i = 0; i < len * d; ++i) x[i] += s.proj[i];

    layer_norm(x, len, d, w.ln2_gain, w.ln2_bias, s.normed);
    linear(s.normed, len, d, p.w_up, w.b_up, ff, s.up);
    for (auto& u : s.up) u = gelu(u);
    linear(s.up, len, ff, p.w_down, w.b_down, d, s.down);
    for (std::size_t i = 0; i < len * d; ++i) x[i] += s.down[i];
}

void check_tensor_sizes(const ToyLMConfig& cfg, const ToyLMWeights& w) {
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    auto expect = [](const std::vector<float>& t, std::size_t n, const char* name) {
        if (t.size() != n) {
            throw ShapeError(std::string("tensor ") + name + " has " + std::to_string(t.size()) +
                             " values, expected " + std::to_string(n));
        }
    };
    expect(w.token_embedding, v * d, "token_embedding");
    if (w.blocks.size() != static_cast<std::size_t>(cfg.n_layers)) {
        throw ShapeError("block count does not match n_layers");
    }
    for (const auto& b : w.blocks) {
        expect(b.ln1_gain, d, "ln1_gain");
        expect(b.ln1_bias, d, "ln1_bias");
        expect(b.wq, d * d, "wq");
        expect(b.bq, d, "bq");
        expect(b.wk, d * d, "wk");
        expect(b.bk, d, "bk");
        expect(b.wv, d * d, "wv");
        expect(b.bv, d, "bv");
        expect(b.wo, d * d, "wo");
        expect(b.bo, d, "bo");
        expect(b.ln2_gain, d, "ln2_gain");
        expect(b.ln2_bias, d, "ln2_bias");
        expect(b.w_up, ff * d, "w_up");
        expect(b.b_up, ff, "b_up");
        expect(b.w_down, d * ff, "w_down");
        expect(b.b_down, d, "b_down");
    }
    expect(w.final_ln_gain, d, "final_ln_gain");
    expect(w.final_ln_bias, d, "final_ln_bias");
    expect(w.output_projection, v * d, "output_projection");
}

template <typename W, typename Out>
void collect_tensors(W& w, Out& out) {
    out.push_back(&w.token_embedding);
    for (auto& b : w.blocks) {
        for (auto* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                        &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w_up, &b.b_up, &b.w_down, &b.b_down}) {
            out.push_back(t);
        }
    }
    out.push_back(&w.final_ln_gain);
    out.push_back(&w.final_ln_bias);
    out.push_back(&w.output_projection);
}

nlohmann::json config_to_json(const ToyLMConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
            {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
            {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
            {"weight_seed", c.weight_seed}};
}

ToyLMConfig config_from_json(const nlohmann::json& j) {
    ToyLMConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.weight_seed = j.at("weight_seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void ToyLMConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (d_model < 2 || n_heads < 1) throw ConfigError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (d_model % 2 != 0) throw ConfigError("d_model must be even for sinusoidal positions");
    if (n_layers < 2) throw ConfigError("n_layers must be >= 2");
    if (d_ff < 1) throw ConfigError("d_ff must be positive");
    if (max_seq_len < 8) throw ConfigError("max_seq_len must be >= 8");
}

std::vector<const std::vector<float>*> weight_tensors(const ToyLMWeights& weights) {
    std::vector<const std::vector<float>*> out;
    collect_tensors(weights, out);
    return out;
}

std::vector<std::vector<float>*> weight_tensors(ToyLMWeights& weights) {
    std::vector<std::vector<float>*> out;
    collect_tensors(weights, out);
    return out;
}

ToyLM::ToyLM(ToyLMConfig config, ToyLMWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto ff = static_cast<std::size_t>(config_.d_ff);
    const auto v = static_cast<std::size_t>(config_.vocab_size);
    packed_.reserve(weights_.blocks.size());
    for (const auto& b : weights_.blocks) {
        packed_.push_back({transpose_to_double(b.wq, d, d), transpose_to_double(b.wk, d, d),
                           transpose_to_double(b.wv, d, d), transpose_to_double(b.wo, d, d),
                           transpose_to_double(b.w_up, ff, d), transpose_to_double(b.w_down, d, ff)});
    }
    packed_output_ = transpose_to_double(weights_.output_projection, v, d);
}

ToyLM ToyLM::init(const ToyLMConfig& config) {
    config.validate();
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double ff_std = 1.0 / std::sqrt(static_cast<double>(ff));
    constexpr double kBiasStd = 0.1;

    // One stream, consumed in weight_tensors() order.
    Rng rng(derive_seed(config.weight_seed, {kStreamWeights}));
    ToyLMWeights w;
    fill_normal(w.token_embedding, v * d, 1.0, rng);
    w.blocks.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& b : w.blocks) {
        fill_constant(b.ln1_gain, d, 1.0f);
        fill_constant(b.ln1_bias, d, 0.0f);
        fill_normal(b.wq, d * d, in_std, rng);
        fill_normal(b.bq, d, kBiasStd, rng);
        fill_normal(b.wk, d * d, in_std, rng);
        fill_normal(b.bk, d, kBiasStd, rng);
        fill_normal(b.wv, d * d, in_std, rng);
        fill_normal(b.bv, d, kBiasStd, rng);
        fill_normal(b.wo, d * d, in_std, rng);
        fill_normal(b.bo, d, kBiasStd, rng);
        fill_constant(b.ln2_gain, d, 1.0f);
        fill_constant(b.ln2_bias, d, 0.0f);
        fill_normal(b.w_up, ff * d, in_std, rng);
        fill_normal(b.b_up, ff, kBiasStd, rng);
        fill_normal(b.w_down, d * ff, ff_std, rng);
        fill_normal(b.b_down, d, kBiasStd, rng);
    }
    fill_constant(w.final_ln_gain, d, 1.0f);
    fill_constant(w.final_ln_bias, d, 0.0f);
    fill_normal(w.output_projection, v * d, in_std, rng);
    return ToyLM(config, std::move(w));
}

ToyLM ToyLM::from_weights(const ToyLMConfig& config, ToyLMWeights weights) {
    config.validate();
    check_tensor_sizes(config, weights);
    return ToyLM(config, std::move(weights));
}

double position_encoding(int pos, int channel, int d_model) {
    const int pair = channel / 2;
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(d_model));
    const double angle = static_cast<double>(pos) * freq;
    return channel % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

double ToyLM::forward_nll(const PruningPattern& pattern, std::span<const Token> tokens) const {
    if (pattern.size() != layer_count()) {
        throw ShapeError("pattern has " + std::to_string(pattern.size()) + " bits, model has " +
                         std::to_string(layer_count()) + " layers");
    }
    const std::size_t len = tokens.size();
    if (len < 2) throw ShapeError("a sample needs at least 2 tokens");
    if (len > static_cast<std::size_t>(config_.max_seq_len)) {
        throw ShapeError("sample length " + std::to_string(len) + " exceeds max_seq_len " +
                         std::to_string(config_.max_seq_len));
    }
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto vocab = static_cast<std::size_t>(config_.vocab_size);

    Matrix x(len * d);
    for (std::size_t t = 0; t < len; ++t) {
        const Token tok = tokens[t];
        if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
            throw ShapeError("token id " + std::to_string(tok) + " outside vocabulary");
        }
        const float* e = &weights_.token_embedding[static_cast<std::size_t>(tok) * d];
        for (std::size_t i = 0; i < d; ++i) {
            x[t * d + i] = static_cast<double>(e[i]) +
                           position_encoding(static_cast<int>(t), static_cast<int>(i), config_.d_model);
        }
    }

    BlockScratch scratch;
    for (std::size_t l = 0; l < weights_.blocks.size(); ++l) {
        if (pattern.pruned(l)) continue;
        run_block(weights_.blocks[l], packed_[l], config_, len, x, scratch);
    }

    Matrix normed;
    layer_norm(x, len, d, weights_.final_ln_gain, weights_.final_ln_bias, normed);

    Matrix logits;
    linear(normed, len - 1, d, packed_output_, {}, vocab, logits);
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < len; ++t) {
        const double* row = &logits[t * vocab];
        double max_logit = -INFINITY;
        for (std::size_t o = 0; o < vocab; ++o) max_logit = std::max(max_logit, row[o]);
        double sum = 0.0;
        for (std::size_t o = 0; o < vocab; ++o) sum += std::exp(row[o] - max_logit);
        const double log_z = max_logit + std::log(sum);
        total += log_z - row[static_cast<std::size_t>(tokens[t + 1])];
    }
    return total / static_cast<double>(len - 1);
}

double forward_nll(const ToyLM& model, const PruningPattern& pattern,
                   const CalibrationSample& sample) {
    return model.forward_nll(pattern, sample.token_ids);
}

FitnessRecord average_loss(const ToyLM& model, const PruningPattern& pattern,
                           std::span<const CalibrationSample> samples, std::size_t workers) {
    if (samples.empty()) throw DatasetError("average_loss needs at least one sample");
    std::vector<double> losses(samples.size());
    parallel_for(samples.size(), workers,
                 [&](std::size_t i) { losses[i] = model.forward_nll(pattern, samples[i].token_ids); });
    std::sort(losses.begin(), losses.end());
    double sum = 0.0;
    for (auto l : losses) sum += l;
    return FitnessRecord{pattern, sum / static_cast<double>(losses.size())};
}

void save_checkpoint(const ToyLM& model, const std::filesystem::path& path) {
    const auto tensors = weight_tensors(model.weights());
    std::size_t floats = 0;
    for (auto* t : tensors) floats += t->size();
    nlohmann::json header = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"config", config_to_json(model.config())},
                             {"tensor_count", tensors.size()},
                             {"float_count", floats}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
    out << header.dump() << '\n';
    for (auto* t : tensors) {
        for (float f : *t) {
            const auto bits = std::bit_cast<std::uint32_t>(f);
            const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                                   static_cast<char>((bits >> 16) & 0xff),
                                   static_cast<char>((bits >> 24) & 0xff)};
            out.write(bytes, 4);
        }
    }
    if (!out) throw Error("failed writing checkpoint: " + path.string());
}

ToyLM load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error("checkpoint is empty: " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint header is not JSON: " + std::string(e.what()));
    }
    if (header.value("format", "") != kCheckpointFormat ||
        header.value("version", 0) != kCheckpointVersion) {
        throw Error("unsupported checkpoint format in " + path.string());
    }
    const ToyLMConfig config = config_from_json(header.at("config"));
    config.validate();

    // Shapes come from a freshly sized skeleton; values are overwritten below.
    ToyLMWeights w = ToyLM::init(config).weights();
    for (auto* t : weight_tensors(w)) {
        for (float& f : *t) {
            unsigned char bytes[4];
            if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
                throw Error("checkpoint truncated: " + path.string());
            }
            const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                                       (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                       (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                       (static_cast<std::uint32_t>(bytes[3]) << 24);
            f = std::bit_cast<float>(bits);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw Error("checkpoint has trailing bytes: " + path.string());
    }
    return ToyLM::from_weights(config, std::move(w));
}

}  // namespace evop
