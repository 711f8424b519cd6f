#include "superscopes/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "superscopes/error.hpp"
#include "superscopes/safetensors.hpp"

namespace superscopes {

namespace {

constexpr const char *kConfigFile = "config.json";
constexpr const char *kWeightsFile = "model.safetensors";
constexpr const char *kVocabFile = "vocab.json";
constexpr const char *kMergesFile = "merges.txt";

std::string layer_prefix(int l) { return "h." + std::to_string(l) + "."; }

std::string shape_string(const std::vector<int64_t> &shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        s += (i ? ", " : "") + std::to_string(shape[i]);
    }
    return s + ")";
}

void layernorm(std::span<const float> x, const Tensor &w, const Tensor &b, float eps, std::span<float> out) {
    const size_t d = x.size();
    float mean = 0.0f;
    for (float v : x) {
        mean += v;
    }
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (float v : x) {
        const float c = v - mean;
        var += c * c;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (size_t j = 0; j < d; ++j) {
        out[j] = (x[j] - mean) * inv * w.data[j] + b.data[j];
    }
}

// out[r] = bias + in[r] @ W for each of `rows` inputs, W stored (in, out) row-major.
// Every output element accumulates over k in order, whatever the row count;
// the column tiling only shares weight reads across rows.
void linear_rows(std::span<const float> in, size_t rows, const Tensor &w, const Tensor &bias, std::span<float> out) {
    const size_t in_dim = static_cast<size_t>(w.shape[0]);
    const size_t cols = static_cast<size_t>(w.shape[1]);
    constexpr size_t kTile = 512;
    for (size_t r = 0; r < rows; ++r) {
        std::memcpy(out.data() + r * cols, bias.data.data(), cols * sizeof(float));
    }
    for (size_t j0 = 0; j0 < cols; j0 += kTile) {
        const size_t j1 = std::min(cols, j0 + kTile);
        for (size_t k = 0; k < in_dim; ++k) {
            const float *wrow = w.data.data() + k * cols;
            for (size_t r = 0; r < rows; ++r) {
                const float a = in[r * in_dim + k];
                float *o = out.data() + r * cols;
                for (size_t j = j0; j < j1; ++j) {
                    o[j] += a * wrow[j];
                }
            }
        }
    }
}

float gelu_tanh(float x) {
    constexpr float kAlpha = 0.7978845608028654f; // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(kAlpha * (x + 0.044715f * x * x * x)));
}

// Eight interleaved partial sums combined in a fixed order: vectorizable and
// still bit-reproducible.
float dot(std::span<const float> a, std::span<const float> b) {
    constexpr size_t kLanes = 8;
    float acc[kLanes] = {};
    const size_t n = a.size();
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        for (size_t k = 0; k < kLanes; ++k) {
            acc[k] += a[i + k] * b[i + k];
        }
    }
    float s = 0.0f;
    for (float v : acc) {
        s += v;
    }
    for (; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

uint64_t fnv1a(uint64_t h, const void *data, size_t size) {
    const auto *p = static_cast<const uint8_t *>(data);
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

const Tensor *lookup(const TensorMap &tensors, const std::string &name) {
    if (auto it = tensors.find(name); it != tensors.end()) {
        return &it->second;
    }
    if (auto it = tensors.find("transformer." + name); it != tensors.end()) {
        return &it->second;
    }
    return nullptr;
}

template <typename W, typename T = std::conditional_t<std::is_const_v<W>, const Tensor, Tensor>>
std::vector<T *> ordered_slots(W &w) {
    std::vector<T *> slots{&w.token_embedding, &w.position_embedding};
    for (auto &l : w.layers) {
        for (T *t : {&l.ln1_w, &l.ln1_b, &l.attn_qkv_w, &l.attn_qkv_b, &l.attn_proj_w, &l.attn_proj_b, &l.ln2_w,
                          &l.ln2_b, &l.fc_w, &l.fc_b, &l.proj_w, &l.proj_b}) {
            slots.push_back(t);
        }
    }
    slots.push_back(&w.lnf_w);
    slots.push_back(&w.lnf_b);
    return slots;
}

} // namespace

void ModelConfig::validate() const {
    check(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && vocab_size >= 1 && max_positions >= 1,
          ErrorCode::SchemaViolation, "model dimensions must all be >= 1");
    check(d_model % n_heads == 0, ErrorCode::SchemaViolation, "n_embd must be divisible by n_head");
    check(std::isfinite(layernorm_epsilon) && layernorm_epsilon > 0.0f, ErrorCode::SchemaViolation,
          "layer_norm_epsilon must be positive");
}

ModelConfig ModelConfig::from_json(const nlohmann::json &j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layer").get<int>();
        c.n_heads = j.at("n_head").get<int>();
        c.d_model = j.at("n_embd").get<int>();
        c.max_positions = j.at("n_positions").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        if (j.contains("layer_norm_epsilon")) {
            c.layernorm_epsilon = j.at("layer_norm_epsilon").get<float>();
        }
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::SchemaViolation, std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json ModelConfig::to_json() const {
    return {{"n_layer", n_layers},          {"n_head", n_heads},       {"n_embd", d_model},
            {"n_positions", max_positions}, {"vocab_size", vocab_size}, {"layer_norm_epsilon", layernorm_epsilon}};
}

std::vector<TensorSpec> weight_schema(const ModelConfig &c) {
    const int64_t d = c.d_model;
    std::vector<TensorSpec> s{{"wte.weight", {c.vocab_size, d}}, {"wpe.weight", {c.max_positions, d}}};
    for (int l = 0; l < c.n_layers; ++l) {
        const auto p = layer_prefix(l);
        s.push_back({p + "ln_1.weight", {d}});
        s.push_back({p + "ln_1.bias", {d}});
        s.push_back({p + "attn.c_attn.weight", {d, 3 * d}});
        s.push_back({p + "attn.c_attn.bias", {3 * d}});
        s.push_back({p + "attn.c_proj.weight", {d, d}});
        s.push_back({p + "attn.c_proj.bias", {d}});
        s.push_back({p + "ln_2.weight", {d}});
        s.push_back({p + "ln_2.bias", {d}});
        s.push_back({p + "mlp.c_fc.weight", {d, 4 * d}});
        s.push_back({p + "mlp.c_fc.bias", {4 * d}});
        s.push_back({p + "mlp.c_proj.weight", {4 * d, d}});
        s.push_back({p + "mlp.c_proj.bias", {d}});
    }
    s.push_back({"ln_f.weight", {d}});
    s.push_back({"ln_f.bias", {d}});
    return s;
}

int64_t parameter_count(const ModelConfig &config) {
    int64_t n = 0;
    for (const auto &spec : weight_schema(config)) {
        n += Tensor::count(spec.shape);
    }
    return n;
}

ModelBundle ModelBundle::from_tensors(const ModelConfig &config, const TensorMap &tensors, Tokenizer tokenizer) {
    config.validate();
    check(tokenizer.vocab_size() == static_cast<size_t>(config.vocab_size), ErrorCode::SchemaViolation,
          "tokenizer has " + std::to_string(tokenizer.vocab_size()) + " tokens but config.vocab_size is " +
              std::to_string(config.vocab_size));

    ModelBundle b;
    b.config_ = config;
    b.tokenizer_ = std::move(tokenizer);
    b.weights_.layers.resize(static_cast<size_t>(config.n_layers));

    const auto schema = weight_schema(config);
    const auto slots = ordered_slots(b.weights_);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < schema.size(); ++i) {
        const auto &spec = schema[i];
        const Tensor *t = lookup(tensors, spec.name);
        check(t != nullptr, ErrorCode::SchemaViolation, "missing tensor '" + spec.name + "'");
        check(t->shape == spec.shape, ErrorCode::SchemaViolation,
              "tensor '" + spec.name + "' has shape " + shape_string(t->shape) + ", expected " + shape_string(spec.shape));
        for (float v : t->data) {
            check(std::isfinite(v), ErrorCode::CorruptWeights, "tensor '" + spec.name + "' contains a non-finite value");
        }
        *slots[i] = *t;
        h = fnv1a(h, spec.name.data(), spec.name.size());
        h = fnv1a(h, t->shape.data(), t->shape.size() * sizeof(int64_t));
        h = fnv1a(h, t->data.data(), t->data.size() * sizeof(float));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    b.hash_ = buf;
    return b;
}

TensorMap ModelBundle::tensors() const {
    TensorMap out;
    const auto schema = weight_schema(config_);
    auto slots = ordered_slots(weights_);
    for (size_t i = 0; i < schema.size(); ++i) {
        out.emplace(schema[i].name, *slots[i]);
    }
    return out;
}

std::vector<std::string> shape_audit(const ModelBundle &bundle) {
    std::vector<std::string> problems;
    const auto schema = weight_schema(bundle.config());
    const auto slots = ordered_slots(bundle.weights());
    if (slots.size() != schema.size()) {
        problems.push_back("layer count differs from config");
        return problems;
    }
    for (size_t i = 0; i < schema.size(); ++i) {
        if (slots[i]->shape != schema[i].shape ||
            static_cast<int64_t>(slots[i]->data.size()) != Tensor::count(schema[i].shape)) {
            problems.push_back(schema[i].name + " is " + shape_string(slots[i]->shape) + ", expected " +
                               shape_string(schema[i].shape));
        }
    }
    if (bundle.tokenizer().vocab_size() != static_cast<size_t>(bundle.config().vocab_size)) {
        problems.push_back("tokenizer size differs from vocab_size");
    }
    return problems;
}

ModelBundle load_model(const std::filesystem::path &dir) {
    for (const char *f : {kConfigFile, kWeightsFile, kVocabFile, kMergesFile}) {
        check(std::filesystem::exists(dir / f), ErrorCode::MissingArtifact, "missing " + (dir / f).string());
    }
    std::ifstream cfg_in(dir / kConfigFile);
    nlohmann::json cfg_json;
    try {
        cfg_in >> cfg_json;
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::SchemaViolation, std::string("config.json: ") + e.what());
    }
    const auto config = ModelConfig::from_json(cfg_json);
    auto tokenizer = Tokenizer::from_files(dir / kVocabFile, dir / kMergesFile);
    return ModelBundle::from_tensors(config, read_safetensors(dir / kWeightsFile), std::move(tokenizer));
}

void save_model(const ModelBundle &bundle, const std::filesystem::path &dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / kConfigFile);
        out << bundle.config().to_json().dump(2) << "\n";
        check(static_cast<bool>(out), ErrorCode::IoError, "cannot write config.json");
    }
    write_safetensors(dir / kWeightsFile, bundle.tensors());
    {
        nlohmann::json vocab(bundle.tokenizer().vocab());
        std::ofstream out(dir / kVocabFile);
        out << vocab.dump();
        check(static_cast<bool>(out), ErrorCode::IoError, "cannot write vocab.json");
    }
    {
        std::ofstream out(dir / kMergesFile);
        out << "#version: 0.2\n";
        for (const auto &[a, b] : bundle.tokenizer().merges()) {
            out << a << ' ' << b << '\n';
        }
        check(static_cast<bool>(out), ErrorCode::IoError, "cannot write merges.txt");
    }
}

TokenSequence make_sequence(const ModelBundle &bundle, std::span<const TokenId> ids) {
    TokenSequence seq;
    seq.ids.assign(ids.begin(), ids.end());
    seq.texts.reserve(ids.size());
    for (TokenId id : ids) {
        seq.texts.push_back(bundle.tokenizer().token_bytes(id));
    }
    return seq;
}

TokenSequence encode(const ModelBundle &bundle, std::string_view text) {
    const auto ids = bundle.tokenizer().encode(text);
    check(ids.size() <= static_cast<size_t>(bundle.config().max_positions), ErrorCode::PromptTooLong,
          "prompt encodes to " + std::to_string(ids.size()) + " tokens; the model accepts at most " +
              std::to_string(bundle.config().max_positions));
    return make_sequence(bundle, ids);
}

std::string decode(const ModelBundle &bundle, std::span<const TokenId> ids) {
    return bundle.tokenizer().decode(ids);
}

KvCache::KvCache(const ModelConfig &config)
    : d_model_(config.d_model), capacity_(config.max_positions),
      keys_(static_cast<size_t>(config.n_layers)), values_(static_cast<size_t>(config.n_layers)) {}

void HookChain::on_residual(ResidualSite site, int layer, int position, std::span<float> value) {
    for (auto *h : hooks_) {
        h->on_residual(site, layer, position, value);
    }
}

class ForwardPass {
public:
    static Tensor run(const ModelBundle &bundle, std::span<const TokenId> ids, KvCache &cache, ForwardHook *hook,
                      LogitsMode mode) {
        const auto &cfg = bundle.config();
        const auto &w = bundle.weights();
        check(cache.d_model_ == cfg.d_model && cache.keys_.size() == static_cast<size_t>(cfg.n_layers),
              ErrorCode::DimensionError, "KV cache was created for a different model");

        const int start = cache.filled_;
        const int n = static_cast<int>(ids.size());
        check(start + n <= cfg.max_positions, ErrorCode::ContextOverflow,
              "sequence of " + std::to_string(start + n) + " positions exceeds max_positions " +
                  std::to_string(cfg.max_positions));
        const int vocab = cfg.vocab_size;
        for (TokenId id : ids) {
            check(id >= 0 && id < vocab, ErrorCode::UnknownToken, "token id " + std::to_string(id) + " out of range");
        }
        if (n == 0) {
            return Tensor({0, vocab});
        }

        const size_t d = static_cast<size_t>(cfg.d_model);
        const int heads = cfg.n_heads;
        const size_t hd = static_cast<size_t>(cfg.head_dim());
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        const size_t un = static_cast<size_t>(n);

        auto notify = [&](ResidualSite site, int layer, int p, std::span<float> v) {
            if (hook != nullptr) {
                hook->on_residual(site, layer, start + p + 1, v);
            }
        };

        std::vector<float> x(un * d);
        for (int p = 0; p < n; ++p) {
            auto row = std::span<float>(x).subspan(static_cast<size_t>(p) * d, d);
            const auto te = w.token_embedding.row(ids[static_cast<size_t>(p)]);
            const auto pe = w.position_embedding.row(start + p);
            for (size_t j = 0; j < d; ++j) {
                row[j] = te[j] + pe[j];
            }
            notify(ResidualSite::BlockOutput, 0, p, row);
        }

        std::vector<float> normed(un * d), qkv(un * 3 * d), heads_out(un * d), attn(un * d), pre(un * d),
            mlp(un * d), hidden4(un * 4 * d);
        std::vector<float> scores(static_cast<size_t>(start + n));
        auto at = [d](std::vector<float> &buf, int p) { return std::span<float>(buf).subspan(static_cast<size_t>(p) * d, d); };

        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto &lw = w.layers[static_cast<size_t>(l)];
            auto &keys = cache.keys_[static_cast<size_t>(l)];
            auto &values = cache.values_[static_cast<size_t>(l)];
            keys.resize(static_cast<size_t>(start + n) * d);
            values.resize(static_cast<size_t>(start + n) * d);

            for (int p = 0; p < n; ++p) {
                layernorm(at(x, p), lw.ln1_w, lw.ln1_b, cfg.layernorm_epsilon, at(normed, p));
            }
            linear_rows(normed, un, lw.attn_qkv_w, lw.attn_qkv_b, qkv);
            for (int p = 0; p < n; ++p) {
                const size_t pos = static_cast<size_t>(start + p);
                const float *src = qkv.data() + static_cast<size_t>(p) * 3 * d;
                std::memcpy(keys.data() + pos * d, src + d, d * sizeof(float));
                std::memcpy(values.data() + pos * d, src + 2 * d, d * sizeof(float));
            }

            for (int p = 0; p < n; ++p) {
                const size_t visible = static_cast<size_t>(start + p + 1);
                auto out = at(heads_out, p);
                for (int h = 0; h < heads; ++h) {
                    const size_t off = static_cast<size_t>(h) * hd;
                    const auto qh = std::span<const float>(qkv).subspan(static_cast<size_t>(p) * 3 * d + off, hd);
                    float best = -INFINITY;
                    for (size_t t = 0; t < visible; ++t) {
                        scores[t] = dot(qh, std::span<const float>(keys).subspan(t * d + off, hd)) * scale;
                        best = std::max(best, scores[t]);
                    }
                    float total = 0.0f;
                    for (size_t t = 0; t < visible; ++t) {
                        scores[t] = std::exp(scores[t] - best);
                        total += scores[t];
                    }
                    for (size_t j = 0; j < hd; ++j) {
                        out[off + j] = 0.0f;
                    }
                    for (size_t t = 0; t < visible; ++t) {
                        const float a = scores[t] / total;
                        const float *v = values.data() + t * d + off;
                        for (size_t j = 0; j < hd; ++j) {
                            out[off + j] += a * v[j];
                        }
                    }
                }
            }
            linear_rows(heads_out, un, lw.attn_proj_w, lw.attn_proj_b, attn);

            for (int p = 0; p < n; ++p) {
                notify(ResidualSite::AttnOutput, l + 1, p, at(attn, p));
                const auto row = at(x, p), a = at(attn, p), r = at(pre, p);
                for (size_t j = 0; j < d; ++j) {
                    r[j] = row[j] + a[j];
                }
                notify(ResidualSite::PreMlp, l + 1, p, r);
                layernorm(r, lw.ln2_w, lw.ln2_b, cfg.layernorm_epsilon, at(normed, p));
            }
            linear_rows(normed, un, lw.fc_w, lw.fc_b, hidden4);
            for (float &v : hidden4) {
                v = gelu_tanh(v);
            }
            linear_rows(hidden4, un, lw.proj_w, lw.proj_b, mlp);

            for (int p = 0; p < n; ++p) {
                notify(ResidualSite::MlpOutput, l + 1, p, at(mlp, p));
                const auto row = at(x, p), r = at(pre, p), m = at(mlp, p);
                for (size_t j = 0; j < d; ++j) {
                    row[j] = r[j] + m[j];
                }
                notify(ResidualSite::BlockOutput, l + 1, p, row);
            }
        }

        const int first = mode == LogitsMode::Last ? n - 1 : 0;
        Tensor logits({mode == LogitsMode::None ? 0 : n - first, vocab});
        for (int p = first; p < n; ++p) {
            const auto row = std::span<const float>(x).subspan(static_cast<size_t>(p) * d, d);
            const auto fn = at(normed, p);
            layernorm(row, w.lnf_w, w.lnf_b, cfg.layernorm_epsilon, fn);
            notify(ResidualSite::FinalNorm, cfg.n_layers, p, fn);
            if (mode == LogitsMode::None) {
                continue;
            }
            auto out = logits.row(p - first);
            for (int v = 0; v < vocab; ++v) {
                out[static_cast<size_t>(v)] = dot(fn, w.token_embedding.row(v));
            }
        }

        cache.filled_ = start + n;
        return logits;
    }
};

Tensor forward(const ModelBundle &bundle, std::span<const TokenId> ids, KvCache &cache, ForwardHook *hook,
               LogitsMode mode) {
    return ForwardPass::run(bundle, ids, cache, hook, mode);
}

Tensor forward(const ModelBundle &bundle, std::span<const TokenId> ids, ForwardHook *hook, LogitsMode mode) {
    KvCache cache(bundle.config());
    return ForwardPass::run(bundle, ids, cache, hook, mode);
}

TokenId argmax_token(std::span<const float> logits) {
    TokenId best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<size_t>(best)]) {
            best = static_cast<TokenId>(i);
        }
    }
    return best;
}

namespace {

TokenId sample_token(std::span<const float> logits, float temperature, std::mt19937_64 &rng) {
    check(std::isfinite(temperature) && temperature > 0.0f, ErrorCode::InvalidArgument, "temperature must be > 0");
    float best = -INFINITY;
    for (float v : logits) {
        best = std::max(best, v);
    }
    std::vector<double> weights(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        weights[i] = std::exp(static_cast<double>(logits[i] - best) / temperature);
    }
    std::discrete_distribution<int> dist(weights.begin(), weights.end());
    return static_cast<TokenId>(dist(rng));
}

} // namespace

TokenSequence generate(const ModelBundle &bundle, const TokenSequence &prompt, const GenerateOptions &options,
                       ForwardHook *hooks) {
    check(options.max_new_tokens >= 0, ErrorCode::InvalidArgument, "max_new_tokens must be >= 0");
    TokenSequence out = prompt;
    if (options.max_new_tokens == 0) {
        return out;
    }
    check(!prompt.empty(), ErrorCode::InvalidArgument, "generation needs a non-empty prompt");
    check(prompt.size() + static_cast<size_t>(options.max_new_tokens) <= static_cast<size_t>(bundle.config().max_positions),
          ErrorCode::ContextOverflow, "prompt length + max_new_tokens exceeds max_positions");

    const auto eot = bundle.tokenizer().end_of_text();
    std::mt19937_64 rng(options.sampling ? options.sampling->seed : 0);
    auto pick = [&](const Tensor &logits) {
        const auto last = logits.row(logits.shape[0] - 1);
        return options.sampling ? sample_token(last, options.sampling->temperature, rng) : argmax_token(last);
    };
    auto append = [&](TokenId t) {
        out.ids.push_back(t);
        out.texts.push_back(bundle.tokenizer().token_bytes(t));
    };

    if (options.mode == DecodeMode::Cached) {
        KvCache cache = options.prefix ? *options.prefix : KvCache(bundle.config());
        check(cache.filled() < static_cast<int>(out.ids.size()), ErrorCode::InvalidArgument,
              "prefix cache must be shorter than the prompt");
        Tensor logits = forward(bundle, std::span<const TokenId>(out.ids).subspan(static_cast<size_t>(cache.filled())),
                                cache, hooks, LogitsMode::Last);
        for (int step = 0; step < options.max_new_tokens; ++step) {
            const TokenId t = pick(logits);
            append(t);
            if ((eot && t == *eot) || step + 1 == options.max_new_tokens) {
                break;
            }
            logits = forward(bundle, std::span<const TokenId>(&out.ids.back(), 1), cache, hooks, LogitsMode::Last);
        }
    } else {
        for (int step = 0; step < options.max_new_tokens; ++step) {
            const TokenId t = pick(forward(bundle, out.ids, hooks, LogitsMode::Last));
            append(t);
            if (eot && t == *eot) {
                break;
            }
        }
    }
    return out;
}

TokenSequence generate_greedy(const ModelBundle &bundle, const TokenSequence &prompt, int max_new_tokens,
                              ForwardHook *hooks, DecodeMode mode) {
    return generate(bundle, prompt, GenerateOptions{max_new_tokens, mode, std::nullopt, nullptr}, hooks);
}

} // namespace superscopes
