#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "superscopes/tensor.hpp"
#include "superscopes/tokenizer.hpp"

namespace superscopes {

struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int vocab_size = 0;
    int max_positions = 0;
    float layernorm_epsilon = 1e-5f;

    int head_dim() const { return d_model / n_heads; }

    /// Throws SchemaViolation on non-positive dimensions or d_model % n_heads != 0.
    void validate() const;

    /// Reads the GPT-2 config keys n_layer, n_head, n_embd, n_positions, vocab_size
    /// (and layer_norm_epsilon when present).
    static ModelConfig from_json(const nlohmann::json &j);
    nlohmann::json to_json() const;

    bool operator==(const ModelConfig &) const = default;
};

struct TensorSpec {
    std::string name;
    std::vector<int64_t> shape;
};

/// Every tensor the architecture requires, in canonical order. Linear weights
/// use the (in, out) layout of the GPT-2 checkpoints; the unembedding is tied
/// to the token embedding.
std::vector<TensorSpec> weight_schema(const ModelConfig &config);

int64_t parameter_count(const ModelConfig &config);

struct LayerWeights {
    Tensor ln1_w, ln1_b;
    Tensor attn_qkv_w, attn_qkv_b;
    Tensor attn_proj_w, attn_proj_b;
    Tensor ln2_w, ln2_b;
    Tensor fc_w, fc_b;
    Tensor proj_w, proj_b;
};

struct Weights {
    Tensor token_embedding;
    Tensor position_embedding;
    std::vector<LayerWeights> layers;
    Tensor lnf_w, lnf_b;
};

/// Immutable after construction; share freely across threads.
class ModelBundle {
public:
    /// Validates shapes against the schema (SchemaViolation) and values for
    /// finiteness (CorruptWeights). Names may carry a "transformer." prefix;
    /// tensors outside the schema are ignored.
    static ModelBundle from_tensors(const ModelConfig &config, const TensorMap &tensors, Tokenizer tokenizer);

    const ModelConfig &config() const { return config_; }
    const Weights &weights() const { return weights_; }
    const Tokenizer &tokenizer() const { return tokenizer_; }

    /// FNV-1a 64 over schema names, shapes and values, as 16 hex digits.
    const std::string &hash() const { return hash_; }

    /// Schema-ordered tensor map, suitable for write_safetensors.
    TensorMap tensors() const;

private:
    ModelConfig config_;
    Weights weights_;
    Tokenizer tokenizer_;
    std::string hash_;
};

/// model_dir holds config.json, model.safetensors, vocab.json and merges.txt.
ModelBundle load_model(const std::filesystem::path &model_dir);

/// Writes the four files load_model expects.
void save_model(const ModelBundle &bundle, const std::filesystem::path &model_dir);

/// Shape problems found in the bundle's tensors. Empty when the bundle is sound.
std::vector<std::string> shape_audit(const ModelBundle &bundle);

TokenSequence encode(const ModelBundle &bundle, std::string_view text);
TokenSequence make_sequence(const ModelBundle &bundle, std::span<const TokenId> ids);
std::string decode(const ModelBundle &bundle, std::span<const TokenId> ids);

/// Per-layer keys and values for the positions already processed.
/// Storage is position-major: [position][head * head_dim + j].
class KvCache {
public:
    explicit KvCache(const ModelConfig &config);

    int filled() const { return filled_; }
    int capacity() const { return capacity_; }

    std::span<const float> keys(int layer) const { return keys_[static_cast<size_t>(layer)]; }
    std::span<const float> values(int layer) const { return values_[static_cast<size_t>(layer)]; }

private:
    friend class ForwardPass;

    int d_model_;
    int capacity_;
    int filled_ = 0;
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
};

enum class ResidualSite {
    BlockOutput,  // hidden state; layer 0 is the embedding output
    PreMlp,       // residual after the attention branch, before the MLP branch
    MlpOutput,    // the MLP branch's contribution
    AttnOutput,   // the attention branch's contribution
    FinalNorm,    // final layernorm output (layer == n_layers)
};

/// Called as soon as each (site, layer, position) value is computed.
/// Positions are 1-based and absolute. Writes to `value` propagate into the
/// rest of the computation.
class ForwardHook {
public:
    virtual ~ForwardHook() = default;
    virtual void on_residual(ResidualSite site, int layer, int position, std::span<float> value) = 0;
};

/// Forwards to several hooks in order.
class HookChain : public ForwardHook {
public:
    HookChain() = default;
    HookChain(std::initializer_list<ForwardHook *> hooks) : hooks_(hooks) {}

    void add(ForwardHook *hook) { hooks_.push_back(hook); }
    void on_residual(ResidualSite site, int layer, int position, std::span<float> value) override;

private:
    std::vector<ForwardHook *> hooks_;
};

enum class LogitsMode {
    All,
    Last,
    None,  // final layernorm still runs (and reaches hooks); no unembedding
};

/// Runs the new tokens through the model, appending to `cache`.
/// Returns logits of shape (n_new, vocab), (1, vocab) in Last mode, (0, vocab) in None mode.
Tensor forward(const ModelBundle &bundle, std::span<const TokenId> ids, KvCache &cache,
               ForwardHook *hook = nullptr, LogitsMode mode = LogitsMode::All);

/// Uncached forward from position 1.
Tensor forward(const ModelBundle &bundle, std::span<const TokenId> ids, ForwardHook *hook = nullptr,
               LogitsMode mode = LogitsMode::All);

enum class DecodeMode {
    Cached,     // prompt once, then one token per step through the KV cache
    Recompute,  // full forward over the whole sequence every step
};

struct SamplingOptions {
    float temperature = 1.0f;
    uint64_t seed = 0;
};

struct GenerateOptions {
    int max_new_tokens = 20;
    DecodeMode mode = DecodeMode::Cached;
    std::optional<SamplingOptions> sampling;  // greedy when absent
    /// Cached mode only: a cache already holding the prompt's first
    /// prefix->filled() positions. It is copied, never modified.
    const KvCache *prefix = nullptr;
};

/// Argmax decoding, ties to the smaller id. Stops after max_new_tokens or after
/// emitting end-of-text (which stays in the result). Returns prompt + new tokens.
TokenSequence generate_greedy(const ModelBundle &bundle, const TokenSequence &prompt, int max_new_tokens,
                              ForwardHook *hooks = nullptr, DecodeMode mode = DecodeMode::Cached);

TokenSequence generate(const ModelBundle &bundle, const TokenSequence &prompt, const GenerateOptions &options,
                       ForwardHook *hooks = nullptr);

TokenId argmax_token(std::span<const float> logits);

} // namespace superscopes
