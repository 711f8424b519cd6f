#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "superscopes/model.hpp"

namespace superscopes {

/// Text-pair similarity in [-1, 1]. Implementations must be reflexive
/// (score(a, a) == 1 for non-empty a) and symmetric.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual double score(std::string_view a, std::string_view b) const = 0;
};

using ScorerHandle = std::shared_ptr<const Scorer>;

/// Cosine similarity accumulated in double. Zero vectors score 0.
/// Throws DimensionError on length mismatch.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

/// Mean-pooled final-layernorm states of the host model, compared by cosine.
/// Holds a reference to the bundle, which must outlive the scorer. Embeddings
/// are memoized; concurrent calls are safe.
class HostModelScorer : public Scorer {
public:
    explicit HostModelScorer(const ModelBundle &bundle) : bundle_(bundle) {}

    /// Throws EmptyText for empty input. Texts longer than the context are truncated.
    std::vector<float> embed(std::string_view text) const;

    double score(std::string_view a, std::string_view b) const override;

private:
    std::vector<float> compute(std::string_view text) const;

    const ModelBundle &bundle_;
    mutable std::mutex mutex_;
    mutable std::unordered_map<std::string, std::vector<float>> memo_;
};

ScorerHandle default_scorer(const ModelBundle &bundle);

/// Scores from precomputed sentence embeddings, e.g. exported offline from an
/// external encoder. A JSON manifest maps each text to a key; a tensor
/// container maps each key to its embedding vector.
class EmbeddingFileScorer : public Scorer {
public:
    EmbeddingFileScorer(const std::filesystem::path &manifest_json, const std::filesystem::path &embeddings);

    /// Throws MissingEmbedding for texts absent from the manifest.
    std::span<const float> embedding(std::string_view text) const;

    double score(std::string_view a, std::string_view b) const override;

    size_t size() const { return manifest_.size(); }

private:
    std::unordered_map<std::string, std::string> manifest_;
    TensorMap vectors_;
};

/// FNV-1a 64 of the UTF-8 bytes, as 16 hex digits. Used as the key in
/// embedding stores written by write_embedding_store.
std::string text_key(std::string_view text);

/// Writes <dir>/manifest.json and <dir>/embeddings.safetensors.
void write_embedding_store(const std::filesystem::path &dir, const std::map<std::string, std::vector<float>> &embeddings);

/// Adapts any callable; used for synthetic scorers in tests and experiments.
class FunctionScorer : public Scorer {
public:
    using Fn = std::function<double(std::string_view, std::string_view)>;
    explicit FunctionScorer(Fn fn) : fn_(std::move(fn)) {}
    double score(std::string_view a, std::string_view b) const override { return fn_(a, b); }

private:
    Fn fn_;
};

} // namespace superscopes
