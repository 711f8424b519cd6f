#include "superscopes/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "superscopes/error.hpp"
#include "superscopes/safetensors.hpp"

namespace superscopes {

namespace {

class FinalNormPool : public ForwardHook {
public:
    explicit FinalNormPool(size_t d) : sum_(d, 0.0) {}

    void on_residual(ResidualSite site, int, int, std::span<float> value) override {
        if (site != ResidualSite::FinalNorm) {
            return;
        }
        for (size_t j = 0; j < sum_.size(); ++j) {
            sum_[j] += value[j];
        }
        ++count_;
    }

    std::vector<float> mean() const {
        std::vector<float> out(sum_.size());
        for (size_t j = 0; j < sum_.size(); ++j) {
            out[j] = static_cast<float>(sum_[j] / static_cast<double>(count_));
        }
        return out;
    }

private:
    std::vector<double> sum_;
    int count_ = 0;
};

} // namespace

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    check(a.size() == b.size(), ErrorCode::DimensionError, "cosine of vectors with different lengths");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) {
        return 0.0;
    }
    return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

std::vector<float> HostModelScorer::embed(std::string_view text) const {
    constexpr size_t kMemoLimit = 4096;
    {
        std::lock_guard lock(mutex_);
        if (auto it = memo_.find(std::string(text)); it != memo_.end()) {
            return it->second;
        }
    }
    auto v = compute(text);
    std::lock_guard lock(mutex_);
    if (memo_.size() >= kMemoLimit) {
        memo_.clear();
    }
    memo_.emplace(std::string(text), v);
    return v;
}

std::vector<float> HostModelScorer::compute(std::string_view text) const {
    check(!text.empty(), ErrorCode::EmptyText, "cannot embed empty text");
    auto ids = bundle_.tokenizer().encode(text);
    check(!ids.empty(), ErrorCode::EmptyText, "text encodes to no tokens");
    ids.resize(std::min(ids.size(), static_cast<size_t>(bundle_.config().max_positions)));
    FinalNormPool pool(static_cast<size_t>(bundle_.config().d_model));
    forward(bundle_, ids, &pool, LogitsMode::None);
    return pool.mean();
}

double HostModelScorer::score(std::string_view a, std::string_view b) const {
    return cosine_similarity(embed(a), embed(b));
}

ScorerHandle default_scorer(const ModelBundle &bundle) {
    return std::make_shared<HostModelScorer>(bundle);
}

std::string text_key(std::string_view text) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

EmbeddingFileScorer::EmbeddingFileScorer(const std::filesystem::path &manifest_json,
                                         const std::filesystem::path &embeddings) {
    std::ifstream in(manifest_json);
    check(static_cast<bool>(in), ErrorCode::MissingArtifact, "cannot open " + manifest_json.string());
    try {
        manifest_ = nlohmann::json::parse(in).get<std::unordered_map<std::string, std::string>>();
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::SchemaViolation, "embedding manifest: " + std::string(e.what()));
    }
    vectors_ = read_safetensors(embeddings);
    std::optional<size_t> dim;
    for (const auto &[text, key] : manifest_) {
        auto it = vectors_.find(key);
        check(it != vectors_.end(), ErrorCode::SchemaViolation, "manifest key " + key + " has no stored embedding");
        check(it->second.ndim() == 1, ErrorCode::SchemaViolation, "embedding " + key + " must be one-dimensional");
        check(!dim || *dim == it->second.data.size(), ErrorCode::SchemaViolation, "embeddings differ in dimension");
        dim = it->second.data.size();
    }
}

std::span<const float> EmbeddingFileScorer::embedding(std::string_view text) const {
    check(!text.empty(), ErrorCode::EmptyText, "cannot score empty text");
    auto it = manifest_.find(std::string(text));
    check(it != manifest_.end(), ErrorCode::MissingEmbedding, "no precomputed embedding for '" + std::string(text) + "'");
    return vectors_.at(it->second).data;
}

double EmbeddingFileScorer::score(std::string_view a, std::string_view b) const {
    return cosine_similarity(embedding(a), embedding(b));
}

void write_embedding_store(const std::filesystem::path &dir, const std::map<std::string, std::vector<float>> &embeddings) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::object();
    TensorMap tensors;
    for (const auto &[text, vec] : embeddings) {
        const auto key = text_key(text);
        manifest[text] = key;
        tensors[key] = Tensor({static_cast<int64_t>(vec.size())}, vec);
    }
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(1) << "\n";
    check(static_cast<bool>(out), ErrorCode::IoError, "cannot write manifest.json");
    write_safetensors(dir / "embeddings.safetensors", tensors);
}

} // namespace superscopes
