#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "superscopes/model.hpp"

namespace superscopes {

/// Marker replaced by the literal "X" token in target prompts.
inline constexpr std::string_view kPlaceholder = "{}";

/// Few-shot entity-description prompt: the model continues with a short
/// description of whatever is patched into the final "X".
inline constexpr std::string_view kDefaultTargetPrompt =
    "Syria: Country in the Middle East, Leonardo DiCaprio: American actor, Samsung: South Korean multinational "
    "major appliance and consumer electronics corporation, {}";

/// Layer of the target pass whose block output gets overwritten.
struct TargetLayer {
    bool same_as_source = false;
    int layer = 0;

    static TargetLayer at(int layer) { return {false, layer}; }
    static TargetLayer same() { return {true, 0}; }

    int resolve(int source_layer) const { return same_as_source ? source_layer : layer; }

    /// "same" or a non-negative integer.
    static TargetLayer parse(std::string_view text);
    std::string to_string() const;

    bool operator==(const TargetLayer &) const = default;
};

struct PatchSpec {
    std::string target_prompt = std::string(kDefaultTargetPrompt);
    TargetLayer target_layer = TargetLayer::at(0);
    int max_new_tokens = 20;

    /// Copy with a "same" target resolved against the source layer.
    PatchSpec resolved_for(int source_layer) const;
};

struct InterpretationResult {
    std::string text;                // continuation, prompt excluded, trailing end-of-text dropped
    TokenSequence generated;         // new tokens only
    double alpha = 1.0;
    std::optional<double> score;
    std::optional<bool> success;     // present iff score is
};

/// Block-output replacements applied while a forward pass runs. Each
/// replacement fires when its (layer, position) is computed; under KV caching
/// that is exactly once per generation.
class InterventionSet : public ForwardHook {
public:
    struct Replacement {
        int layer;
        int position;  // 1-based
        std::vector<float> vector;
    };

    /// Throws InvalidArgument on a duplicate (layer, position) or non-finite values.
    void add(int layer, int position, std::vector<float> vector);

    /// Throws InvalidArgument for layers outside [0..L] and DimensionError for
    /// vectors whose length is not d_model.
    void validate(const ModelConfig &config) const;

    const std::vector<Replacement> &replacements() const { return replacements_; }
    const std::vector<int> &fire_counts() const { return fires_; }
    void reset_counters();
    bool empty() const { return replacements_.empty(); }

    void on_residual(ResidualSite site, int layer, int position, std::span<float> value) override;

private:
    std::vector<Replacement> replacements_;
    std::vector<int> fires_;
};

struct ResolvedTarget {
    TokenSequence tokens;
    int position;  // i*, 1-based
};

/// Substitutes "X" for the single marker, encodes, and locates the X token.
/// Throws BadTargetPrompt unless the marker occurs exactly once.
ResolvedTarget resolve_placeholder(const ModelBundle &bundle, std::string_view target_prompt);

/// A resolved target prompt with the KV cache of every token before i*. No
/// patch at i* can reach those positions, so the cache is reusable across
/// runs and safe to share between threads.
struct PreparedTarget {
    std::string prompt;
    ResolvedTarget target;
    KvCache prefix;
};

PreparedTarget prepare_target(const ModelBundle &bundle, std::string_view target_prompt);

/// Greedy continuation of `target` with the interventions active. `prefix`,
/// when given, must cache a leading part of `target` that no intervention touches.
InterpretationResult generate_with(const ModelBundle &bundle, const TokenSequence &target, int max_new_tokens,
                                   InterventionSet &interventions, DecodeMode mode = DecodeMode::Cached,
                                   const KvCache *prefix = nullptr);

/// Overwrites the target pass at (target layer, i*) with `vector` and decodes greedily.
/// The target layer must already be resolved (not "same").
InterpretationResult patch_generate(const ModelBundle &bundle, const PatchSpec &spec, std::span<const float> vector,
                                    DecodeMode mode = DecodeMode::Cached);

/// As above with the target prompt already prepared; spec.target_prompt must
/// match prepared.prompt.
InterpretationResult patch_generate(const ModelBundle &bundle, const PreparedTarget &prepared, const PatchSpec &spec,
                                    std::span<const float> vector, DecodeMode mode = DecodeMode::Cached);

/// The same target run with no intervention.
InterpretationResult baseline_generate(const ModelBundle &bundle, const PatchSpec &spec,
                                       DecodeMode mode = DecodeMode::Cached);

} // namespace superscopes
