#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "superscopes/patching.hpp"
#include "superscopes/scoring.hpp"
#include "superscopes/trace.hpp"

namespace superscopes {

inline constexpr double kDefaultThreshold = 0.3;

/// Positive, finite scale applied to a representation before patching.
class Amplifier {
public:
    /// Throws InvalidArgument unless alpha > 0 and finite.
    explicit Amplifier(double alpha);
    double alpha() const { return alpha_; }

private:
    double alpha_;
};

/// Strictly ascending amplifier values.
class AlphaGrid {
public:
    /// {1, 3, 6, 9, 12, 15}
    static AlphaGrid standard();

    /// Throws InvalidArgument if empty, unsorted, duplicated, non-positive, or
    /// (when require_one) missing 1.
    explicit AlphaGrid(std::vector<double> alphas, bool require_one = true);

    const std::vector<double> &values() const { return alphas_; }
    bool contains_one() const;

private:
    std::vector<double> alphas_;
};

/// alpha * v, elementwise in float. Throws Overflow when a result is not finite.
std::vector<float> amplify(std::span<const float> v, const Amplifier &amp);

/// Optional scoring of an interpretation against a reference description.
struct ScoreRequest {
    const Scorer *scorer = nullptr;
    std::string reference;
    double threshold = kDefaultThreshold;
};

/// Amplifies the selected representation and decodes it through the target
/// prompt. "same" target layers resolve to the selector's layer. With a scorer,
/// score and success (score >= threshold) are filled in. `prepared` must come
/// from spec.target_prompt; it saves re-running the target prefix.
InterpretationResult interpret(const ModelBundle &bundle, const ActivationTrace &trace, const ReprSelector &sel,
                               const Amplifier &amp, const PatchSpec &spec, const ScoreRequest *scoring = nullptr,
                               const PreparedTarget *prepared = nullptr);

struct SweepReport {
    ReprSelector selector;
    PatchSpec spec;
    std::string reference;
    double threshold = kDefaultThreshold;
    std::vector<InterpretationResult> results;  // one per grid value, ascending alpha
    double best_alpha = 1.0;
};

/// Highest score wins; exact ties go to the smaller alpha. Results must be in
/// ascending alpha order and scored. Unscored or NaN entries never win unless
/// nothing is scored, in which case the first alpha is returned.
double select_best_alpha(std::span<const InterpretationResult> results);

/// One interpret call per grid value, then select_best_alpha.
SweepReport sweep(const ModelBundle &bundle, const ActivationTrace &trace, const ReprSelector &sel,
                  const AlphaGrid &grid, const PatchSpec &spec, const Scorer &scorer, const std::string &reference,
                  double threshold = kDefaultThreshold, const PreparedTarget *prepared = nullptr);

struct LayerInterpretation {
    int layer;
    std::string text;
    double score;
    bool success;
};

struct ContextualizationResult {
    std::optional<int> layer;  // absent when no layer reaches the threshold
    std::vector<LayerInterpretation> per_layer;  // layers 1..L
};

/// Smallest 1-based layer whose score is >= threshold.
std::optional<int> first_layer_at_or_above(std::span<const double> scores_by_layer, double threshold);

/// Interprets the unamplified hidden state at `position` for layers 1..L and
/// reports the first one whose score reaches the threshold. Threshold must be in (0, 1).
ContextualizationResult find_contextualization_layer(const ModelBundle &bundle, const ActivationTrace &trace,
                                                     int position, const PatchSpec &spec, const Scorer &scorer,
                                                     const std::string &reference,
                                                     double threshold = kDefaultThreshold);

/// Sweeps hidden states at layers contextual_layer-1 down to 1. Empty when contextual_layer == 1.
std::vector<SweepReport> backward_hidden_scan(const ModelBundle &bundle, const ActivationTrace &trace, int position,
                                              int contextual_layer, const AlphaGrid &grid, const PatchSpec &spec,
                                              const Scorer &scorer, const std::string &reference,
                                              double threshold = kDefaultThreshold);

} // namespace superscopes
