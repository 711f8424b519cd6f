#include "superscopes/interpretation.hpp"

#include <algorithm>
#include <cmath>

#include "superscopes/error.hpp"

namespace superscopes {

Amplifier::Amplifier(double alpha) : alpha_(alpha) {
    check(std::isfinite(alpha) && alpha > 0.0, ErrorCode::InvalidArgument,
          "amplifier must be a positive finite number, got " + std::to_string(alpha));
}

AlphaGrid AlphaGrid::standard() {
    return AlphaGrid({1, 3, 6, 9, 12, 15});
}

AlphaGrid::AlphaGrid(std::vector<double> alphas, bool require_one) : alphas_(std::move(alphas)) {
    check(!alphas_.empty(), ErrorCode::InvalidArgument, "amplifier grid is empty");
    for (size_t i = 0; i < alphas_.size(); ++i) {
        (void)Amplifier(alphas_[i]);
        check(i == 0 || alphas_[i] > alphas_[i - 1], ErrorCode::InvalidArgument,
              "amplifier grid must be strictly ascending");
    }
    check(!require_one || contains_one(), ErrorCode::InvalidArgument, "amplifier grid must contain 1");
}

bool AlphaGrid::contains_one() const {
    return std::find(alphas_.begin(), alphas_.end(), 1.0) != alphas_.end();
}

std::vector<float> amplify(std::span<const float> v, const Amplifier &amp) {
    std::vector<float> out(v.size());
    const auto a = static_cast<float>(amp.alpha());
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = a * v[i];
        check(std::isfinite(out[i]), ErrorCode::Overflow, "amplified vector is not finite");
    }
    return out;
}

InterpretationResult interpret(const ModelBundle &bundle, const ActivationTrace &trace, const ReprSelector &sel,
                               const Amplifier &amp, const PatchSpec &spec, const ScoreRequest *scoring,
                               const PreparedTarget *prepared) {
    if (scoring != nullptr) {
        check(scoring->scorer != nullptr && !scoring->reference.empty(), ErrorCode::InvalidArgument,
              "scoring needs both a scorer and a non-empty reference");
    }
    const auto vector = amplify(trace.view(sel), amp);
    const PatchSpec resolved = spec.resolved_for(sel.layer);
    auto result = prepared != nullptr ? patch_generate(bundle, *prepared, resolved, vector)
                                      : patch_generate(bundle, resolved, vector);
    result.alpha = amp.alpha();
    if (scoring != nullptr) {
        // an empty interpretation cannot be embedded; it scores as dissimilar
        const double s = result.text.empty() ? 0.0 : scoring->scorer->score(result.text, scoring->reference);
        result.score = s;
        result.success = s >= scoring->threshold;
    }
    return result;
}

double select_best_alpha(std::span<const InterpretationResult> results) {
    check(!results.empty(), ErrorCode::InvalidArgument, "no results to choose from");
    const InterpretationResult *best = nullptr;
    for (const auto &r : results) {
        if (!r.score || std::isnan(*r.score)) {
            continue;
        }
        if (best == nullptr || *r.score > *best->score) {
            best = &r;
        }
    }
    return best != nullptr ? best->alpha : results.front().alpha;
}

SweepReport sweep(const ModelBundle &bundle, const ActivationTrace &trace, const ReprSelector &sel,
                  const AlphaGrid &grid, const PatchSpec &spec, const Scorer &scorer, const std::string &reference,
                  double threshold, const PreparedTarget *prepared) {
    check(!reference.empty(), ErrorCode::InvalidArgument, "sweep needs a non-empty reference");
    validate_selector(trace, sel);
    std::optional<PreparedTarget> own;
    if (prepared == nullptr) {
        prepared = &own.emplace(prepare_target(bundle, spec.target_prompt));
    }

    SweepReport report{sel, spec, reference, threshold, {}, 1.0};
    const ScoreRequest scoring{&scorer, reference, threshold};
    for (double alpha : grid.values()) {
        report.results.push_back(interpret(bundle, trace, sel, Amplifier(alpha), spec, &scoring, prepared));
    }
    report.best_alpha = select_best_alpha(report.results);
    return report;
}

std::optional<int> first_layer_at_or_above(std::span<const double> scores_by_layer, double threshold) {
    for (size_t i = 0; i < scores_by_layer.size(); ++i) {
        if (scores_by_layer[i] >= threshold) {
            return static_cast<int>(i) + 1;
        }
    }
    return std::nullopt;
}

ContextualizationResult find_contextualization_layer(const ModelBundle &bundle, const ActivationTrace &trace,
                                                     int position, const PatchSpec &spec, const Scorer &scorer,
                                                     const std::string &reference, double threshold) {
    check(threshold > 0.0 && threshold < 1.0, ErrorCode::InvalidArgument, "threshold must lie in (0, 1)");
    check(!reference.empty(), ErrorCode::InvalidArgument, "contextualization needs a non-empty reference");
    validate_selector(trace, {ReprKind::HiddenState, 1, position});

    ContextualizationResult out;
    std::vector<double> scores;
    const ScoreRequest scoring{&scorer, reference, threshold};
    const auto prepared = prepare_target(bundle, spec.target_prompt);
    for (int l = 1; l <= trace.n_layers(); ++l) {
        const auto r = interpret(bundle, trace, {ReprKind::HiddenState, l, position}, Amplifier(1.0), spec, &scoring,
                                 &prepared);
        out.per_layer.push_back({l, r.text, *r.score, *r.success});
        scores.push_back(*r.score);
    }
    out.layer = first_layer_at_or_above(scores, threshold);
    return out;
}

std::vector<SweepReport> backward_hidden_scan(const ModelBundle &bundle, const ActivationTrace &trace, int position,
                                              int contextual_layer, const AlphaGrid &grid, const PatchSpec &spec,
                                              const Scorer &scorer, const std::string &reference, double threshold) {
    check(contextual_layer >= 1 && contextual_layer <= trace.n_layers(), ErrorCode::InvalidArgument,
          "contextualization layer must lie in [1, L]");
    std::vector<SweepReport> reports;
    const auto prepared = prepare_target(bundle, spec.target_prompt);
    for (int l = contextual_layer - 1; l >= 1; --l) {
        reports.push_back(sweep(bundle, trace, {ReprKind::HiddenState, l, position}, grid, spec, scorer, reference,
                                threshold, &prepared));
    }
    return reports;
}

} // namespace superscopes
