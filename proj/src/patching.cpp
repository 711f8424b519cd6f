#include "superscopes/patching.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>

#include "superscopes/error.hpp"

namespace superscopes {

TargetLayer TargetLayer::parse(std::string_view text) {
    if (text == "same") {
        return same();
    }
    int layer = -1;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), layer);
    check(ec == std::errc() && ptr == text.data() + text.size() && layer >= 0, ErrorCode::InvalidArgument,
          "target layer must be 'same' or a non-negative integer, got '" + std::string(text) + "'");
    return at(layer);
}

std::string TargetLayer::to_string() const {
    return same_as_source ? "same" : std::to_string(layer);
}

PatchSpec PatchSpec::resolved_for(int source_layer) const {
    PatchSpec out = *this;
    out.target_layer = TargetLayer::at(target_layer.resolve(source_layer));
    return out;
}

void InterventionSet::add(int layer, int position, std::vector<float> vector) {
    for (const auto &r : replacements_) {
        check(r.layer != layer || r.position != position, ErrorCode::InvalidArgument,
              "duplicate replacement at layer " + std::to_string(layer) + ", position " + std::to_string(position));
    }
    check(std::all_of(vector.begin(), vector.end(), [](float v) { return std::isfinite(v); }),
          ErrorCode::InvalidArgument, "replacement vector contains non-finite values");
    replacements_.push_back({layer, position, std::move(vector)});
    fires_.push_back(0);
}

void InterventionSet::validate(const ModelConfig &config) const {
    for (const auto &r : replacements_) {
        check(r.layer >= 0 && r.layer <= config.n_layers, ErrorCode::InvalidArgument,
              "target layer " + std::to_string(r.layer) + " is outside [0, " + std::to_string(config.n_layers) + "]");
        check(r.position >= 1 && r.position <= config.max_positions, ErrorCode::InvalidArgument,
              "target position out of range");
        check(r.vector.size() == static_cast<size_t>(config.d_model), ErrorCode::DimensionError,
              "replacement has " + std::to_string(r.vector.size()) + " elements, model width is " +
                  std::to_string(config.d_model));
    }
}

void InterventionSet::reset_counters() {
    std::fill(fires_.begin(), fires_.end(), 0);
}

void InterventionSet::on_residual(ResidualSite site, int layer, int position, std::span<float> value) {
    if (site != ResidualSite::BlockOutput) {
        return;
    }
    for (size_t k = 0; k < replacements_.size(); ++k) {
        const auto &r = replacements_[k];
        if (r.layer == layer && r.position == position) {
            std::memcpy(value.data(), r.vector.data(), value.size() * sizeof(float));
            ++fires_[k];
        }
    }
}

ResolvedTarget resolve_placeholder(const ModelBundle &bundle, std::string_view target_prompt) {
    const auto first = target_prompt.find(kPlaceholder);
    check(first != std::string_view::npos, ErrorCode::BadTargetPrompt, "target prompt has no '{}' placeholder");
    check(target_prompt.find(kPlaceholder, first + kPlaceholder.size()) == std::string_view::npos,
          ErrorCode::BadTargetPrompt, "target prompt has more than one '{}' placeholder");

    std::string text(target_prompt.substr(0, first));
    const size_t x_offset = text.size();
    text += 'X';
    text += target_prompt.substr(first + kPlaceholder.size());

    ResolvedTarget out{encode(bundle, text), 0};
    size_t begin = 0;
    for (size_t j = 0; j < out.tokens.size(); ++j) {
        const size_t end = begin + out.tokens.texts[j].size();
        if (begin <= x_offset && x_offset < end) {
            out.position = static_cast<int>(j) + 1;
            break;
        }
        begin = end;
    }
    check(out.position > 0, ErrorCode::BadTargetPrompt, "placeholder token could not be located");
    return out;
}

PreparedTarget prepare_target(const ModelBundle &bundle, std::string_view target_prompt) {
    PreparedTarget p{std::string(target_prompt), resolve_placeholder(bundle, target_prompt), KvCache(bundle.config())};
    const auto ids = std::span<const TokenId>(p.target.tokens.ids);
    if (p.target.position > 1) {
        forward(bundle, ids.first(static_cast<size_t>(p.target.position - 1)), p.prefix, nullptr, LogitsMode::None);
    }
    return p;
}

InterpretationResult generate_with(const ModelBundle &bundle, const TokenSequence &target, int max_new_tokens,
                                   InterventionSet &interventions, DecodeMode mode, const KvCache *prefix) {
    interventions.validate(bundle.config());
    GenerateOptions options{max_new_tokens, mode, std::nullopt, mode == DecodeMode::Cached ? prefix : nullptr};
    const auto out = generate(bundle, target, options, interventions.empty() ? nullptr : &interventions);

    InterpretationResult r;
    r.generated.ids.assign(out.ids.begin() + static_cast<ptrdiff_t>(target.size()), out.ids.end());
    r.generated.texts.assign(out.texts.begin() + static_cast<ptrdiff_t>(target.size()), out.texts.end());
    auto ids = std::span<const TokenId>(r.generated.ids);
    const auto eot = bundle.tokenizer().end_of_text();
    if (!ids.empty() && eot && ids.back() == *eot) {
        ids = ids.first(ids.size() - 1);
    }
    r.text = decode(bundle, ids);
    return r;
}

InterpretationResult patch_generate(const ModelBundle &bundle, const PatchSpec &spec, std::span<const float> vector,
                                    DecodeMode mode) {
    return patch_generate(bundle, prepare_target(bundle, spec.target_prompt), spec, vector, mode);
}

InterpretationResult patch_generate(const ModelBundle &bundle, const PreparedTarget &prepared, const PatchSpec &spec,
                                    std::span<const float> vector, DecodeMode mode) {
    check(spec.target_prompt == prepared.prompt, ErrorCode::InvalidArgument,
          "prepared target does not match the spec's target prompt");
    check(!spec.target_layer.same_as_source, ErrorCode::InvalidArgument,
          "target layer 'same' must be resolved against a source layer before patching");
    check(vector.size() == static_cast<size_t>(bundle.config().d_model), ErrorCode::DimensionError,
          "patch vector has " + std::to_string(vector.size()) + " elements, model width is " +
              std::to_string(bundle.config().d_model));
    check(spec.max_new_tokens >= 1, ErrorCode::InvalidArgument, "max_new_tokens must be >= 1");

    InterventionSet patch;
    patch.add(spec.target_layer.layer, prepared.target.position, {vector.begin(), vector.end()});
    return generate_with(bundle, prepared.target.tokens, spec.max_new_tokens, patch, mode, &prepared.prefix);
}

InterpretationResult baseline_generate(const ModelBundle &bundle, const PatchSpec &spec, DecodeMode mode) {
    check(spec.max_new_tokens >= 1, ErrorCode::InvalidArgument, "max_new_tokens must be >= 1");
    const auto target = resolve_placeholder(bundle, spec.target_prompt);
    InterventionSet none;
    return generate_with(bundle, target.tokens, spec.max_new_tokens, none, mode);
}

} // namespace superscopes
