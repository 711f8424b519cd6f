#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "superscopes/model.hpp"

namespace superscopes {

/// Which residual-stream component a selector addresses.
///   HiddenState     h at block output (layer 0 = embedding output)
///   PreMlpResidual  residual after attention is added, before the MLP is added
///   MlpOutput       the MLP branch, so that hidden == pre_mlp + mlp_out
enum class ReprKind { HiddenState, PreMlpResidual, MlpOutput };

std::string_view to_string(ReprKind kind);

/// Accepts "hidden", "premlp", "mlp".
ReprKind parse_repr_kind(std::string_view text);

struct ReprSelector {
    ReprKind kind = ReprKind::HiddenState;
    int layer = 0;     // [0..L]; 0 only for HiddenState
    int position = 1;  // 1-based

    bool operator==(const ReprSelector &) const = default;
};

/// Hidden states, pre-MLP residuals and MLP outputs of one source-prompt pass.
/// Immutable once captured.
class ActivationTrace {
public:
    const TokenSequence &prompt() const { return prompt_; }
    int n_layers() const { return n_layers_; }
    int n_positions() const { return static_cast<int>(prompt_.size()); }
    int d_model() const { return d_model_; }

    /// (L+1, n, d); row 0 is the embedding output.
    const Tensor &hidden() const { return hidden_; }
    /// (L, n, d); index l-1 holds layer l.
    const Tensor &pre_mlp() const { return pre_mlp_; }
    /// (L, n, d); index l-1 holds layer l.
    const Tensor &mlp_out() const { return mlp_out_; }
    /// Logits of the same pass, (n, vocab).
    const Tensor &logits() const { return logits_; }

    /// Read-only view of one (kind, layer, position) vector. Throws InvalidSelector.
    std::span<const float> view(const ReprSelector &sel) const;

private:
    friend ActivationTrace forward_with_trace(const ModelBundle &, const TokenSequence &, ForwardHook *);

    TokenSequence prompt_;
    int n_layers_ = 0;
    int d_model_ = 0;
    Tensor hidden_;
    Tensor pre_mlp_;
    Tensor mlp_out_;
    Tensor logits_;
};

/// Runs the prompt once and records every residual component. An optional
/// hook runs ahead of the recorder, so the trace reflects any edits it makes.
ActivationTrace forward_with_trace(const ModelBundle &bundle, const TokenSequence &prompt,
                                   ForwardHook *hook = nullptr);

/// Throws InvalidSelector when the selector does not address this trace.
void validate_selector(const ActivationTrace &trace, const ReprSelector &sel);

/// Copy of the addressed vector.
std::vector<float> select_repr(const ActivationTrace &trace, const ReprSelector &sel);

/// 1-based index of the last token overlapping the final character of the
/// subject's first occurrence in the prompt. Throws SubjectNotFound.
int last_subject_position(const TokenSequence &prompt, std::string_view subject);

/// Per-layer, per-position L2 norms of every component, plus the tokens.
nlohmann::json trace_summary(const ActivationTrace &trace);

/// Dumps hidden, pre_mlp and mlp_out into a tensor container.
void write_trace_tensors(const ActivationTrace &trace, const std::filesystem::path &path);

} // namespace superscopes
