#include "superscopes/trace.hpp"

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "superscopes/error.hpp"
#include "superscopes/safetensors.hpp"

namespace superscopes {

namespace {

class TraceRecorder : public ForwardHook {
public:
    TraceRecorder(Tensor &hidden, Tensor &pre, Tensor &mlp, int n, int d)
        : hidden_(hidden), pre_(pre), mlp_(mlp), n_(n), d_(d) {}

    void on_residual(ResidualSite site, int layer, int position, std::span<float> value) override {
        switch (site) {
        case ResidualSite::BlockOutput: store(hidden_, layer, position, value); break;
        case ResidualSite::PreMlp: store(pre_, layer - 1, position, value); break;
        case ResidualSite::MlpOutput: store(mlp_, layer - 1, position, value); break;
        default: break;
        }
    }

private:
    void store(Tensor &t, int index, int position, std::span<const float> v) {
        const size_t off = (static_cast<size_t>(index) * static_cast<size_t>(n_) + static_cast<size_t>(position - 1)) *
                           static_cast<size_t>(d_);
        std::memcpy(t.data.data() + off, v.data(), v.size() * sizeof(float));
    }

    Tensor &hidden_;
    Tensor &pre_;
    Tensor &mlp_;
    int n_;
    int d_;
};

double l2(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

} // namespace

std::string_view to_string(ReprKind kind) {
    switch (kind) {
    case ReprKind::HiddenState: return "hidden";
    case ReprKind::PreMlpResidual: return "premlp";
    case ReprKind::MlpOutput: return "mlp";
    }
    return "hidden";
}

ReprKind parse_repr_kind(std::string_view text) {
    if (text == "hidden") return ReprKind::HiddenState;
    if (text == "premlp") return ReprKind::PreMlpResidual;
    if (text == "mlp") return ReprKind::MlpOutput;
    fail(ErrorCode::InvalidArgument, "unknown representation kind '" + std::string(text) + "' (hidden|premlp|mlp)");
}

ActivationTrace forward_with_trace(const ModelBundle &bundle, const TokenSequence &prompt, ForwardHook *hook) {
    const auto &cfg = bundle.config();
    const int n = static_cast<int>(prompt.size());
    check(n >= 1, ErrorCode::InvalidArgument, "cannot trace an empty prompt");
    check(n <= cfg.max_positions, ErrorCode::ContextOverflow, "prompt exceeds max_positions");

    ActivationTrace t;
    t.prompt_ = prompt;
    t.n_layers_ = cfg.n_layers;
    t.d_model_ = cfg.d_model;
    t.hidden_ = Tensor({cfg.n_layers + 1, n, cfg.d_model});
    t.pre_mlp_ = Tensor({cfg.n_layers, n, cfg.d_model});
    t.mlp_out_ = Tensor({cfg.n_layers, n, cfg.d_model});

    TraceRecorder recorder(t.hidden_, t.pre_mlp_, t.mlp_out_, n, cfg.d_model);
    HookChain chain;
    if (hook != nullptr) {
        chain.add(hook);
    }
    chain.add(&recorder);
    t.logits_ = forward(bundle, prompt.ids, &chain);
    return t;
}

void validate_selector(const ActivationTrace &trace, const ReprSelector &sel) {
    const int min_layer = sel.kind == ReprKind::HiddenState ? 0 : 1;
    check(sel.layer >= min_layer && sel.layer <= trace.n_layers(), ErrorCode::InvalidSelector,
          "layer " + std::to_string(sel.layer) + " is outside [" + std::to_string(min_layer) + ", " +
              std::to_string(trace.n_layers()) + "] for " + std::string(to_string(sel.kind)));
    check(sel.position >= 1 && sel.position <= trace.n_positions(), ErrorCode::InvalidSelector,
          "position " + std::to_string(sel.position) + " is outside [1, " + std::to_string(trace.n_positions()) + "]");
}

std::span<const float> ActivationTrace::view(const ReprSelector &sel) const {
    validate_selector(*this, sel);
    const Tensor *t = &hidden_;
    int index = sel.layer;
    if (sel.kind == ReprKind::PreMlpResidual) {
        t = &pre_mlp_;
        index = sel.layer - 1;
    } else if (sel.kind == ReprKind::MlpOutput) {
        t = &mlp_out_;
        index = sel.layer - 1;
    }
    const size_t d = static_cast<size_t>(d_model_);
    const size_t off = (static_cast<size_t>(index) * static_cast<size_t>(n_positions()) +
                        static_cast<size_t>(sel.position - 1)) * d;
    return {t->data.data() + off, d};
}

std::vector<float> select_repr(const ActivationTrace &trace, const ReprSelector &sel) {
    const auto v = trace.view(sel);
    return {v.begin(), v.end()};
}

int last_subject_position(const TokenSequence &prompt, std::string_view subject) {
    std::string text;
    std::vector<size_t> ends;
    for (const auto &piece : prompt.texts) {
        text += piece;
        ends.push_back(text.size());
    }
    const auto start = subject.empty() ? std::string::npos : text.find(subject);
    check(start != std::string::npos, ErrorCode::SubjectNotFound,
          "subject '" + std::string(subject) + "' does not occur in the prompt");

    // byte range of the subject's final (possibly multi-byte) character
    const size_t char_end = start + subject.size();
    size_t char_begin = char_end - 1;
    while (char_begin > start && (static_cast<unsigned char>(text[char_begin]) & 0xC0) == 0x80) {
        --char_begin;
    }

    int found = 0;
    size_t begin = 0;
    for (size_t j = 0; j < ends.size(); ++j) {
        if (begin < char_end && ends[j] > char_begin && ends[j] > begin) {
            found = static_cast<int>(j) + 1;
        }
        begin = ends[j];
    }
    check(found > 0, ErrorCode::SubjectNotFound, "subject does not align with any token");
    return found;
}

nlohmann::json trace_summary(const ActivationTrace &trace) {
    nlohmann::json tokens = nlohmann::json::array();
    for (size_t i = 0; i < trace.prompt().size(); ++i) {
        tokens.push_back({{"position", i + 1}, {"id", trace.prompt().ids[i]}, {"text", trace.prompt().texts[i]}});
    }
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l <= trace.n_layers(); ++l) {
        nlohmann::json row = {{"layer", l}};
        nlohmann::json hidden = nlohmann::json::array(), pre = nlohmann::json::array(), mlp = nlohmann::json::array();
        for (int p = 1; p <= trace.n_positions(); ++p) {
            hidden.push_back(l2(trace.view({ReprKind::HiddenState, l, p})));
            if (l >= 1) {
                pre.push_back(l2(trace.view({ReprKind::PreMlpResidual, l, p})));
                mlp.push_back(l2(trace.view({ReprKind::MlpOutput, l, p})));
            }
        }
        row["hidden_norm"] = hidden;
        if (l >= 1) {
            row["premlp_norm"] = pre;
            row["mlp_norm"] = mlp;
        }
        layers.push_back(row);
    }
    return {{"n_layers", trace.n_layers()}, {"n_positions", trace.n_positions()}, {"d_model", trace.d_model()},
            {"tokens", tokens}, {"layers", layers}};
}

void write_trace_tensors(const ActivationTrace &trace, const std::filesystem::path &path) {
    write_safetensors(path, {{"hidden", trace.hidden()}, {"pre_mlp", trace.pre_mlp()}, {"mlp_out", trace.mlp_out()}});
}

} // namespace superscopes
