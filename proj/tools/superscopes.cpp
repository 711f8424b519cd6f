// superscopes command-line interface.
//
//   superscopes --model-dir DIR trace --prompt "Diana, Princess of Wales"
//   superscopes --model-dir DIR sweep --prompt ... --subject ... --kind mlp --layer 3 --reference ...
//   superscopes --model-dir DIR eval --corpus assets/corpus/starter.json --out report.json
//   superscopes --model-dir DIR serve --port 8080
//
// Exit codes: 0 success, 1 usage error, 2 model or load error, 3 runtime error.

#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "superscopes/error.hpp"
#include "superscopes/harness.hpp"
#include "superscopes/service.hpp"

using namespace superscopes;
using nlohmann::json;

namespace {

constexpr int kUsageError = 1;
constexpr int kLoadError = 2;
constexpr int kRuntimeError = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string model_dir;
    bool json = false;

    std::string prompt;
    std::string subject;
    int token_index = 0;
    int layer = -1;
    std::string kind = "mlp";
    double alpha = 1.0;
    std::string alphas;
    std::string target_layer = "0";
    std::string target_prompt = std::string(kDefaultTargetPrompt);
    int max_new_tokens = 20;
    std::string reference;
    double threshold = kDefaultThreshold;
    std::string out;
    std::string embeddings;

    bool scan = false;
    std::string corpus;
    std::string layers = "1-7";
    std::string format;
    int workers = 1;

    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
};

std::string dump(const json &j) {
    return j.dump(2, ' ', false, json::error_handler_t::replace);
}

std::vector<double> parse_alphas(const std::string &text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception &) {
            throw UsageError("--alphas: \"" + item + "\" is not a number");
        }
    }
    if (out.empty()) throw UsageError("--alphas is empty");
    return out;
}

/// "1-7", "2", or "1,3,5".
std::vector<int> parse_layers(const std::string &text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    try {
        while (std::getline(ss, item, ',')) {
            if (const auto dash = item.find('-'); dash != std::string::npos && dash > 0) {
                const int lo = std::stoi(item.substr(0, dash)), hi = std::stoi(item.substr(dash + 1));
                if (lo > hi) throw std::invalid_argument(item);
                for (int l = lo; l <= hi; ++l) out.push_back(l);
            } else {
                out.push_back(std::stoi(item));
            }
        }
    } catch (const std::exception &) {
        throw UsageError("--layers: cannot parse \"" + text + "\"");
    }
    if (out.empty()) throw UsageError("--layers is empty");
    return out;
}

class Session {
public:
    explicit Session(const Options &o) : opts_(o) {
        if (o.model_dir.empty()) throw UsageError("--model-dir is required");
        bundle_.emplace(load_model(o.model_dir));
        if (!o.embeddings.empty()) {
            const std::filesystem::path dir = o.embeddings;
            scorer_ = std::make_shared<EmbeddingFileScorer>(dir / "manifest.json", dir / "embeddings.safetensors");
        } else {
            scorer_ = default_scorer(*bundle_);
        }
    }

    const ModelBundle &bundle() const { return *bundle_; }
    const Scorer &scorer() const { return *scorer_; }

    TokenSequence prompt() const {
        if (opts_.prompt.empty()) throw UsageError("--prompt is required");
        return encode(*bundle_, opts_.prompt);
    }

    int position(const TokenSequence &prompt) const {
        if (opts_.token_index != 0 && !opts_.subject.empty()) {
            throw UsageError("--subject and --token-index are mutually exclusive");
        }
        if (opts_.token_index != 0) return opts_.token_index;
        if (!opts_.subject.empty()) return last_subject_position(prompt, opts_.subject);
        return static_cast<int>(prompt.size());
    }

    PatchSpec spec() const {
        PatchSpec spec;
        spec.target_prompt = opts_.target_prompt;
        try {
            spec.target_layer = TargetLayer::parse(opts_.target_layer);
        } catch (const Error &e) {
            throw UsageError(std::string("--target-layer: ") + e.what());
        }
        spec.max_new_tokens = opts_.max_new_tokens;
        return spec;
    }

    ReprSelector selector(const TokenSequence &prompt) const {
        if (opts_.layer < 0) throw UsageError("--layer is required");
        ReprKind kind;
        try {
            kind = parse_repr_kind(opts_.kind);
        } catch (const Error &) {
            throw UsageError("--kind must be hidden, premlp or mlp");
        }
        return {kind, opts_.layer, position(prompt)};
    }

private:
    const Options &opts_;
    std::optional<ModelBundle> bundle_;
    ScorerHandle scorer_;
};

json result_json(const InterpretationResult &r) {
    json j{{"alpha", r.alpha}, {"text", r.text}};
    if (r.score) j["score"] = *r.score;
    if (r.success) j["success"] = *r.success;
    return j;
}

std::string quoted(const std::string &text) {
    return json(text).dump(-1, ' ', false, json::error_handler_t::replace);
}

int cmd_trace(const Options &o) {
    const Session s(o);
    const auto trace = forward_with_trace(s.bundle(), s.prompt());
    if (!o.out.empty()) write_trace_tensors(trace, o.out);
    const auto summary = trace_summary(trace);
    if (o.json) {
        std::cout << dump(summary) << "\n";
        return 0;
    }
    std::cout << trace.n_positions() << " tokens, " << trace.n_layers() << " layers, d_model " << trace.d_model()
              << "\n";
    for (const auto &t : summary.at("tokens")) {
        std::cout << "  " << t.at("position").get<int>() << "\t" << t.at("id").get<int>() << "\t"
                  << quoted(t.at("text").get<std::string>()) << "\n";
    }
    std::cout << "layer\t|h| at last token\t|mlp| at last token\n";
    for (const auto &row : summary.at("layers")) {
        std::cout << row.at("layer").get<int>() << "\t" << row.at("hidden_norm").back().get<double>() << "\t";
        if (row.contains("mlp_norm")) std::cout << row.at("mlp_norm").back().get<double>();
        std::cout << "\n";
    }
    if (!o.out.empty()) std::cout << "tensors written to " << o.out << "\n";
    return 0;
}

int cmd_interpret(const Options &o) {
    const Session s(o);
    const auto prompt = s.prompt();
    const auto trace = forward_with_trace(s.bundle(), prompt);
    const auto sel = s.selector(prompt);
    const ScoreRequest scoring{&s.scorer(), o.reference, o.threshold};
    const auto r = interpret(s.bundle(), trace, sel, Amplifier(o.alpha), s.spec(),
                             o.reference.empty() ? nullptr : &scoring);
    if (o.json) {
        json j = result_json(r);
        j["kind"] = to_string(sel.kind);
        j["layer"] = sel.layer;
        j["position"] = sel.position;
        j["token"] = prompt.texts[static_cast<size_t>(sel.position - 1)];
        std::cout << dump(j) << "\n";
        return 0;
    }
    std::cout << to_string(sel.kind) << " layer " << sel.layer << " token " << sel.position << " "
              << quoted(prompt.texts[static_cast<size_t>(sel.position - 1)]) << " alpha " << r.alpha << "\n";
    std::cout << quoted(r.text) << "\n";
    if (r.score) std::cout << "score " << *r.score << (*r.success ? " (success)" : "") << "\n";
    return 0;
}

json sweep_json(const SweepReport &rep) {
    json results = json::array();
    for (const auto &r : rep.results) results.push_back(result_json(r));
    return {{"kind", to_string(rep.selector.kind)},
            {"layer", rep.selector.layer},
            {"position", rep.selector.position},
            {"best_alpha", rep.best_alpha},
            {"results", results}};
}

void print_sweep(const SweepReport &rep) {
    std::cout << to_string(rep.selector.kind) << " layer " << rep.selector.layer << " token "
              << rep.selector.position << "\n";
    for (const auto &r : rep.results) {
        std::cout << (r.alpha == rep.best_alpha ? " *" : "  ") << " alpha " << r.alpha << "\tscore " << r.score.value_or(0)
                  << "\t" << quoted(r.text) << "\n";
    }
}

AlphaGrid grid_from(const Options &o, bool require_one) {
    try {
        return o.alphas.empty() ? AlphaGrid::standard() : AlphaGrid(parse_alphas(o.alphas), require_one);
    } catch (const Error &e) {
        throw UsageError(std::string("--alphas: ") + e.what());
    }
}

int cmd_sweep(const Options &o) {
    if (o.reference.empty()) throw UsageError("--reference is required");
    const Session s(o);
    const auto prompt = s.prompt();
    const auto trace = forward_with_trace(s.bundle(), prompt);
    const auto rep = sweep(s.bundle(), trace, s.selector(prompt), grid_from(o, false), s.spec(), s.scorer(), o.reference,
                           o.threshold);
    if (o.json) {
        std::cout << dump(sweep_json(rep)) << "\n";
    } else {
        print_sweep(rep);
    }
    return 0;
}

int cmd_contextualize(const Options &o) {
    if (o.reference.empty()) throw UsageError("--reference is required");
    const Session s(o);
    const auto prompt = s.prompt();
    const auto trace = forward_with_trace(s.bundle(), prompt);
    const int position = s.position(prompt);
    const auto result =
        find_contextualization_layer(s.bundle(), trace, position, s.spec(), s.scorer(), o.reference, o.threshold);
    std::vector<SweepReport> scan;
    if (o.scan && result.layer) {
        scan = backward_hidden_scan(s.bundle(), trace, position, *result.layer, grid_from(o, false), s.spec(),
                                    s.scorer(), o.reference, o.threshold);
    }
    if (o.json) {
        json per_layer = json::array();
        for (const auto &l : result.per_layer) {
            per_layer.push_back({{"layer", l.layer}, {"text", l.text}, {"score", l.score}, {"success", l.success}});
        }
        json j{{"layer_c", result.layer ? json(*result.layer) : json(nullptr)}, {"position", position},
               {"per_layer", per_layer}};
        if (o.scan) {
            j["backward_scan"] = json::array();
            for (const auto &rep : scan) j["backward_scan"].push_back(sweep_json(rep));
        }
        std::cout << dump(j) << "\n";
        return 0;
    }
    for (const auto &l : result.per_layer) {
        std::cout << "layer " << l.layer << "\tscore " << l.score << (l.success ? " *" : "") << "\t" << quoted(l.text)
                  << "\n";
    }
    std::cout << "contextualization layer: " << (result.layer ? std::to_string(*result.layer) : "none") << "\n";
    for (const auto &rep : scan) print_sweep(rep);
    return 0;
}

int cmd_eval(const Options &o) {
    if (o.corpus.empty()) throw UsageError("--corpus is required");
    const Session s(o);
    EvalConfig cfg;
    cfg.layers = parse_layers(o.layers);
    try {
        cfg.kind = parse_repr_kind(o.kind);
    } catch (const Error &) {
        throw UsageError("--kind must be hidden, premlp or mlp");
    }
    cfg.grid = grid_from(o, true);
    cfg.spec = s.spec();
    cfg.threshold = o.threshold;
    cfg.workers = o.workers;
    const auto report = run_eval(s.bundle(), load_corpus(o.corpus), cfg, s.scorer());

    ReportFormat format = ReportFormat::Json;
    if (o.format == "csv" || (o.format.empty() && std::filesystem::path(o.out).extension() == ".csv")) {
        format = ReportFormat::Csv;
    } else if (!o.format.empty() && o.format != "json") {
        throw UsageError("--format must be json or csv");
    }
    if (!o.out.empty()) emit_report(report, format, o.out);

    if (o.json) {
        std::cout << dump(report_to_json(report).at("layer_table")) << "\n";
        return 0;
    }
    size_t errors = 0;
    for (const auto &row : report.rows) errors += row.error ? 1 : 0;
    std::cout << report.rows.size() << " rows, " << errors << " errors\n";
    std::cout << "layer\tsuperscopes\tpatchscopes\ttotal\n";
    for (const auto &[layer, c] : report.table) {
        std::cout << layer << "\t" << c.superscopes_successes << "\t" << c.patchscopes_successes << "\t" << c.total
                  << "\n";
    }
    if (!o.out.empty()) std::cout << "report written to " << o.out << "\n";
    return 0;
}

Service *g_service = nullptr;

int cmd_serve(const Options &o) {
    if (o.model_dir.empty()) throw UsageError("--model-dir is required");
    SessionConfig cfg;
    cfg.model_dir = o.model_dir;
    cfg.target_prompt = o.target_prompt;
    cfg.target_layer = TargetLayer::parse(o.target_layer);
    cfg.grid = grid_from(o, false);
    cfg.threshold = o.threshold;
    cfg.max_new_tokens = o.max_new_tokens;
    cfg.host = o.host;
    cfg.port = o.port;
    if (!o.static_dir.empty()) cfg.static_dir = o.static_dir;

    ScorerFactory factory = default_scorer;
    if (!o.embeddings.empty()) {
        const std::filesystem::path dir = o.embeddings;
        auto store = std::make_shared<EmbeddingFileScorer>(dir / "manifest.json", dir / "embeddings.safetensors");
        factory = [store](const ModelBundle &) -> ScorerHandle { return store; };
    }
    Service service(cfg, factory);
    const int port = service.bind();
    service.load_async();
    std::cerr << "listening on http://" << cfg.host << ":" << port << " (loading " << cfg.model_dir << ")\n";
    g_service = &service;
    std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_service) g_service->stop();
    });
    service.listen();
    g_service = nullptr;
    return 0;
}

int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidSelector:
    case ErrorCode::SubjectNotFound:
    case ErrorCode::BadTargetPrompt:
    case ErrorCode::PromptTooLong:
    case ErrorCode::ContextOverflow:
    case ErrorCode::EmptyText: return kUsageError;
    case ErrorCode::MissingArtifact:
    case ErrorCode::SchemaViolation:
    case ErrorCode::CorruptWeights: return kLoadError;
    default: return kRuntimeError;
    }
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Amplify, patch and interpret residual-stream components of a GPT-2-class model"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--model-dir", o.model_dir, "Directory with config.json, model.safetensors, vocab.json, merges.txt")
        ->envname("SUPERSCOPES_MODEL_DIR");
    app.add_flag("--json", o.json, "Machine-readable output");

    auto add_source = [&](CLI::App *cmd) {
        cmd->add_option("--prompt", o.prompt, "Source prompt")->required();
        cmd->add_option("--subject", o.subject, "Inspect the last token of this substring");
        cmd->add_option("--token-index", o.token_index, "Inspect this 1-based token (default: last token)")
            ->check(CLI::PositiveNumber);
    };
    auto add_target = [&](CLI::App *cmd) {
        cmd->add_option("--target-layer", o.target_layer, "Target layer: 0, N or same")->capture_default_str();
        cmd->add_option("--target-prompt", o.target_prompt, "Target prompt containing one {} placeholder");
        cmd->add_option("--max-new-tokens", o.max_new_tokens, "Tokens to generate")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
    };
    auto add_scoring = [&](CLI::App *cmd, bool required) {
        auto ref = cmd->add_option("--reference", o.reference, "Reference description to score against");
        if (required) ref->required();
        cmd->add_option("--threshold", o.threshold, "Success threshold")->capture_default_str();
        cmd->add_option("--embeddings", o.embeddings, "Embedding store (manifest.json + embeddings.safetensors)");
    };
    auto add_selector = [&](CLI::App *cmd) {
        cmd->add_option("--layer", o.layer, "Source layer")->required();
        cmd->add_option("--kind", o.kind, "hidden, premlp or mlp")->capture_default_str();
    };

    auto trace = app.add_subcommand("trace", "Capture hidden states, pre-MLP residuals and MLP outputs");
    trace->add_option("--prompt", o.prompt, "Source prompt")->required();
    trace->add_option("--out", o.out, "Write the activations as a .safetensors file");

    auto interp = app.add_subcommand("interpret", "Amplify one representation and decode it");
    add_source(interp);
    add_selector(interp);
    interp->add_option("--alpha", o.alpha, "Amplifier")->capture_default_str();
    add_target(interp);
    add_scoring(interp, false);

    auto sw = app.add_subcommand("sweep", "Interpret over an amplifier grid and pick the best alpha");
    add_source(sw);
    add_selector(sw);
    sw->add_option("--alphas", o.alphas, "Comma-separated ascending amplifiers (default 1,3,6,9,12,15)");
    add_target(sw);
    add_scoring(sw, true);

    auto ctx = app.add_subcommand("contextualize", "Find the first layer whose hidden state matches the reference");
    add_source(ctx);
    add_target(ctx);
    add_scoring(ctx, true);
    ctx->add_flag("--scan", o.scan, "Also sweep hidden states below the contextualization layer");
    ctx->add_option("--alphas", o.alphas, "Amplifier grid for --scan");

    auto ev = app.add_subcommand("eval", "Run a corpus across layers and amplifiers");
    ev->add_option("--corpus", o.corpus, "JSON array of {source_prompt, subject, reference}")->required();
    ev->add_option("--layers", o.layers, "Layers, e.g. 1-7 or 2,4")->capture_default_str();
    ev->add_option("--kind", o.kind, "hidden, premlp or mlp")->capture_default_str();
    ev->add_option("--alphas", o.alphas, "Amplifier grid (must contain 1)");
    ev->add_option("--out", o.out, "Report file (.json or .csv)");
    ev->add_option("--format", o.format, "json or csv (default from --out extension)");
    ev->add_option("--workers", o.workers, "Concurrent corpus entries")->check(CLI::PositiveNumber);
    add_target(ev);
    add_scoring(ev, false);

    auto serve = app.add_subcommand("serve", "Serve the HTTP API");
    serve->add_option("--host", o.host, "Bind address")->capture_default_str();
    serve->add_option("--port", o.port, "Port (0 picks a free one)")->capture_default_str();
    serve->add_option("--static-dir", o.static_dir, "Directory served at /");
    serve->add_option("--alphas", o.alphas, "Default amplifier grid");
    add_target(serve);
    add_scoring(serve, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kUsageError;
    }

    try {
        if (*trace) return cmd_trace(o);
        if (*interp) return cmd_interpret(o);
        if (*sw) return cmd_sweep(o);
        if (*ctx) return cmd_contextualize(o);
        if (*ev) return cmd_eval(o);
        return cmd_serve(o);
    } catch (const UsageError &e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const Error &e) {
        std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
}
