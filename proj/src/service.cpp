#include "superscopes/service.hpp"

#include <cmath>
#include <condition_variable>
#include <mutex>
#include <set>
#include <thread>

#include <httplib.h>

#include "superscopes/error.hpp"

namespace superscopes {

using nlohmann::json;

namespace {

struct ApiError {
    int status;
    std::string code;
    std::string message;
    std::optional<std::string> field;
};

[[noreturn]] void reject(int status, std::string code, std::string message, std::optional<std::string> field = {}) {
    throw ApiError{status, std::move(code), std::move(message), std::move(field)};
}

[[noreturn]] void invalid(const std::string &field, const std::string &message) {
    reject(400, "ValidationError", message, field);
}

ApiResponse error_response(const ApiError &e) {
    json body{{"code", e.code}, {"message", e.message}};
    if (e.field) body["field"] = *e.field;
    return {e.status, body};
}

int status_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::PromptTooLong:
    case ErrorCode::ContextOverflow: return 413;
    case ErrorCode::InvalidSelector:
    case ErrorCode::SubjectNotFound:
    case ErrorCode::Overflow: return 422;
    case ErrorCode::BadTargetPrompt:
    case ErrorCode::EmptyText:
    case ErrorCode::InvalidArgument: return 400;
    default: return 500;
    }
}

std::optional<std::string> field_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::PromptTooLong: return "prompt";
    case ErrorCode::SubjectNotFound: return "subject";
    case ErrorCode::BadTargetPrompt: return "target_prompt";
    case ErrorCode::Overflow: return "alpha";
    default: return std::nullopt;
    }
}

/// Typed access to a request object; every failure is a 400 naming the field.
class Fields {
public:
    Fields(const json &body, std::set<std::string> allowed) : body_(body) {
        for (const auto &[key, value] : body.items()) {
            if (!allowed.contains(key)) invalid(key, "unknown field \"" + key + "\"");
        }
    }

    bool has(const std::string &key) const { return body_.contains(key) && !body_.at(key).is_null(); }

    std::string string(const std::string &key) const {
        if (!has(key)) invalid(key, "\"" + key + "\" is required");
        const json &v = body_.at(key);
        if (!v.is_string()) invalid(key, "\"" + key + "\" must be a string");
        auto s = v.get<std::string>();
        if (s.empty()) invalid(key, "\"" + key + "\" must not be empty");
        return s;
    }

    std::optional<std::string> optional_string(const std::string &key) const {
        return has(key) ? std::optional(string(key)) : std::nullopt;
    }

    int integer(const std::string &key) const {
        if (!has(key)) invalid(key, "\"" + key + "\" is required");
        const json &v = body_.at(key);
        if (!v.is_number_integer()) invalid(key, "\"" + key + "\" must be an integer");
        const auto n = v.get<int64_t>();
        if (n < INT32_MIN || n > INT32_MAX) invalid(key, "\"" + key + "\" is out of range");
        return static_cast<int>(n);
    }

    std::optional<int> optional_integer(const std::string &key) const {
        return has(key) ? std::optional(integer(key)) : std::nullopt;
    }

    std::optional<double> optional_number(const std::string &key) const {
        if (!has(key)) return std::nullopt;
        const json &v = body_.at(key);
        if (!v.is_number()) invalid(key, "\"" + key + "\" must be a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) invalid(key, "\"" + key + "\" must be finite");
        return d;
    }

    const json &raw(const std::string &key) const { return body_.at(key); }

private:
    const json &body_;
};

json token_list(const TokenSequence &tokens, int first_position = 1) {
    json out = json::array();
    for (size_t i = 0; i < tokens.size(); ++i) {
        out.push_back({{"id", tokens.ids[i]}, {"text", tokens.texts[i]}, {"position", first_position + static_cast<int>(i)}});
    }
    return out;
}

json target_layer_json(const TargetLayer &t) {
    return t.same_as_source ? json("same") : json(t.layer);
}

} // namespace

struct Service::State {
    enum class Phase { Idle, Loading, Ready, Failed };

    struct Loaded {
        std::shared_ptr<const ModelBundle> bundle;
        ScorerHandle scorer;
    };

    mutable std::mutex mutex;
    std::condition_variable changed;
    Phase phase = Phase::Idle;
    std::string failure;
    std::shared_ptr<const Loaded> loaded;
    std::thread loader;
};

struct Service::Http {
    httplib::Server server;
};

namespace {

/// One request against a loaded model.
class Handler {
public:
    Handler(const SessionConfig &session, const ModelBundle &bundle, const Scorer &scorer)
        : session_(session), bundle_(bundle), scorer_(scorer) {}

    json model_info() const {
        const auto &c = bundle_.config();
        const auto &tok = bundle_.tokenizer();
        json eot = tok.end_of_text() ? json(*tok.end_of_text()) : json(nullptr);
        return {
            {"config",
             {{"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"vocab_size", c.vocab_size},
              {"max_positions", c.max_positions},
              {"layernorm_epsilon", c.layernorm_epsilon}}},
            {"parameter_count", parameter_count(c)},
            {"tokenizer", {{"vocab_size", tok.vocab_size()}, {"merges", tok.merge_count()}, {"end_of_text", eot}}},
            {"hash", bundle_.hash()},
            {"defaults",
             {{"target_prompt", session_.target_prompt},
              {"target_layer", target_layer_json(session_.target_layer)},
              {"alphas", session_.grid.values()},
              {"threshold", session_.threshold},
              {"max_new_tokens", session_.max_new_tokens}}},
        };
    }

    json tokenize(const json &body) const {
        const Fields f(body, {"prompt"});
        const auto tokens = encode(bundle_, f.string("prompt"));
        return {{"tokens", token_list(tokens)}, {"count", tokens.size()}};
    }

    json interpret_request(const json &body) const {
        const Fields f(body, {"prompt", "position", "subject", "kind", "layer", "alpha", "target_layer",
                              "target_prompt", "max_new_tokens", "reference", "threshold"});
        const auto source = source_of(f);
        const ReprSelector sel = selector_of(f, source);
        const PatchSpec spec = spec_of(f);
        const double alpha = f.optional_number("alpha").value_or(1.0);
        if (alpha <= 0.0) invalid("alpha", "\"alpha\" must be positive");
        const auto reference = f.optional_string("reference");
        const double threshold = threshold_of(f);

        const ScoreRequest scoring{&scorer_, reference.value_or(""), threshold};
        const auto r = interpret(bundle_, source.trace, sel, Amplifier(alpha), spec, reference ? &scoring : nullptr);
        json out = result_json(r);
        out["kind"] = to_string(sel.kind);
        out["layer"] = sel.layer;
        out["position"] = sel.position;
        out["target_layer"] = spec.target_layer.resolve(sel.layer);
        return out;
    }

    json sweep_request(const json &body) const {
        const Fields f(body, {"prompt", "position", "subject", "kind", "layer", "alphas", "target_layer",
                              "target_prompt", "max_new_tokens", "reference", "threshold"});
        const auto source = source_of(f);
        const ReprSelector sel = selector_of(f, source);
        const PatchSpec spec = spec_of(f);
        const AlphaGrid grid = grid_of(f);
        const auto reference = f.string("reference");
        const auto report = sweep(bundle_, source.trace, sel, grid, spec, scorer_, reference, threshold_of(f));

        json results = json::array();
        for (const auto &r : report.results) results.push_back(result_json(r));
        return {{"results", results},
                {"best_alpha", report.best_alpha},
                {"kind", to_string(sel.kind)},
                {"layer", sel.layer},
                {"position", sel.position},
                {"target_layer", spec.target_layer.resolve(sel.layer)},
                {"threshold", report.threshold}};
    }

    json contextualize_request(const json &body) const {
        const Fields f(body, {"prompt", "position", "subject", "reference", "threshold", "target_layer",
                              "target_prompt", "max_new_tokens"});
        const auto source = source_of(f);
        const int position = position_of(f, source);
        const PatchSpec spec = spec_of(f);
        const auto reference = f.string("reference");
        const double threshold = threshold_of(f);
                const auto result = find_contextualization_layer(bundle_, source.trace, position, spec, scorer_, reference, threshold);

        json per_layer = json::array();
        for (const auto &l : result.per_layer) {
            per_layer.push_back({{"layer", l.layer}, {"text", l.text}, {"score", l.score}, {"success", l.success}});
        }
        return {{"layer_c", result.layer ? json(*result.layer) : json(nullptr)},
                {"per_layer", per_layer},
                {"position", position},
                {"threshold", threshold}};
    }

private:
    struct Source {
        TokenSequence prompt;
        ActivationTrace trace;
    };

    Source source_of(const Fields &f) const {
        auto prompt = encode(bundle_, f.string("prompt"));
        auto trace = forward_with_trace(bundle_, prompt);
        return {std::move(prompt), std::move(trace)};
    }

    int position_of(const Fields &f, const Source &source) const {
        const int n = static_cast<int>(source.prompt.size());
        if (f.has("position")) {
            const int p = f.integer("position");
            if (p < 1 || p > n) {
                reject(422, "InvalidSelector", "position must lie in [1, " + std::to_string(n) + "]", "position");
            }
            return p;
        }
        if (f.has("subject")) return last_subject_position(source.prompt, f.string("subject"));
        invalid("position", "either \"position\" or \"subject\" is required");
    }

    ReprSelector selector_of(const Fields &f, const Source &source) const {
        ReprSelector sel;
        sel.position = position_of(f, source);
        try {
            sel.kind = parse_repr_kind(f.string("kind"));
        } catch (const Error &) {
            invalid("kind", "\"kind\" must be one of hidden, premlp, mlp");
        }
        sel.layer = f.integer("layer");
        const int L = bundle_.config().n_layers;
        const int lowest = sel.kind == ReprKind::HiddenState ? 0 : 1;
        if (sel.layer < lowest || sel.layer > L) {
            reject(422, "InvalidSelector",
                   "layer must lie in [" + std::to_string(lowest) + ", " + std::to_string(L) + "] for kind " +
                       std::string(to_string(sel.kind)),
                   "layer");
        }
        return sel;
    }

    PatchSpec spec_of(const Fields &f) const {
        PatchSpec spec;
        spec.target_prompt = f.optional_string("target_prompt").value_or(session_.target_prompt);
        spec.target_layer = session_.target_layer;
        if (f.has("target_layer")) {
            const json &v = f.raw("target_layer");
            if (v.is_string()) {
                if (v.get<std::string>() != "same") invalid("target_layer", "\"target_layer\" must be \"same\" or an integer");
                spec.target_layer = TargetLayer::same();
            } else {
                const int layer = f.integer("target_layer");
                if (layer < 0 || layer > bundle_.config().n_layers) {
                    reject(422, "InvalidSelector",
                           "target_layer must lie in [0, " + std::to_string(bundle_.config().n_layers) + "]",
                           "target_layer");
                }
                spec.target_layer = TargetLayer::at(layer);
            }
        }
        spec.max_new_tokens = f.optional_integer("max_new_tokens").value_or(session_.max_new_tokens);
        if (spec.max_new_tokens < 1 || spec.max_new_tokens > bundle_.config().max_positions) {
            invalid("max_new_tokens", "\"max_new_tokens\" must lie in [1, max_positions]");
        }
        return spec;
    }

    double threshold_of(const Fields &f) const {
        const double t = f.optional_number("threshold").value_or(session_.threshold);
        if (!(t > 0.0 && t < 1.0)) invalid("threshold", "\"threshold\" must lie in (0, 1)");
        return t;
    }

    AlphaGrid grid_of(const Fields &f) const {
        if (!f.has("alphas")) return session_.grid;
        const json &v = f.raw("alphas");
        if (!v.is_array() || v.empty()) invalid("alphas", "\"alphas\" must be a non-empty array");
        std::vector<double> alphas;
        for (const auto &a : v) {
            if (!a.is_number() || !std::isfinite(a.get<double>())) invalid("alphas", "\"alphas\" must hold numbers");
            alphas.push_back(a.get<double>());
        }
        try {
            return AlphaGrid(alphas, false);
        } catch (const Error &e) {
            invalid("alphas", e.what());
        }
    }

    static json result_json(const InterpretationResult &r) {
        json out{{"alpha", r.alpha}, {"text", r.text}, {"tokens", json::array()}};
        for (size_t i = 0; i < r.generated.size(); ++i) {
            out["tokens"].push_back({{"id", r.generated.ids[i]}, {"text", r.generated.texts[i]}});
        }
        if (r.score) out["score"] = *r.score;
        if (r.success) out["success"] = *r.success;
        return out;
    }

    const SessionConfig &session_;
    const ModelBundle &bundle_;
    const Scorer &scorer_;
};

} // namespace

Service::Service(SessionConfig config, ScorerFactory scorer_factory)
    : config_(std::move(config)), scorer_factory_(std::move(scorer_factory)), state_(std::make_shared<State>()),
      http_(std::make_unique<Http>()) {
    check(static_cast<bool>(scorer_factory_), ErrorCode::InvalidArgument, "scorer factory must be callable");
    check(config_.max_new_tokens >= 1, ErrorCode::InvalidArgument, "max_new_tokens must be >= 1");
    check(config_.threshold > 0.0 && config_.threshold < 1.0, ErrorCode::InvalidArgument, "threshold must lie in (0, 1)");
}

Service::~Service() {
    stop();
    if (state_->loader.joinable()) state_->loader.join();
}

void Service::load_async() {
    std::lock_guard lock(state_->mutex);
    check(state_->phase == State::Phase::Idle, ErrorCode::InvalidArgument, "a model is already loading or loaded");
    state_->phase = State::Phase::Loading;
    state_->loader = std::thread([state = state_, dir = config_.model_dir, factory = scorer_factory_] {
        std::shared_ptr<const State::Loaded> loaded;
        std::string failure;
        try {
            auto bundle = std::make_shared<const ModelBundle>(load_model(dir));
            auto scorer = factory(*bundle);
            loaded = std::make_shared<const State::Loaded>(State::Loaded{std::move(bundle), std::move(scorer)});
        } catch (const std::exception &e) {
            failure = e.what();
        }
        std::lock_guard lock(state->mutex);
        if (state->phase == State::Phase::Loading) {
            state->loaded = loaded;
            state->failure = failure;
            state->phase = loaded ? State::Phase::Ready : State::Phase::Failed;
        }
        state->changed.notify_all();
    });
}

bool Service::wait_loaded() {
    std::unique_lock lock(state_->mutex);
    state_->changed.wait(lock, [&] { return state_->phase != State::Phase::Loading; });
    return state_->phase == State::Phase::Ready;
}

void Service::set_model(std::shared_ptr<const ModelBundle> bundle) {
    check(bundle != nullptr, ErrorCode::InvalidArgument, "null model");
    auto scorer = scorer_factory_(*bundle);
    auto loaded = std::make_shared<const State::Loaded>(State::Loaded{std::move(bundle), std::move(scorer)});
    std::lock_guard lock(state_->mutex);
    state_->loaded = std::move(loaded);
    state_->phase = State::Phase::Ready;
    state_->changed.notify_all();
}

bool Service::ready() const {
    std::lock_guard lock(state_->mutex);
    return state_->phase == State::Phase::Ready;
}

ApiResponse Service::handle(std::string_view method, std::string_view path, std::string_view body) const {
    try {
        static const std::set<std::string_view> kPost{"/api/tokenize", "/api/interpret", "/api/sweep",
                                                      "/api/contextualize"};
        static const std::set<std::string_view> kGet{"/api/health", "/api/model"};
        const bool is_get = kGet.contains(path), is_post = kPost.contains(path);
        if (!is_get && !is_post) reject(404, "NotFound", "no endpoint " + std::string(path));
        if ((is_get && method != "GET") || (is_post && method != "POST")) {
            reject(405, "MethodNotAllowed", std::string(method) + " is not supported on " + std::string(path));
        }

        if (path == "/api/health") {
            std::lock_guard lock(state_->mutex);
            static constexpr const char *kPhase[] = {"idle", "loading", "ready", "failed"};
            return {200, {{"status", "ok"}, {"model", kPhase[static_cast<int>(state_->phase)]}}};
        }

        std::shared_ptr<const State::Loaded> loaded;
        {
            std::lock_guard lock(state_->mutex);
            if (state_->phase == State::Phase::Failed) {
                reject(503, "ModelLoadFailed", "model failed to load: " + state_->failure);
            }
            if (state_->phase != State::Phase::Ready) reject(503, "ModelNotReady", "model is not loaded yet");
            loaded = state_->loaded;
        }
        const Handler handler(config_, *loaded->bundle, *loaded->scorer);
        if (path == "/api/model") return {200, handler.model_info()};

        json request;
        try {
            request = json::parse(body);
        } catch (const json::exception &e) {
            reject(400, "InvalidJson", std::string("request body is not valid JSON: ") + e.what());
        }
        if (!request.is_object()) reject(400, "InvalidJson", "request body must be a JSON object");

        if (path == "/api/tokenize") return {200, handler.tokenize(request)};
        if (path == "/api/interpret") return {200, handler.interpret_request(request)};
        if (path == "/api/sweep") return {200, handler.sweep_request(request)};
        return {200, handler.contextualize_request(request)};
    } catch (const ApiError &e) {
        return error_response(e);
    } catch (const Error &e) {
        return error_response({status_for(e.code()), std::string(to_string(e.code())), e.what(), field_for(e.code())});
    } catch (const std::exception &e) {
        return error_response({500, "InternalError", e.what(), std::nullopt});
    }
}

int Service::bind() {
    auto &server = http_->server;
    server.set_payload_max_length(1 << 20);
    auto forward_request = [this](const httplib::Request &req, httplib::Response &res) {
        const auto r = handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
    };
    server.Get(R"(/api/.*)", forward_request);
    server.Post(R"(/api/.*)", forward_request);
    server.Put(R"(/api/.*)", forward_request);
    server.Delete(R"(/api/.*)", forward_request);
    if (config_.static_dir) {
        check(server.set_mount_point("/", config_.static_dir->string()), ErrorCode::MissingArtifact,
              "static directory " + config_.static_dir->string() + " does not exist");
    }
    int port = config_.port;
    if (port == 0) {
        port = server.bind_to_any_port(config_.host);
        check(port > 0, ErrorCode::IoError, "cannot bind " + config_.host);
    } else {
        check(server.bind_to_port(config_.host, port), ErrorCode::IoError,
              "cannot bind " + config_.host + ":" + std::to_string(port));
    }
    return port;
}

void Service::listen() {
    http_->server.listen_after_bind();
}

void Service::stop() {
    if (http_) http_->server.stop();
}

} // namespace superscopes
