#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "superscopes/interpretation.hpp"

namespace superscopes {

struct SessionConfig {
    std::filesystem::path model_dir;
    std::string target_prompt = std::string(kDefaultTargetPrompt);
    TargetLayer target_layer = TargetLayer::at(0);
    AlphaGrid grid = AlphaGrid::standard();
    double threshold = kDefaultThreshold;
    int max_new_tokens = 20;
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::optional<std::filesystem::path> static_dir;  // served at / when set
};

/// Builds the similarity scorer once the model is available.
using ScorerFactory = std::function<ScorerHandle(const ModelBundle &)>;

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

/// JSON API over one immutable model. Request handling is stateless and safe
/// to call from many threads once the model is ready.
class Service {
public:
    explicit Service(SessionConfig config, ScorerFactory scorer_factory = default_scorer);
    ~Service();

    Service(const Service &) = delete;
    Service &operator=(const Service &) = delete;

    /// Loads config.model_dir on a background thread. Until it finishes, model
    /// dependent endpoints answer 503.
    void load_async();
    /// Blocks until a started load finishes. Returns false if it failed.
    bool wait_loaded();
    /// Installs an already built model (replaces any pending load result).
    void set_model(std::shared_ptr<const ModelBundle> bundle);
    bool ready() const;

    /// Transport-independent dispatch: GET /api/health, GET /api/model,
    /// POST /api/tokenize, /api/interpret, /api/sweep, /api/contextualize.
    /// Errors carry {code, message, field?}.
    ApiResponse handle(std::string_view method, std::string_view path, std::string_view body) const;

    /// Binds config.host:config.port and returns the bound port; throws IoError on failure.
    int bind();
    /// Serves until stop(). Requires bind().
    void listen();
    void stop();

    const SessionConfig &config() const { return config_; }

private:
    struct State;
    struct Http;

    SessionConfig config_;
    ScorerFactory scorer_factory_;
    std::shared_ptr<State> state_;
    std::unique_ptr<Http> http_;
};

} // namespace superscopes
