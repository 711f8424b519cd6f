#include "superscopes/toy_model.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace superscopes {

namespace {

class Gaussian {
public:
    explicit Gaussian(uint64_t seed) : rng_(seed) {}

    // Box-Muller on 53-bit uniforms; portable across standard libraries.
    float operator()(float stddev) {
        const double u1 = (static_cast<double>(rng_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        return static_cast<float>(stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
    }

private:
    std::mt19937_64 rng_;
};

} // namespace

ModelBundle make_toy_model(const ToyModelOptions &options) {
    Tokenizer tokenizer = options.tokenizer ? *options.tokenizer : Tokenizer::byte_level();

    ModelConfig config;
    config.n_layers = options.n_layers;
    config.d_model = options.d_model;
    config.n_heads = options.n_heads;
    config.max_positions = options.max_positions;
    config.vocab_size = static_cast<int>(tokenizer.vocab_size());
    config.validate();

    Gaussian gauss(options.seed);
    TensorMap tensors;
    for (const auto &spec : weight_schema(config)) {
        Tensor t(spec.shape);
        const auto &name = spec.name;
        const bool is_ln_weight = name.ends_with("ln_1.weight") || name.ends_with("ln_2.weight") || name == "ln_f.weight";
        const bool is_bias = name.ends_with(".bias");
        const bool is_branch_out = name.find("c_proj") != std::string::npos;
        if (options.zero_branches && is_branch_out) {
            // stays zero
        } else if (is_ln_weight) {
            for (auto &v : t.data) v = 1.0f + gauss(0.1f);
        } else if (is_bias) {
            for (auto &v : t.data) v = gauss(0.05f);
        } else if (name == "wte.weight") {
            for (auto &v : t.data) v = gauss(0.5f);
        } else if (name == "wpe.weight") {
            for (auto &v : t.data) v = gauss(0.2f);
        } else {
            const float fan_in = static_cast<float>(spec.shape[0]);
            for (auto &v : t.data) v = gauss(1.2f / std::sqrt(fan_in));
        }
        tensors.emplace(name, std::move(t));
    }
    return ModelBundle::from_tensors(config, tensors, std::move(tokenizer));
}

} // namespace superscopes
