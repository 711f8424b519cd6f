#pragma once

#include <cstdint>
#include <optional>

#include "superscopes/model.hpp"

namespace superscopes {

/// Random-weight GPT-2-architecture models for tests, demos and the service
/// smoke path. Weight generation depends only on the seed.
struct ToyModelOptions {
    int n_layers = 2;
    int d_model = 8;
    int n_heads = 1;
    int max_positions = 128;
    uint64_t seed = 1;
    // attention and MLP output projections (weights and biases) set to zero
    bool zero_branches = false;
    // byte-level 257-token vocabulary when absent
    std::optional<Tokenizer> tokenizer;
};

ModelBundle make_toy_model(const ToyModelOptions &options);

} // namespace superscopes
