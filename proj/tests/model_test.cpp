#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "superscopes/error.hpp"
#include "superscopes/model.hpp"
#include "superscopes/safetensors.hpp"
#include "superscopes/toy_model.hpp"

using namespace superscopes;

namespace {

const std::filesystem::path kRoot = SUPERSCOPES_SOURCE_DIR;
const std::filesystem::path kFixtures = kRoot / "tests/fixtures";

template <typename F>
ErrorCode error_of(F &&f) {
    try {
        f();
    } catch (const Error &e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::IoError;
}

std::filesystem::path scratch_dir(const std::string &name) {
    auto dir = std::filesystem::temp_directory_path() / ("superscopes_model_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

struct BlockRecorder : ForwardHook {
    std::map<std::pair<int, int>, std::vector<float>> blocks;
    void on_residual(ResidualSite site, int layer, int position, std::span<float> v) override {
        if (site == ResidualSite::BlockOutput) {
            blocks[{layer, position}] = {v.begin(), v.end()};
        }
    }
};

} // namespace

// Golden logits come from the float64 numpy reference in tests/oracles/gpt2_numpy.py.
class ReferenceFixture : public ::testing::TestWithParam<std::string> {};

TEST_P(ReferenceFixture, LogitsAndGreedyMatchNumpyReference) {
    const auto bundle = load_model(kFixtures / GetParam());
    std::ifstream in(kFixtures / "tiny-bytes-golden.json");
    const auto golden = nlohmann::json::parse(in);
    for (const auto &c : golden.at("models").at(GetParam())) {
        const auto ids = c.at("ids").get<std::vector<TokenId>>();
        EXPECT_EQ(encode(bundle, c.at("prompt").get<std::string>()).ids, ids);

        const auto logits = forward(bundle, ids);
        const auto expected = c.at("logits").get<std::vector<std::vector<double>>>();
        ASSERT_EQ(logits.shape, (std::vector<int64_t>{static_cast<int64_t>(ids.size()), 257}));
        double worst = 0.0;
        for (size_t p = 0; p < ids.size(); ++p) {
            for (size_t v = 0; v < 257; ++v) {
                worst = std::max(worst, std::abs(logits.row(static_cast<int64_t>(p))[v] - expected[p][v]));
            }
        }
        EXPECT_LE(worst, 1e-4);

        const auto out = generate_greedy(bundle, make_sequence(bundle, ids), 12);
        const std::vector<TokenId> cont(out.ids.begin() + static_cast<ptrdiff_t>(ids.size()), out.ids.end());
        EXPECT_EQ(cont, c.at("greedy").get<std::vector<TokenId>>());
    }
}

INSTANTIATE_TEST_SUITE_P(Model, ReferenceFixture, ::testing::Values("tiny-bytes-f32", "tiny-bytes-f16"));

TEST(LoadModel, Gpt2SmallParameterCount) {
    std::ifstream in(kRoot / "assets/gpt2-small-config.json");
    const auto config = ModelConfig::from_json(nlohmann::json::parse(in));
    // tests/oracles/param_count.py
    EXPECT_EQ(parameter_count(config), 124'439'808);
    EXPECT_EQ(config.n_layers, 12);
    EXPECT_EQ(config.d_model, 768);
}

TEST(LoadModel, ToyModelHasConfiguredBlocks) {
    const auto bundle = make_toy_model({.n_layers = 2, .d_model = 8, .n_heads = 1});
    EXPECT_EQ(bundle.weights().layers.size(), 2u);
    EXPECT_TRUE(shape_audit(bundle).empty());

    const auto dir = scratch_dir("roundtrip");
    save_model(bundle, dir);
    const auto loaded = load_model(dir);
    EXPECT_EQ(loaded.config(), bundle.config());
    EXPECT_EQ(loaded.hash(), bundle.hash());
    EXPECT_TRUE(shape_audit(loaded).empty());
}

TEST(LoadModel, MissingFinalLayernormIsSchemaViolation) {
    const auto bundle = make_toy_model({});
    auto tensors = bundle.tensors();
    tensors.erase("ln_f.weight");
    EXPECT_EQ(error_of([&] { ModelBundle::from_tensors(bundle.config(), tensors, bundle.tokenizer()); }),
              ErrorCode::SchemaViolation);

    const auto dir = scratch_dir("missing_lnf");
    save_model(bundle, dir);
    write_safetensors(dir / "model.safetensors", tensors);
    EXPECT_EQ(error_of([&] { load_model(dir); }), ErrorCode::SchemaViolation);
}

TEST(LoadModel, ShapeMismatchIsSchemaViolation) {
    const auto bundle = make_toy_model({});
    auto tensors = bundle.tensors();
    tensors["h.1.mlp.c_fc.weight"] = Tensor({8, 16});
    EXPECT_EQ(error_of([&] { ModelBundle::from_tensors(bundle.config(), tensors, bundle.tokenizer()); }),
              ErrorCode::SchemaViolation);
}

TEST(LoadModel, NonFiniteIsCorruptWeights) {
    const auto bundle = make_toy_model({});
    auto tensors = bundle.tensors();
    tensors["h.0.attn.c_attn.bias"].data[3] = std::nanf("");
    EXPECT_EQ(error_of([&] { ModelBundle::from_tensors(bundle.config(), tensors, bundle.tokenizer()); }),
              ErrorCode::CorruptWeights);
}

TEST(LoadModel, MissingFileIsMissingArtifact) {
    const auto dir = scratch_dir("missing_file");
    save_model(make_toy_model({}), dir);
    std::filesystem::remove(dir / "merges.txt");
    EXPECT_EQ(error_of([&] { load_model(dir); }), ErrorCode::MissingArtifact);
}

TEST(LoadModel, TransformerPrefixAccepted) {
    const auto bundle = make_toy_model({});
    TensorMap prefixed;
    for (auto &[k, v] : bundle.tensors()) prefixed.emplace("transformer." + k, v);
    prefixed.emplace("h.0.attn.bias", Tensor({1}));  // unrelated buffers are ignored
    EXPECT_EQ(ModelBundle::from_tensors(bundle.config(), prefixed, bundle.tokenizer()).hash(), bundle.hash());
}

TEST(LoadModel, RejectsBadConfig) {
    EXPECT_EQ(error_of([] {
                  ModelConfig::from_json({{"n_layer", 2}, {"n_head", 3}, {"n_embd", 8}, {"n_positions", 4}, {"vocab_size", 257}});
              }),
              ErrorCode::SchemaViolation);
    EXPECT_EQ(error_of([] { ModelConfig::from_json({{"n_layer", 2}}); }), ErrorCode::SchemaViolation);
}

TEST(Forward, ZeroBranchModelPassesEmbeddingThrough) {
    const auto bundle = make_toy_model({.n_layers = 3, .d_model = 8, .n_heads = 2, .zero_branches = true});
    BlockRecorder rec;
    forward(bundle, encode(bundle, "residual").ids, &rec);
    for (int p = 1; p <= 8; ++p) {
        for (int l = 1; l <= 3; ++l) {
            EXPECT_EQ(rec.blocks.at({l, p}), rec.blocks.at({0, p}));
        }
    }
}

TEST(Forward, ChunkedCacheMatchesSingleCall) {
    const auto bundle = make_toy_model({.n_layers = 3, .d_model = 16, .n_heads = 4, .seed = 9});
    const auto ids = encode(bundle, "The capital of France is").ids;
    const auto full = forward(bundle, ids);
    for (size_t split = 1; split < ids.size(); ++split) {
        KvCache cache(bundle.config());
        forward(bundle, std::span(ids).first(split), cache);
        const auto rest = forward(bundle, std::span(ids).subspan(split), cache);
        EXPECT_EQ(cache.filled(), static_cast<int>(ids.size()));
        const auto a = full.row(full.shape[0] - 1);
        const auto b = rest.row(rest.shape[0] - 1);
        for (size_t v = 0; v < a.size(); ++v) {
            ASSERT_NEAR(a[v], b[v], 1e-4);
        }
    }
}

TEST(Forward, ContextOverflow) {
    const auto bundle = make_toy_model({.max_positions = 6});
    KvCache cache(bundle.config());
    forward(bundle, encode(bundle, "abcd").ids, cache);
    EXPECT_EQ(error_of([&] { forward(bundle, encode(bundle, "efg").ids, cache); }), ErrorCode::ContextOverflow);
}

TEST(Generate, ZeroNewTokensReturnsPrompt) {
    const auto bundle = make_toy_model({});
    const auto prompt = encode(bundle, "abc");
    EXPECT_EQ(generate_greedy(bundle, prompt, 0), prompt);
}

TEST(Generate, Deterministic) {
    const auto bundle = make_toy_model({.d_model = 16, .n_heads = 2, .seed = 4});
    const auto prompt = encode(bundle, "deterministic");
    EXPECT_EQ(generate_greedy(bundle, prompt, 15), generate_greedy(bundle, prompt, 15));
}

TEST(Generate, RejectsOverflowAndEmptyPrompt) {
    const auto bundle = make_toy_model({.max_positions = 8});
    EXPECT_EQ(error_of([&] { generate_greedy(bundle, encode(bundle, "abcdef"), 3); }), ErrorCode::ContextOverflow);
    EXPECT_EQ(error_of([&] { generate_greedy(bundle, TokenSequence{}, 3); }), ErrorCode::InvalidArgument);
}

TEST(Generate, StopsAfterEndOfText) {
    // Bias the unembedding so that <|endoftext|> (id 256) always wins.
    auto base = make_toy_model({.seed = 5});
    auto tensors = base.tensors();
    auto &wte = tensors["wte.weight"];
    auto &lnf_b = tensors["ln_f.bias"];
    auto &lnf_w = tensors["ln_f.weight"];
    std::fill(lnf_w.data.begin(), lnf_w.data.end(), 0.0f);
    std::fill(lnf_b.data.begin(), lnf_b.data.end(), 1.0f);
    std::fill(wte.data.begin(), wte.data.end(), 0.0f);
    for (auto &v : wte.row(256)) v = 1.0f;
    const auto bundle = ModelBundle::from_tensors(base.config(), tensors, base.tokenizer());
    const auto out = generate_greedy(bundle, encode(bundle, "ab"), 10);
    ASSERT_EQ(out.size(), 3u);
    EXPECT_EQ(out.ids.back(), 256);
    EXPECT_EQ(out.texts.back(), "<|endoftext|>");
}

TEST(Generate, ArgmaxTiesPickSmallestId) {
    EXPECT_EQ(argmax_token(std::vector<float>{0.0f, 2.0f, 2.0f, 1.0f}), 1);
    EXPECT_EQ(argmax_token(std::vector<float>{3.0f, 3.0f}), 0);
}

TEST(Generate, CachedEqualsRecomputeOnRandomPrompts) {
    const auto bundle = make_toy_model({.n_layers = 3, .d_model = 16, .n_heads = 2, .seed = 11});
    std::mt19937 rng(3);
    std::uniform_int_distribution<int> ch('a', 'z'), len(1, 12);
    for (int trial = 0; trial < 10; ++trial) {
        std::string s;
        for (int i = len(rng); i > 0; --i) s.push_back(static_cast<char>(ch(rng)));
        const auto prompt = encode(bundle, s);
        EXPECT_EQ(generate_greedy(bundle, prompt, 10, nullptr, DecodeMode::Cached),
                  generate_greedy(bundle, prompt, 10, nullptr, DecodeMode::Recompute));
    }
}

TEST(Generate, SamplingIsSeeded) {
    const auto bundle = make_toy_model({.d_model = 16, .n_heads = 2});
    const auto prompt = encode(bundle, "sample");
    GenerateOptions opt{.max_new_tokens = 8, .sampling = SamplingOptions{.temperature = 1.5f, .seed = 42}};
    EXPECT_EQ(generate(bundle, prompt, opt), generate(bundle, prompt, opt));
}

TEST(Safetensors, HalfConversion) {
    EXPECT_EQ(half_to_float(0x3c00), 1.0f);
    EXPECT_EQ(half_to_float(0xc000), -2.0f);
    EXPECT_EQ(half_to_float(0x0001), std::ldexp(1.0f, -24));
    EXPECT_TRUE(std::isinf(half_to_float(0x7c00)));
}

TEST(Safetensors, RejectsUnsupportedDtypeAndTruncation) {
    std::string header = R"({"a":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
    std::vector<uint8_t> bytes(8 + header.size() + 8, 0);
    const uint64_t len = header.size();
    std::memcpy(bytes.data(), &len, 8);
    std::memcpy(bytes.data() + 8, header.data(), header.size());
    EXPECT_EQ(error_of([&] { parse_safetensors(bytes); }), ErrorCode::SchemaViolation);
    EXPECT_EQ(error_of([&] { parse_safetensors(std::span(bytes).first(4)); }), ErrorCode::SchemaViolation);
}
