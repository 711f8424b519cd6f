// Writes a random-weight GPT-2-architecture model directory for demos and tests.
//
//   superscopes-toy --out /tmp/toy --layers 8 --d-model 64 --heads 4 --tokenizer-dir assets/gpt2-tokenizer

#include <iostream>

#include <CLI11.hpp>

#include "superscopes/error.hpp"
#include "superscopes/model.hpp"
#include "superscopes/toy_model.hpp"

using namespace superscopes;

int main(int argc, char **argv) {
    CLI::App app{"Write a random-weight model directory"};
    ToyModelOptions opts;
    std::string out, tokenizer_dir;
    app.add_option("--out", out, "Output directory")->required();
    app.add_option("--layers", opts.n_layers)->capture_default_str();
    app.add_option("--d-model", opts.d_model)->capture_default_str();
    app.add_option("--heads", opts.n_heads)->capture_default_str();
    app.add_option("--max-positions", opts.max_positions)->capture_default_str();
    app.add_option("--seed", opts.seed)->capture_default_str();
    app.add_flag("--zero-branches", opts.zero_branches, "Zero the attention and MLP output projections");
    app.add_option("--tokenizer-dir", tokenizer_dir, "vocab.json + merges.txt (default: byte-level tokenizer)");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    try {
        if (!tokenizer_dir.empty()) {
            const std::filesystem::path dir = tokenizer_dir;
            opts.tokenizer = Tokenizer::from_files(dir / "vocab.json", dir / "merges.txt");
        }
        const auto bundle = make_toy_model(opts);
        save_model(bundle, out);
        std::cout << out << ": " << bundle.config().n_layers << " layers, d_model " << bundle.config().d_model
                  << ", vocab " << bundle.config().vocab_size << ", hash " << bundle.hash() << "\n";
    } catch (const Error &e) {
        std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
        return e.code() == ErrorCode::InvalidArgument ? 1 : 2;
    }
    return 0;
}
