#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace superscopes {

using TokenId = int32_t;

/// Token ids plus the raw byte string each id decodes to.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<std::string> texts;

    size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
    bool operator==(const TokenSequence &) const = default;
};

/// Byte-level BPE tables in the GPT-2 layout: token strings use the printable
/// byte remapping, merges are ranked by their order in merges.txt.
class Tokenizer {
public:
    using Merge = std::pair<std::string, std::string>;

    Tokenizer() = default;
    Tokenizer(std::unordered_map<std::string, TokenId> vocab, std::vector<Merge> merges);

    /// vocab.json + merges.txt; the first merges line is a comment header.
    static Tokenizer from_files(const std::filesystem::path &vocab_json, const std::filesystem::path &merges_txt);

    /// 256 single-byte tokens (id == byte value) plus <|endoftext|> = 256; no merges.
    static Tokenizer byte_level();

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    /// Raw bytes of one token. Throws UnknownToken when out of range.
    const std::string &token_bytes(TokenId id) const;

    std::optional<TokenId> find(std::string_view token_string) const;
    std::optional<TokenId> end_of_text() const { return eot_; }

    size_t vocab_size() const { return id_to_bytes_.size(); }
    size_t merge_count() const { return merges_.size(); }
    const std::vector<Merge> &merges() const { return merges_; }
    const std::unordered_map<std::string, TokenId> &vocab() const { return vocab_; }

private:
    void bpe(std::string_view piece, std::vector<TokenId> &out) const;

    std::unordered_map<std::string, TokenId> vocab_;
    std::vector<std::string> id_to_bytes_;
    std::vector<Merge> merges_;
    std::unordered_map<std::string, int> ranks_;
    std::optional<TokenId> eot_;
};

/// Splits text with the GPT-2 pre-tokenization pattern
///   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
std::vector<std::string_view> pretokenize(std::string_view text);

/// The printable-unicode stand-in (UTF-8) for each byte value.
const std::vector<std::string> &byte_to_unicode_table();

} // namespace superscopes
