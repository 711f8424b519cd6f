#include "superscopes/tokenizer.hpp"

#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "superscopes/error.hpp"

namespace superscopes {

namespace {

std::string encode_utf8(UChar32 cp) {
    uint8_t buf[4];
    int32_t len = 0;
    U8_APPEND_UNSAFE(buf, len, cp);
    return {reinterpret_cast<const char *>(buf), static_cast<size_t>(len)};
}

enum class CharClass { Letter, Number, Space, Other };

struct CodePoint {
    size_t begin;
    size_t end;
    UChar32 cp;
    CharClass cls;
};

CharClass classify(UChar32 cp) {
    if (cp < 0) {
        return CharClass::Other;
    }
    if (u_isUWhiteSpace(cp)) {
        return CharClass::Space;
    }
    switch (u_charType(cp)) {
    case U_UPPERCASE_LETTER:
    case U_LOWERCASE_LETTER:
    case U_TITLECASE_LETTER:
    case U_MODIFIER_LETTER:
    case U_OTHER_LETTER:
        return CharClass::Letter;
    case U_DECIMAL_DIGIT_NUMBER:
    case U_LETTER_NUMBER:
    case U_OTHER_NUMBER:
        return CharClass::Number;
    default:
        return CharClass::Other;
    }
}

std::vector<CodePoint> decode_code_points(std::string_view text) {
    std::vector<CodePoint> out;
    const auto *s = reinterpret_cast<const uint8_t *>(text.data());
    const auto len = static_cast<int32_t>(text.size());
    int32_t i = 0;
    while (i < len) {
        const int32_t start = i;
        UChar32 cp;
        U8_NEXT(s, i, len, cp);
        out.push_back({static_cast<size_t>(start), static_cast<size_t>(i), cp, classify(cp)});
    }
    return out;
}

std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    check(static_cast<bool>(in), ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

const std::vector<std::string> &byte_to_unicode_table() {
    static const std::vector<std::string> table = [] {
        std::vector<std::string> t(256);
        int extra = 0;
        for (int b = 0; b < 256; ++b) {
            const bool printable = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
            t[b] = encode_utf8(printable ? b : 256 + extra++);
        }
        return t;
    }();
    return table;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
    const auto cps = decode_code_points(text);
    const size_t n = cps.size();
    std::vector<std::string_view> out;

    auto emit = [&](size_t from, size_t to) {
        out.push_back(text.substr(cps[from].begin, cps[to - 1].end - cps[from].begin));
    };
    auto run_of = [&](size_t from, CharClass cls) {
        size_t j = from;
        while (j < n && cps[j].cls == cls) {
            ++j;
        }
        return j;
    };
    auto run_of_other = [&](size_t from) {
        size_t j = from;
        while (j < n && cps[j].cls == CharClass::Other) {
            ++j;
        }
        return j;
    };

    size_t i = 0;
    while (i < n) {
        // contractions
        if (cps[i].cp == '\'' && i + 1 < n) {
            const UChar32 a = cps[i + 1].cp;
            if (a == 's' || a == 't' || a == 'm' || a == 'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if (i + 2 < n) {
                const UChar32 b = cps[i + 2].cp;
                if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) {
                    emit(i, i + 3);
                    i += 3;
                    continue;
                }
            }
        }

        // optional single space followed by a letter, number, or other run
        const size_t body = (cps[i].cp == ' ' && i + 1 < n) ? i + 1 : i;
        const CharClass cls = cps[body].cls;
        if (cls == CharClass::Letter || cls == CharClass::Number) {
            const size_t end = run_of(body, cls);
            emit(i, end);
            i = end;
            continue;
        }
        if (cls == CharClass::Other) {
            const size_t end = run_of_other(body);
            emit(i, end);
            i = end;
            continue;
        }

        // whitespace: \s+(?!\S) leaves the last space for the next token
        const size_t end = run_of(i, CharClass::Space);
        if (end < n && end - i > 1) {
            emit(i, end - 1);
            i = end - 1;
        } else {
            emit(i, end);
            i = end;
        }
    }
    return out;
}

Tokenizer::Tokenizer(std::unordered_map<std::string, TokenId> vocab, std::vector<Merge> merges)
    : vocab_(std::move(vocab)), merges_(std::move(merges)) {
    check(!vocab_.empty(), ErrorCode::SchemaViolation, "tokenizer vocabulary is empty");

    // reverse byte remapping: printable stand-in -> raw byte
    std::unordered_map<std::string, char> unmap;
    const auto &table = byte_to_unicode_table();
    for (int b = 0; b < 256; ++b) {
        unmap.emplace(table[b], static_cast<char>(b));
    }

    id_to_bytes_.assign(vocab_.size(), std::string());
    std::vector<bool> seen(vocab_.size(), false);
    for (const auto &[token, id] : vocab_) {
        check(id >= 0 && static_cast<size_t>(id) < vocab_.size() && !seen[static_cast<size_t>(id)],
              ErrorCode::SchemaViolation, "token ids are not a bijection onto [0, vocab_size)");
        seen[static_cast<size_t>(id)] = true;

        std::string raw;
        bool remapped = true;
        for (const auto &cp : decode_code_points(token)) {
            auto it = unmap.find(std::string(token.substr(cp.begin, cp.end - cp.begin)));
            if (it == unmap.end()) {
                remapped = false;
                break;
            }
            raw.push_back(it->second);
        }
        // special tokens such as <|endoftext|> are plain ASCII and map through unchanged
        id_to_bytes_[static_cast<size_t>(id)] = remapped ? raw : token;
    }

    ranks_.reserve(merges_.size());
    for (size_t r = 0; r < merges_.size(); ++r) {
        const auto key = merges_[r].first + ' ' + merges_[r].second;
        check(ranks_.emplace(key, static_cast<int>(r)).second, ErrorCode::SchemaViolation,
              "duplicate merge rule '" + key + "'");
    }

    if (auto it = vocab_.find("<|endoftext|>"); it != vocab_.end()) {
        eot_ = it->second;
    }
}

Tokenizer Tokenizer::from_files(const std::filesystem::path &vocab_json, const std::filesystem::path &merges_txt) {
    std::unordered_map<std::string, TokenId> vocab;
    try {
        vocab = nlohmann::json::parse(read_file(vocab_json)).get<std::unordered_map<std::string, TokenId>>();
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::SchemaViolation, "vocab.json: " + std::string(e.what()));
    }

    std::vector<Merge> merges;
    std::istringstream lines(read_file(merges_txt));
    std::string line;
    bool first = true;
    while (std::getline(lines, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (first) {
            first = false;
            if (line.starts_with('#')) {
                continue;
            }
        }
        if (line.empty()) {
            continue;
        }
        const auto sp = line.find(' ');
        check(sp != std::string::npos && sp > 0 && sp + 1 < line.size() && line.find(' ', sp + 1) == std::string::npos,
              ErrorCode::SchemaViolation, "merges.txt: malformed rule '" + line + "'");
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return Tokenizer(std::move(vocab), std::move(merges));
}

Tokenizer Tokenizer::byte_level() {
    std::unordered_map<std::string, TokenId> vocab;
    const auto &table = byte_to_unicode_table();
    for (int b = 0; b < 256; ++b) {
        vocab.emplace(table[b], b);
    }
    vocab.emplace("<|endoftext|>", 256);
    return Tokenizer(std::move(vocab), {});
}

void Tokenizer::bpe(std::string_view piece, std::vector<TokenId> &out) const {
    const auto &table = byte_to_unicode_table();
    std::vector<std::string> symbols;
    symbols.reserve(piece.size());
    for (unsigned char c : piece) {
        symbols.push_back(table[c]);
    }

    while (symbols.size() > 1) {
        int best = std::numeric_limits<int>::max();
        for (size_t k = 0; k + 1 < symbols.size(); ++k) {
            auto it = ranks_.find(symbols[k] + ' ' + symbols[k + 1]);
            if (it != ranks_.end() && it->second < best) {
                best = it->second;
            }
        }
        if (best == std::numeric_limits<int>::max()) {
            break;
        }
        const auto &[left, right] = merges_[static_cast<size_t>(best)];
        std::vector<std::string> merged;
        merged.reserve(symbols.size());
        for (size_t k = 0; k < symbols.size(); ++k) {
            if (k + 1 < symbols.size() && symbols[k] == left && symbols[k + 1] == right) {
                merged.push_back(left + right);
                ++k;
            } else {
                merged.push_back(std::move(symbols[k]));
            }
        }
        symbols = std::move(merged);
    }

    for (const auto &s : symbols) {
        auto it = vocab_.find(s);
        check(it != vocab_.end(), ErrorCode::UnknownToken, "BPE symbol missing from vocabulary");
        out.push_back(it->second);
    }
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (auto piece : pretokenize(text)) {
        bpe(piece, ids);
    }
    return ids;
}

const std::string &Tokenizer::token_bytes(TokenId id) const {
    check(id >= 0 && static_cast<size_t>(id) < id_to_bytes_.size(), ErrorCode::UnknownToken,
          "token id " + std::to_string(id) + " is outside the vocabulary");
    return id_to_bytes_[static_cast<size_t>(id)];
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        out += token_bytes(id);
    }
    return out;
}

std::optional<TokenId> Tokenizer::find(std::string_view token_string) const {
    if (auto it = vocab_.find(std::string(token_string)); it != vocab_.end()) {
        return it->second;
    }
    return std::nullopt;
}

} // namespace superscopes
