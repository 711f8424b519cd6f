#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace superscopes {

enum class ErrorCode {
    MissingArtifact,
    SchemaViolation,
    CorruptWeights,
    PromptTooLong,
    UnknownToken,
    ContextOverflow,
    InvalidSelector,
    SubjectNotFound,
    BadTargetPrompt,
    DimensionError,
    Overflow,
    EmptyText,
    MissingEmbedding,
    InvalidArgument,
    IoError,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &message) {
    throw Error(code, message);
}

inline void check(bool cond, ErrorCode code, const std::string &message) {
    if (!cond) {
        throw Error(code, message);
    }
}

} // namespace superscopes
