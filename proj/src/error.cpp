#include "superscopes/error.hpp"

namespace superscopes {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::CorruptWeights: return "CorruptWeights";
    case ErrorCode::PromptTooLong: return "PromptTooLong";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::InvalidSelector: return "InvalidSelector";
    case ErrorCode::SubjectNotFound: return "SubjectNotFound";
    case ErrorCode::BadTargetPrompt: return "BadTargetPrompt";
    case ErrorCode::DimensionError: return "DimensionError";
    case ErrorCode::Overflow: return "Overflow";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

} // namespace superscopes
