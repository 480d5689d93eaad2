#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace medgrim {

enum class ErrorCode {
    InvalidArgument,
    // graph-store
    DuplicateConditionName,
    EmptyRecordSet,
    UnknownConditionId,
    SchemaVersionMismatch,
    CorruptPayload,
    MalformedInput,
    // embedding
    DimensionMismatch,
    ZeroVector,
    InvalidLambda,
    EmptySequence,
    DegenerateMean,
    EncoderUnavailable,
    // retrieval
    EmptyGraph,
    // lm-client
    BackendUnavailable,
    ContextOverflow,
    ScriptExhausted,
    UnparseableLikelihood,
    // prompt
    MissingPlaceholder,
    UnknownTemplate,
    // dialogue
    EmptyCandidates,
    UnparseableQuestions,
    IncompleteAnswers,
    // session
    WrongState,
    InvalidQuery,
    UnknownSession,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::DuplicateConditionName: return "DuplicateConditionName";
        case ErrorCode::EmptyRecordSet: return "EmptyRecordSet";
        case ErrorCode::UnknownConditionId: return "UnknownConditionId";
        case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
        case ErrorCode::CorruptPayload: return "CorruptPayload";
        case ErrorCode::MalformedInput: return "MalformedInput";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::ZeroVector: return "ZeroVector";
        case ErrorCode::InvalidLambda: return "InvalidLambda";
        case ErrorCode::EmptySequence: return "EmptySequence";
        case ErrorCode::DegenerateMean: return "DegenerateMean";
        case ErrorCode::EncoderUnavailable: return "EncoderUnavailable";
        case ErrorCode::EmptyGraph: return "EmptyGraph";
        case ErrorCode::BackendUnavailable: return "BackendUnavailable";
        case ErrorCode::ContextOverflow: return "ContextOverflow";
        case ErrorCode::ScriptExhausted: return "ScriptExhausted";
        case ErrorCode::UnparseableLikelihood: return "UnparseableLikelihood";
        case ErrorCode::MissingPlaceholder: return "MissingPlaceholder";
        case ErrorCode::UnknownTemplate: return "UnknownTemplate";
        case ErrorCode::EmptyCandidates: return "EmptyCandidates";
        case ErrorCode::UnparseableQuestions: return "UnparseableQuestions";
        case ErrorCode::IncompleteAnswers: return "IncompleteAnswers";
        case ErrorCode::WrongState: return "WrongState";
        case ErrorCode::InvalidQuery: return "InvalidQuery";
        case ErrorCode::UnknownSession: return "UnknownSession";
    }
    return "Unknown";
}

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace medgrim
