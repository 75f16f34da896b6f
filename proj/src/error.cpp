#include "echoflow/error.hpp"

namespace echoflow {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::UnknownDataset: return "UnknownDataset";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::HeadKindMismatch: return "HeadKindMismatch";
    case ErrorCode::InvalidBox: return "InvalidBox";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::ToolNotInSet: return "ToolNotInSet";
    case ErrorCode::CropDegenerate: return "CropDegenerate";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::Io: return "IoError";
    case ErrorCode::Parse: return "ParseError";
  }
  return "Unknown";
}

}  // namespace echoflow
