// SPDX-License-Identifier: Apache-2.0
#include "moekit/error.hpp"

namespace moekit {

const char* err_name(Err code) {
  switch (code) {
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::InvalidSpec: return "InvalidSpec";
    case Err::InvalidTemperature: return "InvalidTemperature";
    case Err::InvalidLabel: return "InvalidLabel";
    case Err::BadMagic: return "BadMagic";
    case Err::VersionMismatch: return "VersionMismatch";
    case Err::CorruptHeader: return "CorruptHeader";
    case Err::TruncatedData: return "TruncatedData";
    case Err::ShapeMetaConflict: return "ShapeMetaConflict";
    case Err::EmptyCalibrationSet: return "EmptyCalibrationSet";
    case Err::InvalidTargetDim: return "InvalidTargetDim";
    case Err::DegenerateDistribution: return "DegenerateDistribution";
    case Err::IndexOutOfRange: return "IndexOutOfRange";
    case Err::InsufficientNeurons: return "InsufficientNeurons";
    case Err::PartitionFailure: return "PartitionFailure";
    case Err::InfeasibleBalance: return "InfeasibleBalance";
    case Err::SizeMismatch: return "SizeMismatch";
    case Err::MetaConflict: return "MetaConflict";
    case Err::NotAGrid: return "NotAGrid";
    case Err::NonFiniteLogits: return "NonFiniteLogits";
    case Err::ParseError: return "ParseError";
    case Err::LabelOutOfRange: return "LabelOutOfRange";
    case Err::DivergenceDetected: return "DivergenceDetected";
    case Err::TargetNeverReached: return "TargetNeverReached";
    case Err::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace moekit
