// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moekit {

enum class Err {
  ShapeMismatch,
  InvalidSpec,
  InvalidTemperature,
  InvalidLabel,
  BadMagic,
  VersionMismatch,
  CorruptHeader,
  TruncatedData,
  ShapeMetaConflict,
  EmptyCalibrationSet,
  InvalidTargetDim,
  DegenerateDistribution,
  IndexOutOfRange,
  InsufficientNeurons,
  PartitionFailure,
  InfeasibleBalance,
  SizeMismatch,
  MetaConflict,
  NotAGrid,
  NonFiniteLogits,
  ParseError,
  LabelOutOfRange,
  DivergenceDetected,
  TargetNeverReached,
  IoError,
};

const char* err_name(Err code);

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}

  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace moekit
