// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moekit/checkpoint.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

// MJPK container: magic "MJPK", u32 LE version, u64 LE header length, UTF-8
// JSON header {meta, tensors: name -> {dtype, shape, offset, bytes}}, then a
// raw little-endian payload. Tensor payload is laid out in lexicographic
// name order, so serialization is deterministic byte for byte.

inline constexpr std::uint32_t kMjpkVersion = 1;

enum class Dtype : std::uint8_t { f32, f64, i32, i64 };

const char* dtype_name(Dtype d);
std::size_t dtype_size(Dtype d);

struct RawTensor {
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  static RawTensor from(const Tensor& t);
  static RawTensor from(const Tensor64& t);
  static RawTensor from_i32(Shape shape, const std::vector<std::int32_t>& v);
  static RawTensor from_i64(Shape shape, const std::vector<std::int64_t>& v);

  Tensor to_f32() const;
  Tensor64 to_f64() const;
  std::vector<std::int32_t> to_i32() const;
  std::vector<std::int64_t> to_i64() const;
};

struct Archive {
  nlohmann::json meta;  // carries a "kind" discriminator
  std::map<std::string, RawTensor> tensors;
};

// Atomic write (temp file + rename).
void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

std::string archive_kind(const Archive& archive);

void save_checkpoint(const std::string& path, const DenseCheckpoint& ckpt);
DenseCheckpoint load_checkpoint(const std::string& path);

void save_profile(const std::string& path, const ActivationProfile& profile);
ActivationProfile load_profile(const std::string& path);

void save_bundle(const std::string& path, const MoEInitBundle& bundle);
MoEInitBundle load_bundle(const std::string& path);

}  // namespace moekit
