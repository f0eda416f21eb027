// SPDX-License-Identifier: Apache-2.0
#include "moekit/mjpk.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

static_assert(std::endian::native == std::endian::little,
              "MJPK payload is little-endian; big-endian hosts are unsupported");

namespace moekit {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'M', 'J', 'P', 'K'};

std::uint64_t checked_numel(const Shape& shape) {
  std::uint64_t prod = 1;
  require(shape.size() <= 16, Err::CorruptHeader, "tensor rank too large");
  for (auto d : shape) {
    require(d > 0 && d <= std::int64_t(1) << 40, Err::CorruptHeader, "bad tensor dimension");
    const std::uint64_t ud = static_cast<std::uint64_t>(d);
    require(prod <= std::numeric_limits<std::uint64_t>::max() / ud, Err::CorruptHeader,
            "tensor size overflow");
    prod *= ud;
  }
  return prod;
}

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  if (s == "i32") return Dtype::i32;
  if (s == "i64") return Dtype::i64;
  fail(Err::CorruptHeader, "unknown dtype " + s);
}

template <typename T>
std::vector<std::uint8_t> to_bytes(const std::vector<T>& v) {
  std::vector<std::uint8_t> out(v.size() * sizeof(T));
  if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
  return out;
}

template <typename T>
std::vector<T> from_bytes(const std::vector<std::uint8_t>& b) {
  std::vector<T> out(b.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), b.data(), b.size());
  return out;
}

const json& field(const json& j, const char* key) {
  require(j.is_object() && j.contains(key), Err::CorruptHeader,
          std::string("header missing field ") + key);
  return j.at(key);
}

std::int64_t int_field(const json& j, const char* key) {
  const json& v = field(j, key);
  require(v.is_number_integer(), Err::CorruptHeader, std::string("non-integer field ") + key);
  return v.get<std::int64_t>();
}

std::uint64_t uint_field(const json& j, const char* key) {
  const json& v = field(j, key);
  require(v.is_number_integer() && v.get<std::int64_t>() >= 0, Err::CorruptHeader,
          std::string("bad unsigned field ") + key);
  return v.get<std::uint64_t>();
}

std::string string_field(const json& j, const char* key) {
  const json& v = field(j, key);
  require(v.is_string(), Err::CorruptHeader, std::string("non-string field ") + key);
  return v.get<std::string>();
}

double double_field(const json& j, const char* key) {
  const json& v = field(j, key);
  require(v.is_number(), Err::CorruptHeader, std::string("non-numeric field ") + key);
  return v.get<double>();
}

Tensor tensor_field(const Archive& a, const std::string& name) {
  auto it = a.tensors.find(name);
  require(it != a.tensors.end(), Err::MetaConflict, "archive missing tensor " + name);
  return it->second.to_f32();
}

}  // namespace

const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f32: return "f32";
    case Dtype::f64: return "f64";
    case Dtype::i32: return "i32";
    case Dtype::i64: return "i64";
  }
  return "?";
}

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::i32: return 4;
    case Dtype::i64: return 8;
  }
  return 0;
}

RawTensor RawTensor::from(const Tensor& t) { return {Dtype::f32, t.shape, to_bytes(t.data)}; }
RawTensor RawTensor::from(const Tensor64& t) { return {Dtype::f64, t.shape, to_bytes(t.data)}; }

RawTensor RawTensor::from_i32(Shape shape, const std::vector<std::int32_t>& v) {
  require(numel_of(shape) == static_cast<std::int64_t>(v.size()), Err::ShapeMismatch,
          "raw tensor payload does not match shape");
  return {Dtype::i32, std::move(shape), to_bytes(v)};
}

RawTensor RawTensor::from_i64(Shape shape, const std::vector<std::int64_t>& v) {
  require(numel_of(shape) == static_cast<std::int64_t>(v.size()), Err::ShapeMismatch,
          "raw tensor payload does not match shape");
  return {Dtype::i64, std::move(shape), to_bytes(v)};
}

Tensor RawTensor::to_f32() const {
  require(dtype == Dtype::f32, Err::MetaConflict, "expected f32 tensor");
  return Tensor(shape, from_bytes<float>(bytes));
}

Tensor64 RawTensor::to_f64() const {
  require(dtype == Dtype::f64, Err::MetaConflict, "expected f64 tensor");
  return Tensor64(shape, from_bytes<double>(bytes));
}

std::vector<std::int32_t> RawTensor::to_i32() const {
  require(dtype == Dtype::i32, Err::MetaConflict, "expected i32 tensor");
  return from_bytes<std::int32_t>(bytes);
}

std::vector<std::int64_t> RawTensor::to_i64() const {
  require(dtype == Dtype::i64, Err::MetaConflict, "expected i64 tensor");
  return from_bytes<std::int64_t>(bytes);
}

void save_archive(const std::string& path, const Archive& archive) {
  json header;
  header["meta"] = archive.meta;
  json tens = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, rt] : archive.tensors) {
    const std::uint64_t expect = checked_numel(rt.shape) * dtype_size(rt.dtype);
    require(expect == rt.bytes.size(), Err::ShapeMetaConflict,
            "tensor " + name + " payload does not match its shape");
    json entry;
    entry["dtype"] = dtype_name(rt.dtype);
    entry["shape"] = rt.shape;
    entry["offset"] = offset;
    entry["bytes"] = rt.bytes.size();
    tens[name] = std::move(entry);
    offset += rt.bytes.size();
  }
  header["tensors"] = std::move(tens);
  const std::string header_text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Err::IoError, "cannot open " + tmp + " for writing");
    out.write(kMagic, 4);
    const std::uint32_t version = kMjpkVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hlen = header_text.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, rt] : archive.tensors) {
      (void)name;
      out.write(reinterpret_cast<const char*>(rt.bytes.data()),
                static_cast<std::streamsize>(rt.bytes.size()));
    }
    require(out.good(), Err::IoError, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, Err::IoError, "rename failed: " + ec.message());
}

Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::IoError, "cannot open " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  require(file.size() >= 4, Err::TruncatedData, "file shorter than magic");
  require(std::memcmp(file.data(), kMagic, 4) == 0, Err::BadMagic, "not an MJPK file");
  require(file.size() >= 16, Err::TruncatedData, "file shorter than fixed header");

  std::uint32_t version = 0;
  std::memcpy(&version, file.data() + 4, 4);
  require(version == kMjpkVersion, Err::VersionMismatch,
          "unsupported version " + std::to_string(version));

  std::uint64_t hlen = 0;
  std::memcpy(&hlen, file.data() + 8, 8);
  require(hlen <= file.size() - 16, Err::TruncatedData, "declared header exceeds file size");

  const char* htxt = reinterpret_cast<const char*>(file.data() + 16);
  const json header = json::parse(htxt, htxt + hlen, nullptr, false);
  require(!header.is_discarded(), Err::CorruptHeader, "header is not valid JSON");
  require(header.is_object() && header.contains("meta") && header.contains("tensors"),
          Err::CorruptHeader, "header missing meta/tensors");
  const json& tens = header.at("tensors");
  require(tens.is_object(), Err::CorruptHeader, "tensors field must be an object");

  const std::size_t payload_begin = 16 + hlen;
  const std::uint64_t payload_size = file.size() - payload_begin;

  Archive archive;
  archive.meta = header.at("meta");
  for (auto it = tens.begin(); it != tens.end(); ++it) {
    const json& entry = it.value();
    RawTensor rt;
    rt.dtype = parse_dtype(string_field(entry, "dtype"));
    const json& shape = field(entry, "shape");
    require(shape.is_array(), Err::CorruptHeader, "shape must be an array");
    for (const json& d : shape) {
      require(d.is_number_integer(), Err::CorruptHeader, "shape entries must be integers");
      rt.shape.push_back(d.get<std::int64_t>());
    }
    const std::uint64_t offset = uint_field(entry, "offset");
    const std::uint64_t nbytes = uint_field(entry, "bytes");
    const std::uint64_t expect = checked_numel(rt.shape) * dtype_size(rt.dtype);
    require(expect == nbytes, Err::ShapeMetaConflict,
            "tensor " + it.key() + ": declared shape disagrees with byte length");
    require(offset <= payload_size && nbytes <= payload_size - offset, Err::TruncatedData,
            "tensor " + it.key() + " extends past end of file");
    const std::uint8_t* src = file.data() + payload_begin + offset;
    rt.bytes.assign(src, src + nbytes);
    archive.tensors.emplace(it.key(), std::move(rt));
  }
  return archive;
}

std::string archive_kind(const Archive& archive) {
  return string_field(archive.meta, "kind");
}

void save_checkpoint(const std::string& path, const DenseCheckpoint& ckpt) {
  validate_checkpoint(ckpt);
  Archive a;
  a.meta["kind"] = "dense_checkpoint";
  a.meta["n_layers"] = ckpt.meta.n_layers;
  a.meta["embed_dim"] = ckpt.meta.embed_dim;
  a.meta["mlp_hidden"] = ckpt.meta.mlp_hidden;
  a.meta["n_heads"] = ckpt.meta.n_heads;
  a.meta["patch_size"] = ckpt.meta.patch_size;
  a.meta["image_size"] = ckpt.meta.image_size;
  a.meta["n_classes"] = ckpt.meta.n_classes;
  for (const auto& [name, t] : ckpt.tensors) a.tensors.emplace(name, RawTensor::from(t));
  save_archive(path, a);
}

DenseCheckpoint load_checkpoint(const std::string& path) {
  const Archive a = load_archive(path);
  require(archive_kind(a) == "dense_checkpoint", Err::MetaConflict,
          "archive is not a dense checkpoint");
  DenseCheckpoint ckpt;
  ckpt.meta.n_layers = int_field(a.meta, "n_layers");
  ckpt.meta.embed_dim = int_field(a.meta, "embed_dim");
  ckpt.meta.mlp_hidden = int_field(a.meta, "mlp_hidden");
  ckpt.meta.n_heads = int_field(a.meta, "n_heads");
  ckpt.meta.patch_size = int_field(a.meta, "patch_size");
  ckpt.meta.image_size = int_field(a.meta, "image_size");
  ckpt.meta.n_classes = int_field(a.meta, "n_classes");
  for (const auto& [name, rt] : a.tensors) ckpt.tensors.emplace(name, rt.to_f32());
  validate_checkpoint(ckpt);
  return ckpt;
}

namespace {

std::string layer_key(std::int64_t i, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "layer.%03lld.%s", static_cast<long long>(i), suffix);
  return buf;
}

std::string moe_key(std::int64_t block, const char* path, const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "moe.%03lld.%s.%s", static_cast<long long>(block), path, suffix);
  return buf;
}

}  // namespace

void save_profile(const std::string& path, const ActivationProfile& p) {
  Archive a;
  a.meta["kind"] = "activation_profile";
  a.meta["n_layers"] = p.n_layers;
  a.meta["channels"] = p.channels;
  a.meta["hidden"] = p.hidden;
  a.meta["n_tokens"] = p.n_tokens;
  for (std::int64_t i = 0; i < p.n_layers; ++i) {
    a.tensors.emplace(layer_key(i, "channel_mean_abs"),
                      RawTensor::from(Tensor64({p.channels}, p.channel_mean_abs[i])));
    a.tensors.emplace(layer_key(i, "neuron_mean_abs"),
                      RawTensor::from(Tensor64({p.hidden}, p.neuron_mean_abs[i])));
    const auto& edges = p.coactivation[i];
    if (!edges.empty()) {
      std::vector<std::int64_t> flat;
      flat.reserve(edges.size() * 3);
      for (const auto& e : edges) {
        flat.push_back(e.a);
        flat.push_back(e.b);
        flat.push_back(e.count);
      }
      a.tensors.emplace(layer_key(i, "coactivation"),
                        RawTensor::from_i64({static_cast<std::int64_t>(edges.size()), 3}, flat));
    }
  }
  save_archive(path, a);
}

ActivationProfile load_profile(const std::string& path) {
  const Archive a = load_archive(path);
  require(archive_kind(a) == "activation_profile", Err::MetaConflict,
          "archive is not an activation profile");
  ActivationProfile p;
  p.n_layers = int_field(a.meta, "n_layers");
  p.channels = int_field(a.meta, "channels");
  p.hidden = int_field(a.meta, "hidden");
  p.n_tokens = int_field(a.meta, "n_tokens");
  for (std::int64_t i = 0; i < p.n_layers; ++i) {
    auto it = a.tensors.find(layer_key(i, "channel_mean_abs"));
    require(it != a.tensors.end(), Err::MetaConflict, "profile missing channel stats");
    p.channel_mean_abs.push_back(it->second.to_f64().data);
    it = a.tensors.find(layer_key(i, "neuron_mean_abs"));
    require(it != a.tensors.end(), Err::MetaConflict, "profile missing neuron stats");
    p.neuron_mean_abs.push_back(it->second.to_f64().data);

    std::vector<ActivationProfile::CoactEdge> edges;
    it = a.tensors.find(layer_key(i, "coactivation"));
    if (it != a.tensors.end()) {
      const auto flat = it->second.to_i64();
      require(it->second.shape.size() == 2 && it->second.shape[1] == 3, Err::MetaConflict,
              "coactivation tensor must be [m, 3]");
      for (std::size_t j = 0; j + 2 < flat.size(); j += 3) {
        edges.push_back({static_cast<std::int32_t>(flat[j]), static_cast<std::int32_t>(flat[j + 1]),
                         flat[j + 2]});
      }
    }
    p.coactivation.push_back(std::move(edges));
  }
  return p;
}

void save_bundle(const std::string& path, const MoEInitBundle& b) {
  Archive a;
  a.meta["kind"] = "moe_bundle";
  a.meta["n_layers"] = b.meta.n_layers;
  a.meta["d_prime"] = b.meta.d_prime;
  a.meta["n_heads"] = b.meta.n_heads;
  a.meta["patch_size"] = b.meta.patch_size;
  a.meta["image_size"] = b.meta.image_size;
  a.meta["n_classes"] = b.meta.n_classes;
  a.meta["moe_from"] = b.meta.moe_from;
  a.meta["moe_to"] = b.meta.moe_to;
  a.meta["e_core"] = b.meta.e_core;
  a.meta["e_univ"] = b.meta.e_univ;
  a.meta["slots"] = b.meta.slots;
  a.meta["h_core"] = b.meta.h_core;
  a.meta["h_univ"] = b.meta.h_univ;
  a.meta["t_init"] = b.meta.t_init;
  a.meta["strategy"] = b.meta.strategy;
  a.meta["seed"] = b.meta.seed;
  a.meta["source_d"] = b.meta.source_d;
  a.meta["source_hidden"] = b.meta.source_hidden;
  a.meta["channels"] = b.channels;

  nlohmann::json prov = nlohmann::json::array();
  for (const auto& lp : b.provenance) {
    nlohmann::json e;
    e["layer"] = lp.layer;
    e["strategy"] = lp.strategy;
    e["core"] = lp.core_neurons;
    e["univ"] = lp.univ_neurons;
    prov.push_back(std::move(e));
  }
  a.meta["provenance"] = std::move(prov);

  for (const auto& [name, t] : b.dense_tensors) a.tensors.emplace(name, RawTensor::from(t));
  for (std::int64_t i = 0; i < b.meta.n_moe_layers(); ++i) {
    const std::int64_t block = b.meta.moe_from - 1 + i;
    const ExpertStackInit& core = b.core_stacks[i];
    const ExpertStackInit& univ = b.univ_stacks[i];
    a.tensors.emplace(moe_key(block, "core", "w1"), RawTensor::from(core.w1));
    a.tensors.emplace(moe_key(block, "core", "b1"), RawTensor::from(core.b1));
    a.tensors.emplace(moe_key(block, "core", "w2"), RawTensor::from(core.w2));
    a.tensors.emplace(moe_key(block, "core", "b2"), RawTensor::from(core.b2));
    if (b.meta.e_univ > 0) {
      a.tensors.emplace(moe_key(block, "univ", "w1"), RawTensor::from(univ.w1));
      a.tensors.emplace(moe_key(block, "univ", "b1"), RawTensor::from(univ.b1));
      a.tensors.emplace(moe_key(block, "univ", "w2"), RawTensor::from(univ.w2));
      a.tensors.emplace(moe_key(block, "univ", "b2"), RawTensor::from(univ.b2));
    }
  }
  save_archive(path, a);
}

MoEInitBundle load_bundle(const std::string& path) {
  const Archive a = load_archive(path);
  require(archive_kind(a) == "moe_bundle", Err::MetaConflict, "archive is not a MoE bundle");
  MoEInitBundle b;
  b.meta.n_layers = int_field(a.meta, "n_layers");
  b.meta.d_prime = int_field(a.meta, "d_prime");
  b.meta.n_heads = int_field(a.meta, "n_heads");
  b.meta.patch_size = int_field(a.meta, "patch_size");
  b.meta.image_size = int_field(a.meta, "image_size");
  b.meta.n_classes = int_field(a.meta, "n_classes");
  b.meta.moe_from = int_field(a.meta, "moe_from");
  b.meta.moe_to = int_field(a.meta, "moe_to");
  b.meta.e_core = int_field(a.meta, "e_core");
  b.meta.e_univ = int_field(a.meta, "e_univ");
  b.meta.slots = int_field(a.meta, "slots");
  b.meta.h_core = int_field(a.meta, "h_core");
  b.meta.h_univ = int_field(a.meta, "h_univ");
  b.meta.t_init = double_field(a.meta, "t_init");
  b.meta.strategy = string_field(a.meta, "strategy");
  b.meta.seed = uint_field(a.meta, "seed");
  b.meta.source_d = int_field(a.meta, "source_d");
  b.meta.source_hidden = int_field(a.meta, "source_hidden");

  const nlohmann::json& ch = field(a.meta, "channels");
  require(ch.is_array(), Err::CorruptHeader, "channels must be an array");
  for (const auto& c : ch) b.channels.push_back(c.get<std::int32_t>());

  const nlohmann::json& prov = field(a.meta, "provenance");
  require(prov.is_array(), Err::CorruptHeader, "provenance must be an array");
  for (const auto& e : prov) {
    LayerProvenance lp;
    lp.layer = static_cast<std::int32_t>(int_field(e, "layer"));
    lp.strategy = string_field(e, "strategy");
    lp.core_neurons = e.at("core").get<std::vector<std::vector<std::int32_t>>>();
    lp.univ_neurons = e.at("univ").get<std::vector<std::vector<std::int32_t>>>();
    b.provenance.push_back(std::move(lp));
  }

  for (const auto& [name, rt] : a.tensors) {
    if (name.rfind("moe.", 0) != 0) b.dense_tensors.emplace(name, rt.to_f32());
  }
  for (std::int64_t i = 0; i < b.meta.n_moe_layers(); ++i) {
    const std::int64_t block = b.meta.moe_from - 1 + i;
    ExpertStackInit core, univ;
    core.w1 = tensor_field(a, moe_key(block, "core", "w1"));
    core.b1 = tensor_field(a, moe_key(block, "core", "b1"));
    core.w2 = tensor_field(a, moe_key(block, "core", "w2"));
    core.b2 = tensor_field(a, moe_key(block, "core", "b2"));
    if (b.meta.e_univ > 0) {
      univ.w1 = tensor_field(a, moe_key(block, "univ", "w1"));
      univ.b1 = tensor_field(a, moe_key(block, "univ", "b1"));
      univ.w2 = tensor_field(a, moe_key(block, "univ", "w2"));
      univ.b2 = tensor_field(a, moe_key(block, "univ", "b2"));
    }
    b.core_stacks.push_back(std::move(core));
    b.univ_stacks.push_back(std::move(univ));
  }
  return b;
}

}  // namespace moekit
