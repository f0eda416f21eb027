// SPDX-License-Identifier: Apache-2.0
#include "moekit/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "moekit/error.hpp"

namespace moekit {

namespace {

void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::uint8_t bytes[4] = {static_cast<std::uint8_t>(v >> 24),
                                 static_cast<std::uint8_t>(v >> 16),
                                 static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t pos) {
  require(pos + 4 <= buf.size(), Err::ParseError, "idx file truncated");
  return (std::uint32_t(buf[pos]) << 24) | (std::uint32_t(buf[pos + 1]) << 16) |
         (std::uint32_t(buf[pos + 2]) << 8) | std::uint32_t(buf[pos + 3]);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::IoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Blob {
  double cx, cy, sigma;
  double color[3];
};

}  // namespace

void Dataset::validate() const {
  require(static_cast<std::int64_t>(images.size()) == size() * 3 * image_size * image_size,
          Err::ParseError, "image buffer does not match item count");
  for (std::int32_t l : labels) {
    require(l >= 0 && l < n_classes, Err::LabelOutOfRange, "label outside class range");
  }
}

Dataset make_synthetic(const SynthConfig& cfg) {
  require(cfg.n_classes >= 2 && cfg.n >= 1 && cfg.image_size >= 8, Err::InvalidSpec,
          "synthetic dataset needs >=2 classes, >=1 item, images >=8px");
  const std::int64_t hw = cfg.image_size;

  // Fixed per-class blob arrangements.
  Rng class_rng = Rng(cfg.seed).child({0xC1A55u});
  std::vector<std::vector<Blob>> class_blobs(cfg.n_classes);
  std::vector<std::array<double, 3>> class_base(cfg.n_classes);
  for (std::int64_t c = 0; c < cfg.n_classes; ++c) {
    for (int j = 0; j < 3; ++j) class_base[c][j] = 0.3 * (class_rng.uniform() - 0.5);
    const int blobs = 3 + static_cast<int>(class_rng.below(2));
    for (int m = 0; m < blobs; ++m) {
      Blob b;
      b.cx = (0.2 + 0.6 * class_rng.uniform()) * hw;
      b.cy = (0.2 + 0.6 * class_rng.uniform()) * hw;
      b.sigma = (0.08 + 0.12 * class_rng.uniform()) * hw;
      for (int j = 0; j < 3; ++j) b.color[j] = 1.4 * (class_rng.uniform() - 0.5);
      class_blobs[c].push_back(b);
    }
  }

  Dataset ds;
  ds.image_size = hw;
  ds.n_classes = cfg.n_classes;
  ds.split = cfg.split;
  ds.images.resize(static_cast<std::size_t>(cfg.n * 3 * hw * hw));
  ds.labels.resize(static_cast<std::size_t>(cfg.n));

  const std::int64_t max_shift = hw / 8;
  for (std::int64_t i = 0; i < cfg.n; ++i) {
    const std::int32_t label = static_cast<std::int32_t>(i % cfg.n_classes);
    ds.labels[i] = label;
    Rng item_rng = Rng(cfg.seed).child({0x17E3u, static_cast<std::uint64_t>(i)});
    const std::int64_t dx = static_cast<std::int64_t>(item_rng.below(2 * max_shift + 1)) - max_shift;
    const std::int64_t dy = static_cast<std::int64_t>(item_rng.below(2 * max_shift + 1)) - max_shift;
    const double gain = 0.85 + 0.3 * item_rng.uniform();

    for (std::int64_t y = 0; y < hw; ++y) {
      for (std::int64_t x = 0; x < hw; ++x) {
        double px[3] = {class_base[label][0], class_base[label][1], class_base[label][2]};
        for (const Blob& b : class_blobs[label]) {
          const double ddx = double(x - dx) - b.cx;
          const double ddy = double(y - dy) - b.cy;
          const double w = std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * b.sigma * b.sigma));
          for (int j = 0; j < 3; ++j) px[j] += w * b.color[j];
        }
        for (int j = 0; j < 3; ++j) {
          const double v = 0.5 + 0.5 * (gain * px[j] + cfg.noise * item_rng.normal());
          const double clamped = std::min(1.0, std::max(0.0, v));
          ds.images[static_cast<std::size_t>(((i * 3 + j) * hw + y) * hw + x)] =
              static_cast<std::uint8_t>(std::lround(clamped * 255.0));
        }
      }
    }
  }
  ds.validate();
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::int64_t n_classes, const std::string& split) {
  const auto ibuf = read_file(images_path);
  require(ibuf.size() >= 4, Err::ParseError, "idx image file too short");
  require(ibuf[0] == 0 && ibuf[1] == 0 && ibuf[2] == 0x08 && ibuf[3] == 4, Err::ParseError,
          "idx image file must be u8 with 4 dims");
  const std::uint32_t n = read_be32(ibuf, 4);
  const std::uint32_t ch = read_be32(ibuf, 8);
  const std::uint32_t h = read_be32(ibuf, 12);
  const std::uint32_t w = read_be32(ibuf, 16);
  require(ch == 3 && h == w && h >= 1, Err::ParseError, "expected square RGB idx images");
  const std::size_t expect = std::size_t(n) * 3 * h * w;
  require(ibuf.size() == 20 + expect, Err::ParseError, "idx image payload size mismatch");

  const auto lbuf = read_file(labels_path);
  require(lbuf.size() >= 4, Err::ParseError, "idx label file too short");
  require(lbuf[0] == 0 && lbuf[1] == 0 && lbuf[2] == 0x0C && lbuf[3] == 1, Err::ParseError,
          "idx label file must be i32 with 1 dim");
  const std::uint32_t ln = read_be32(lbuf, 4);
  require(ln == n, Err::ParseError, "image and label counts differ");
  require(lbuf.size() == 8 + std::size_t(ln) * 4, Err::ParseError,
          "idx label payload size mismatch");

  Dataset ds;
  ds.image_size = h;
  ds.n_classes = n_classes;
  ds.split = split;
  ds.images.assign(ibuf.begin() + 20, ibuf.end());
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<std::int32_t>(read_be32(lbuf, 8 + std::size_t(i) * 4));
  }
  ds.validate();
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.validate();
  {
    std::ofstream out(images_path, std::ios::binary | std::ios::trunc);
    require(out.good(), Err::IoError, "cannot open " + images_path);
    const std::uint8_t magic[4] = {0, 0, 0x08, 4};
    out.write(reinterpret_cast<const char*>(magic), 4);
    write_be32(out, static_cast<std::uint32_t>(ds.size()));
    write_be32(out, 3);
    write_be32(out, static_cast<std::uint32_t>(ds.image_size));
    write_be32(out, static_cast<std::uint32_t>(ds.image_size));
    out.write(reinterpret_cast<const char*>(ds.images.data()),
              static_cast<std::streamsize>(ds.images.size()));
    require(out.good(), Err::IoError, "write failed for " + images_path);
  }
  {
    std::ofstream out(labels_path, std::ios::binary | std::ios::trunc);
    require(out.good(), Err::IoError, "cannot open " + labels_path);
    const std::uint8_t magic[4] = {0, 0, 0x0C, 1};
    out.write(reinterpret_cast<const char*>(magic), 4);
    write_be32(out, static_cast<std::uint32_t>(ds.size()));
    for (std::int32_t l : ds.labels) write_be32(out, static_cast<std::uint32_t>(l));
    require(out.good(), Err::IoError, "write failed for " + labels_path);
  }
}

Tensor batch_images(const Dataset& ds, const std::vector<std::int64_t>& indices) {
  const std::int64_t hw = ds.image_size;
  const std::int64_t item = 3 * hw * hw;
  Tensor out({static_cast<std::int64_t>(indices.size()), 3, hw, hw});
  for (std::size_t bi = 0; bi < indices.size(); ++bi) {
    const std::int64_t i = indices[bi];
    require(i >= 0 && i < ds.size(), Err::IndexOutOfRange, "batch index out of range");
    const std::uint8_t* src = ds.images.data() + i * item;
    float* dst = out.ptr() + static_cast<std::int64_t>(bi) * item;
    for (std::int64_t j = 0; j < item; ++j) {
      dst[j] = (static_cast<float>(src[j]) / 255.0f - 0.5f) * 2.0f;
    }
  }
  return out;
}

std::vector<std::int32_t> batch_labels(const Dataset& ds,
                                       const std::vector<std::int64_t>& indices) {
  std::vector<std::int32_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out[i] = ds.labels[static_cast<std::size_t>(indices[i])];
  }
  return out;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng(seed).child({0x0DE8u, static_cast<std::uint64_t>(epoch)});
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }
  return order;
}

}  // namespace moekit
