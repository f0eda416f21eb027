// SPDX-License-Identifier: Apache-2.0
#include "moekit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace moekit {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// Odometer over `dims`; per step advances the offsets of both operands by
// their per-axis strides. Returns false when iteration wraps around.
struct Odometer {
  const std::vector<std::int64_t>& dims;
  std::vector<std::int64_t> idx;

  explicit Odometer(const std::vector<std::int64_t>& d) : dims(d), idx(d.size(), 0) {}

  template <typename Fn>
  bool step(Fn&& on_axis) {
    for (int i = static_cast<int>(dims.size()) - 1; i >= 0; --i) {
      if (++idx[i] < dims[i]) {
        on_axis(i, +1);
        return true;
      }
      idx[i] = 0;
      on_axis(i, -static_cast<int>(dims[i] - 1));
    }
    return false;
  }
};

struct AxisPlan {
  std::vector<std::int64_t> dims;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
};

void normalize_axes(std::vector<int>& axes, int rank) {
  require(!axes.empty(), Err::InvalidSpec, "softmax_axis: empty axis set");
  for (auto& a : axes) {
    if (a < 0) a += rank;
    require(a >= 0 && a < rank, Err::ShapeMismatch, "softmax_axis: axis out of range");
  }
  std::sort(axes.begin(), axes.end());
  require(std::adjacent_find(axes.begin(), axes.end()) == axes.end(), Err::InvalidSpec,
          "softmax_axis: duplicate axis");
}

// Offsets of every element of the joint axis-set relative to a group base,
// plus an iteration plan over the remaining axes.
struct GroupPlan {
  std::vector<std::int64_t> joint_offsets;
  std::vector<std::int64_t> rem_dims;
  std::vector<std::int64_t> rem_strides;
  std::int64_t groups = 1;
};

GroupPlan group_plan(const Shape& shape, const std::vector<int>& axes) {
  const Shape strides = strides_of(shape);
  GroupPlan plan;
  plan.joint_offsets = {0};
  for (int ax : axes) {
    std::vector<std::int64_t> next;
    next.reserve(plan.joint_offsets.size() * shape[ax]);
    for (std::int64_t base : plan.joint_offsets) {
      for (std::int64_t i = 0; i < shape[ax]; ++i) next.push_back(base + i * strides[ax]);
    }
    plan.joint_offsets = std::move(next);
  }
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (std::find(axes.begin(), axes.end(), i) == axes.end()) {
      plan.rem_dims.push_back(shape[i]);
      plan.rem_strides.push_back(strides[i]);
      plan.groups *= shape[i];
    }
  }
  return plan;
}

template <typename Fn>
void for_each_group(const GroupPlan& plan, Fn&& fn) {
  if (plan.rem_dims.empty()) {
    fn(0);
    return;
  }
  std::int64_t base = 0;
  Odometer odo(plan.rem_dims);
  fn(base);
  while (odo.step([&](int axis, int delta) { base += delta * plan.rem_strides[axis]; })) {
    fn(base);
  }
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, Err::ShapeMismatch, "matmul expects rank-2 tensors");
  require(a.shape[1] == b.shape[0], Err::ShapeMismatch, "matmul inner dimensions differ");
  const std::int64_t r = a.shape[0], k = a.shape[1], c = b.shape[1];
  TensorT<T> out({r, c});
  for (std::int64_t i = 0; i < r; ++i) {
    const T* arow = a.ptr() + i * k;
    T* orow = out.ptr() + i * c;
    for (std::int64_t t = 0; t < k; ++t) {
      const T av = arow[t];
      const T* brow = b.ptr() + t * c;
      for (std::int64_t j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

template <typename T>
void matmul_backward(const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& gout,
                     TensorT<T>& ga, TensorT<T>& gb) {
  const std::int64_t r = a.shape[0], k = a.shape[1], c = b.shape[1];
  require(gout.shape == Shape({r, c}), Err::ShapeMismatch, "matmul_backward: bad gout shape");
  ga = TensorT<T>({r, k});
  gb = TensorT<T>({k, c});
  for (std::int64_t i = 0; i < r; ++i) {
    const T* grow = gout.ptr() + i * c;
    T* garow = ga.ptr() + i * k;
    for (std::int64_t t = 0; t < k; ++t) {
      const T* brow = b.ptr() + t * c;
      T acc = 0;
      for (std::int64_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
      garow[t] = acc;
    }
    const T* arow = a.ptr() + i * k;
    for (std::int64_t t = 0; t < k; ++t) {
      const T av = arow[t];
      T* gbrow = gb.ptr() + t * c;
      for (std::int64_t j = 0; j < c; ++j) gbrow[j] += av * grow[j];
    }
  }
}

template <typename T>
TensorT<T> batched_contract(const TensorT<T>& a, const TensorT<T>& b, const ContractSpec& spec) {
  require(static_cast<int>(spec.lhs.size()) == a.rank(), Err::ShapeMismatch,
          "batched_contract: lhs label count does not match operand rank");
  require(static_cast<int>(spec.rhs.size()) == b.rank(), Err::ShapeMismatch,
          "batched_contract: rhs label count does not match operand rank");

  auto has_dup = [](const std::string& s) {
    std::string t = s;
    std::sort(t.begin(), t.end());
    return std::adjacent_find(t.begin(), t.end()) != t.end();
  };
  require(!has_dup(spec.lhs) && !has_dup(spec.rhs) && !has_dup(spec.out), Err::InvalidSpec,
          "batched_contract: repeated label inside one operand");

  // Label dimension table with shape agreement between the operands.
  std::int64_t dim_of[256];
  std::fill(std::begin(dim_of), std::end(dim_of), -1);
  std::int64_t stride_a_of[256] = {0}, stride_b_of[256] = {0};
  const Shape sa = strides_of(a.shape), sb = strides_of(b.shape);
  for (std::size_t i = 0; i < spec.lhs.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(spec.lhs[i]);
    dim_of[c] = a.shape[i];
    stride_a_of[c] = sa[i];
  }
  for (std::size_t i = 0; i < spec.rhs.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(spec.rhs[i]);
    if (dim_of[c] >= 0) {
      require(dim_of[c] == b.shape[i], Err::ShapeMismatch,
              "batched_contract: shared label has conflicting sizes");
    }
    dim_of[c] = b.shape[i];
    stride_b_of[c] = sb[i];
  }

  auto in_lhs = [&](char c) { return spec.lhs.find(c) != std::string::npos; };
  auto in_rhs = [&](char c) { return spec.rhs.find(c) != std::string::npos; };
  auto in_out = [&](char c) { return spec.out.find(c) != std::string::npos; };

  for (char c : spec.out) {
    require(in_lhs(c) || in_rhs(c), Err::InvalidSpec,
            "batched_contract: output label missing from inputs");
  }
  for (char c : spec.lhs) {
    require(in_rhs(c) || in_out(c), Err::InvalidSpec,
            "batched_contract: lhs label would be implicitly reduced");
  }
  for (char c : spec.rhs) {
    require(in_lhs(c) || in_out(c), Err::InvalidSpec,
            "batched_contract: rhs label would be implicitly reduced");
  }

  AxisPlan outp, sum;
  Shape out_shape;
  for (char c : spec.out) {
    const unsigned char u = static_cast<unsigned char>(c);
    out_shape.push_back(dim_of[u]);
    outp.dims.push_back(dim_of[u]);
    outp.stride_a.push_back(in_lhs(c) ? stride_a_of[u] : 0);
    outp.stride_b.push_back(in_rhs(c) ? stride_b_of[u] : 0);
  }
  for (char c : spec.lhs) {
    if (in_rhs(c) && !in_out(c)) {
      const unsigned char u = static_cast<unsigned char>(c);
      sum.dims.push_back(dim_of[u]);
      sum.stride_a.push_back(stride_a_of[u]);
      sum.stride_b.push_back(stride_b_of[u]);
    }
  }

  if (out_shape.empty()) out_shape.push_back(1);  // scalar result holder
  TensorT<T> out(out_shape);

  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();

  // Specialized executions for the layouts the model actually uses; the
  // generic odometer walk below handles everything else.
  //
  // (1) "row" kernel: the last output label lives contiguously in exactly one
  // operand and is absent from the other, so the innermost loop is a
  // contiguous multiply-accumulate over that label.
  if (!spec.out.empty() && !sum.dims.empty()) {
    const char last = spec.out.back();
    const unsigned char lu = static_cast<unsigned char>(last);
    const bool last_in_lhs = spec.lhs.find(last) != std::string::npos;
    const bool last_in_rhs = spec.rhs.find(last) != std::string::npos;
    const bool rhs_row = last_in_rhs && !last_in_lhs && stride_b_of[lu] == 1;
    const bool lhs_row = last_in_lhs && !last_in_rhs && stride_a_of[lu] == 1;
    if (rhs_row || lhs_row) {
      const std::int64_t row_len = dim_of[lu];
      AxisPlan outer;
      for (std::size_t i = 0; i + 1 < spec.out.size(); ++i) {
        const unsigned char u = static_cast<unsigned char>(spec.out[i]);
        outer.dims.push_back(dim_of[u]);
        outer.stride_a.push_back(spec.lhs.find(spec.out[i]) != std::string::npos ? stride_a_of[u]
                                                                                 : 0);
        outer.stride_b.push_back(spec.rhs.find(spec.out[i]) != std::string::npos ? stride_b_of[u]
                                                                                 : 0);
      }
      std::int64_t base_a = 0, base_b = 0, flat = 0;
      Odometer odo(outer.dims);
      while (true) {
        T* orow = po + flat;
        for (std::int64_t l = 0; l < row_len; ++l) orow[l] = 0;
        std::int64_t oa = base_a, ob = base_b;
        Odometer inner(sum.dims);
        bool more = true;
        while (more) {
          if (rhs_row) {
            const T av = pa[oa];
            const T* brow = pb + ob;
            for (std::int64_t l = 0; l < row_len; ++l) orow[l] += av * brow[l];
          } else {
            const T bv = pb[ob];
            const T* arow = pa + oa;
            for (std::int64_t l = 0; l < row_len; ++l) orow[l] += bv * arow[l];
          }
          more = inner.step([&](int axis, int delta) {
            oa += delta * sum.stride_a[axis];
            ob += delta * sum.stride_b[axis];
          });
        }
        flat += row_len;
        if (outer.dims.empty()) break;
        if (!odo.step([&](int axis, int delta) {
              base_a += delta * outer.stride_a[axis];
              base_b += delta * outer.stride_b[axis];
            })) {
          break;
        }
      }
      return out;
    }
  }

  const bool one_sum = sum.dims.size() == 1;
  const std::int64_t slen = one_sum ? sum.dims[0] : 0;
  const std::int64_t ssa = one_sum ? sum.stride_a[0] : 0;
  const std::int64_t ssb = one_sum ? sum.stride_b[0] : 0;
  // (2) contiguous dot product when the single summed label is innermost in
  // both operands.
  const bool unit_dot = one_sum && ssa == 1 && ssb == 1;

  std::int64_t base_a = 0, base_b = 0;
  Odometer odo(outp.dims);
  std::int64_t flat = 0;
  while (true) {
    T acc = 0;
    if (unit_dot) {
      const T* qa = pa + base_a;
      const T* qb = pb + base_b;
      for (std::int64_t t = 0; t < slen; ++t) acc += qa[t] * qb[t];
    } else if (one_sum) {
      const T* qa = pa + base_a;
      const T* qb = pb + base_b;
      for (std::int64_t t = 0; t < slen; ++t) acc += qa[t * ssa] * qb[t * ssb];
    } else if (sum.dims.empty()) {
      acc = pa[base_a] * pb[base_b];
    } else {
      std::int64_t oa = base_a, ob = base_b;
      Odometer inner(sum.dims);
      acc = pa[oa] * pb[ob];
      while (inner.step([&](int axis, int delta) {
        oa += delta * sum.stride_a[axis];
        ob += delta * sum.stride_b[axis];
      })) {
        acc += pa[oa] * pb[ob];
      }
    }
    po[flat++] = acc;
    if (outp.dims.empty()) break;
    if (!odo.step([&](int axis, int delta) {
          base_a += delta * outp.stride_a[axis];
          base_b += delta * outp.stride_b[axis];
        })) {
      break;
    }
  }
  return out;
}

template <typename T>
void batched_contract_backward(const TensorT<T>& a, const TensorT<T>& b, const ContractSpec& spec,
                               const TensorT<T>& gout, TensorT<T>& ga, TensorT<T>& gb) {
  // The transpose of a valid restricted contraction is again a valid
  // restricted contraction, so both input gradients reuse the forward kernel.
  ga = batched_contract(gout, b, ContractSpec{spec.out, spec.rhs, spec.lhs});
  gb = batched_contract(gout, a, ContractSpec{spec.out, spec.lhs, spec.rhs});
  require(ga.shape == a.shape && gb.shape == b.shape, Err::ShapeMismatch,
          "batched_contract_backward: gradient shape disagreement");
}

template <typename T>
TensorT<T> softmax_axis(const TensorT<T>& x, std::vector<int> axes, double temperature) {
  require(std::isfinite(temperature) && temperature > 0.0, Err::InvalidTemperature,
          "softmax temperature must be finite and positive");
  normalize_axes(axes, x.rank());
  const GroupPlan plan = group_plan(x.shape, axes);

  TensorT<T> y(x.shape);
  const T* px = x.ptr();
  T* py = y.ptr();
  const double inv_t = 1.0 / temperature;
  for_each_group(plan, [&](std::int64_t base) {
    double mx = -INFINITY;
    for (std::int64_t off : plan.joint_offsets) {
      mx = std::max(mx, static_cast<double>(px[base + off]));
    }
    double sum = 0.0;
    for (std::int64_t off : plan.joint_offsets) {
      const double e = std::exp((static_cast<double>(px[base + off]) - mx) * inv_t);
      py[base + off] = static_cast<T>(e);
      sum += e;
    }
    const double inv_sum = 1.0 / sum;
    for (std::int64_t off : plan.joint_offsets) {
      py[base + off] = static_cast<T>(static_cast<double>(py[base + off]) * inv_sum);
    }
  });
  return y;
}

template <typename T>
TensorT<T> softmax_axis_backward(const TensorT<T>& y, const TensorT<T>& gout,
                                 std::vector<int> axes, double temperature, const TensorT<T>* x,
                                 double* grad_temp) {
  require(y.same_shape(gout), Err::ShapeMismatch, "softmax_axis_backward: shape mismatch");
  require(grad_temp == nullptr || x != nullptr, Err::InvalidSpec,
          "softmax_axis_backward: temperature gradient needs the forward input");
  normalize_axes(axes, y.rank());
  const GroupPlan plan = group_plan(y.shape, axes);

  TensorT<T> gx(y.shape);
  const T* py = y.ptr();
  const T* pg = gout.ptr();
  T* pgx = gx.ptr();
  const double inv_t = 1.0 / temperature;
  double gt = 0.0;
  for_each_group(plan, [&](std::int64_t base) {
    double dot = 0.0;
    for (std::int64_t off : plan.joint_offsets) {
      dot += static_cast<double>(py[base + off]) * static_cast<double>(pg[base + off]);
    }
    for (std::int64_t off : plan.joint_offsets) {
      const double gz =
          static_cast<double>(py[base + off]) * (static_cast<double>(pg[base + off]) - dot);
      pgx[base + off] = static_cast<T>(gz * inv_t);
      if (grad_temp) {
        gt -= gz * static_cast<double>(x->ptr()[base + off]) * inv_t * inv_t;
      }
    }
  });
  if (grad_temp) *grad_temp += gt;
  return gx;
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      double eps) {
  const std::int64_t d = x.shape.back();
  require(gamma.shape == Shape({d}) && beta.shape == Shape({d}), Err::ShapeMismatch,
          "layer_norm: gamma/beta must match the last axis");
  const std::int64_t rows = x.numel() / d;
  TensorT<T> y(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * d;
    T* py = y.ptr() + r * d;
    double mean = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mean += px[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      const double c = px[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < d; ++i) {
      const double xhat = (px[i] - mean) * inv_std;
      py[i] = static_cast<T>(xhat * gamma.data[i] + beta.data[i]);
    }
  }
  return y;
}

template <typename T>
void layer_norm_backward(const TensorT<T>& x, const TensorT<T>& gamma, double eps,
                         const TensorT<T>& gout, TensorT<T>& gx, TensorT<T>& ggamma,
                         TensorT<T>& gbeta) {
  require(x.same_shape(gout), Err::ShapeMismatch, "layer_norm_backward: shape mismatch");
  const std::int64_t d = x.shape.back();
  const std::int64_t rows = x.numel() / d;
  gx = TensorT<T>(x.shape);
  ggamma = TensorT<T>({d});
  gbeta = TensorT<T>({d});
  std::vector<double> xhat(d);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * d;
    const T* pg = gout.ptr() + r * d;
    T* pgx = gx.ptr() + r * d;
    double mean = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mean += px[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      const double c = px[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + eps);

    double sum1 = 0.0, sum2 = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      xhat[i] = (px[i] - mean) * inv_std;
      const double dxhat = static_cast<double>(pg[i]) * gamma.data[i];
      sum1 += dxhat;
      sum2 += dxhat * xhat[i];
      ggamma.data[i] += static_cast<T>(static_cast<double>(pg[i]) * xhat[i]);
      gbeta.data[i] += pg[i];
    }
    for (std::int64_t i = 0; i < d; ++i) {
      const double dxhat = static_cast<double>(pg[i]) * gamma.data[i];
      pgx[i] = static_cast<T>(inv_std * (dxhat - (sum1 + xhat[i] * sum2) / static_cast<double>(d)));
    }
  }
}

template <typename T>
TensorT<T> l2_normalize(const TensorT<T>& x, double eps) {
  const std::int64_t d = x.shape.back();
  const std::int64_t rows = x.numel() / d;
  TensorT<T> y(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * d;
    T* py = y.ptr() + r * d;
    double ss = 0.0;
    for (std::int64_t i = 0; i < d; ++i) ss += static_cast<double>(px[i]) * px[i];
    const double inv = 1.0 / std::sqrt(ss + eps * eps);
    for (std::int64_t i = 0; i < d; ++i) py[i] = static_cast<T>(px[i] * inv);
  }
  return y;
}

template <typename T>
TensorT<T> l2_normalize_backward(const TensorT<T>& x, const TensorT<T>& gout, double eps) {
  require(x.same_shape(gout), Err::ShapeMismatch, "l2_normalize_backward: shape mismatch");
  const std::int64_t d = x.shape.back();
  const std::int64_t rows = x.numel() / d;
  TensorT<T> gx(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * d;
    const T* pg = gout.ptr() + r * d;
    T* pgx = gx.ptr() + r * d;
    double ss = 0.0, dot = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
      ss += static_cast<double>(px[i]) * px[i];
      dot += static_cast<double>(px[i]) * pg[i];
    }
    const double inv = 1.0 / std::sqrt(ss + eps * eps);
    const double inv3 = inv * inv * inv;
    for (std::int64_t i = 0; i < d; ++i) {
      pgx[i] = static_cast<T>(pg[i] * inv - inv3 * dot * px[i]);
    }
  }
  return gx;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  TensorT<T> y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    y.data[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  return y;
}

template <typename T>
TensorT<T> gelu_backward(const TensorT<T>& x, const TensorT<T>& gout) {
  require(x.same_shape(gout), Err::ShapeMismatch, "gelu_backward: shape mismatch");
  TensorT<T> gx(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    gx.data[i] = static_cast<T>(gout.data[i] * (cdf + v * pdf));
  }
  return gx;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), Err::ShapeMismatch, "add: shape mismatch");
  TensorT<T> out(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  const std::int64_t d = x.shape.back();
  require(bias.shape == Shape({d}), Err::ShapeMismatch, "add_bias: bias must match last axis");
  TensorT<T> out(x.shape);
  const std::int64_t rows = x.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* px = x.ptr() + r * d;
    T* po = out.ptr() + r * d;
    for (std::int64_t i = 0; i < d; ++i) po[i] = px[i] + bias.data[i];
  }
  return out;
}

template <typename T>
TensorT<T> bias_grad(const TensorT<T>& gout) {
  const std::int64_t d = gout.shape.back();
  TensorT<T> gb({d});
  const std::int64_t rows = gout.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* pg = gout.ptr() + r * d;
    for (std::int64_t i = 0; i < d; ++i) gb.data[i] += pg[i];
  }
  return gb;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, double c) {
  TensorT<T> out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = static_cast<T>(x.data[i] * c);
  return out;
}

template <typename T>
TensorT<T> reduce_mean(const TensorT<T>& x, int axis) {
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(), Err::ShapeMismatch, "reduce_mean: axis out of range");
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  TensorT<T> out(out_shape);
  const Shape st = strides_of(x.shape);
  const std::int64_t n = x.shape[axis];
  const std::int64_t inner = st[axis];
  const std::int64_t outer = x.numel() / (n * inner);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      const T* px = x.ptr() + o * n * inner + i;
      for (std::int64_t t = 0; t < n; ++t) acc += px[t * inner];
      out.data[static_cast<std::size_t>(o * inner + i)] = static_cast<T>(acc * inv);
    }
  }
  return out;
}

template <typename T>
TensorT<T> reduce_mean_backward(const TensorT<T>& gout, const Shape& input_shape, int axis) {
  if (axis < 0) axis += static_cast<int>(input_shape.size());
  TensorT<T> gx(input_shape);
  const Shape st = strides_of(input_shape);
  const std::int64_t n = input_shape[axis];
  const std::int64_t inner = st[axis];
  const std::int64_t outer = gx.numel() / (n * inner);
  require(gout.numel() == outer * inner, Err::ShapeMismatch,
          "reduce_mean_backward: gout does not match reduced shape");
  const double inv = 1.0 / static_cast<double>(n);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const T g = static_cast<T>(gout.data[static_cast<std::size_t>(o * inner + i)] * inv);
      T* px = gx.ptr() + o * n * inner + i;
      for (std::int64_t t = 0; t < n; ++t) px[t * inner] = g;
    }
  }
  return gx;
}

template <typename T>
double cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& labels,
                     double smoothing) {
  require(logits.rank() == 2, Err::ShapeMismatch, "cross_entropy expects [batch, classes]");
  const std::int64_t b = logits.shape[0], c = logits.shape[1];
  require(static_cast<std::int64_t>(labels.size()) == b, Err::ShapeMismatch,
          "cross_entropy: label count mismatch");
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const std::int32_t y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < c, Err::InvalidLabel, "cross_entropy: label out of range");
    const T* row = logits.ptr() + i * c;
    double mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double lse = 0.0, sum_z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      lse += std::exp(row[j] - mx);
      sum_z += row[j];
    }
    lse = mx + std::log(lse);
    total += lse - (1.0 - smoothing) * row[y] - smoothing / static_cast<double>(c) * sum_z;
  }
  return total / static_cast<double>(b);
}

template <typename T>
TensorT<T> cross_entropy_backward(const TensorT<T>& logits,
                                  const std::vector<std::int32_t>& labels, double smoothing) {
  const std::int64_t b = logits.shape[0], c = logits.shape[1];
  TensorT<T> g(logits.shape);
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::int64_t i = 0; i < b; ++i) {
    const std::int32_t y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < c, Err::InvalidLabel, "cross_entropy: label out of range");
    const T* row = logits.ptr() + i * c;
    T* grow = g.ptr() + i * c;
    double mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < c; ++j) {
      const double p = std::exp(row[j] - mx) / denom;
      const double t = (j == y ? 1.0 - smoothing : 0.0) + smoothing / static_cast<double>(c);
      grow[j] = static_cast<T>((p - t) * inv_b);
    }
  }
  return g;
}

template <typename T>
void accumulate_grad(TensorT<T>& dst, const TensorT<T>& src) {
  require(dst.same_shape(src), Err::ShapeMismatch, "accumulate_grad: shape mismatch");
  dst.ensure_grad();
  auto& g = *dst.grad;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src.data[i];
}

template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b) {
  require(a.same_shape(b), Err::ShapeMismatch, "add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

#define MOEKIT_INSTANTIATE_OPS(T)                                                              \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                         \
  template void matmul_backward<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,    \
                                   TensorT<T>&, TensorT<T>&);                                  \
  template TensorT<T> batched_contract<T>(const TensorT<T>&, const TensorT<T>&,                \
                                          const ContractSpec&);                                \
  template void batched_contract_backward<T>(const TensorT<T>&, const TensorT<T>&,             \
                                             const ContractSpec&, const TensorT<T>&,           \
                                             TensorT<T>&, TensorT<T>&);                        \
  template TensorT<T> softmax_axis<T>(const TensorT<T>&, std::vector<int>, double);            \
  template TensorT<T> softmax_axis_backward<T>(const TensorT<T>&, const TensorT<T>&,           \
                                               std::vector<int>, double, const TensorT<T>*,    \
                                               double*);                                       \
  template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                    double);                                                   \
  template void layer_norm_backward<T>(const TensorT<T>&, const TensorT<T>&, double,           \
                                       const TensorT<T>&, TensorT<T>&, TensorT<T>&,            \
                                       TensorT<T>&);                                           \
  template TensorT<T> l2_normalize<T>(const TensorT<T>&, double);                              \
  template TensorT<T> l2_normalize_backward<T>(const TensorT<T>&, const TensorT<T>&, double);  \
  template TensorT<T> gelu<T>(const TensorT<T>&);                                              \
  template TensorT<T> gelu_backward<T>(const TensorT<T>&, const TensorT<T>&);                  \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> add_bias<T>(const TensorT<T>&, const TensorT<T>&);                       \
  template TensorT<T> bias_grad<T>(const TensorT<T>&);                                         \
  template TensorT<T> scale<T>(const TensorT<T>&, double);                                     \
  template TensorT<T> reduce_mean<T>(const TensorT<T>&, int);                                  \
  template TensorT<T> reduce_mean_backward<T>(const TensorT<T>&, const Shape&, int);           \
  template double cross_entropy<T>(const TensorT<T>&, const std::vector<std::int32_t>&,        \
                                   double);                                                    \
  template TensorT<T> cross_entropy_backward<T>(const TensorT<T>&,                             \
                                                const std::vector<std::int32_t>&, double);     \
  template void accumulate_grad<T>(TensorT<T>&, const TensorT<T>&);                            \
  template void add_inplace<T>(TensorT<T>&, const TensorT<T>&);

MOEKIT_INSTANTIATE_OPS(float)
MOEKIT_INSTANTIATE_OPS(double)

#undef MOEKIT_INSTANTIATE_OPS

}  // namespace moekit
