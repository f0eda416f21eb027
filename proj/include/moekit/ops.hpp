// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

// Axis labels for a generalized batched contraction, einsum-style but
// restricted: no repeated labels inside one operand, no implicit reduction
// of labels that appear in a single operand. Labels present in both inputs
// and absent from `out` are summed over.
struct ContractSpec {
  std::string lhs;
  std::string rhs;
  std::string out;
};

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
void matmul_backward(const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& gout,
                     TensorT<T>& ga, TensorT<T>& gb);

template <typename T>
TensorT<T> batched_contract(const TensorT<T>& a, const TensorT<T>& b, const ContractSpec& spec);

template <typename T>
void batched_contract_backward(const TensorT<T>& a, const TensorT<T>& b, const ContractSpec& spec,
                               const TensorT<T>& gout, TensorT<T>& ga, TensorT<T>& gb);

// Softmax of x / temperature over the joint index set of `axes` (negative
// axes count from the end). Each slice over the joint axes sums to one.
template <typename T>
TensorT<T> softmax_axis(const TensorT<T>& x, std::vector<int> axes, double temperature);

// Backward for softmax_axis. `y` is the forward output. When `grad_temp` is
// non-null, `x` must be the forward input and the temperature gradient is
// accumulated into *grad_temp.
template <typename T>
TensorT<T> softmax_axis_backward(const TensorT<T>& y, const TensorT<T>& gout,
                                 std::vector<int> axes, double temperature,
                                 const TensorT<T>* x = nullptr, double* grad_temp = nullptr);

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      double eps);

template <typename T>
void layer_norm_backward(const TensorT<T>& x, const TensorT<T>& gamma, double eps,
                         const TensorT<T>& gout, TensorT<T>& gx, TensorT<T>& ggamma,
                         TensorT<T>& gbeta);

// Scales each last-axis vector to unit Euclidean norm. Zero vectors map to
// zero through the eps-guarded denominator sqrt(|v|^2 + eps^2).
template <typename T>
TensorT<T> l2_normalize(const TensorT<T>& x, double eps);

template <typename T>
TensorT<T> l2_normalize_backward(const TensorT<T>& x, const TensorT<T>& gout, double eps);

template <typename T>
TensorT<T> gelu(const TensorT<T>& x);

template <typename T>
TensorT<T> gelu_backward(const TensorT<T>& x, const TensorT<T>& gout);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

// x + bias, bias broadcast over the last axis.
template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias);

// Gradient of add_bias w.r.t. bias: sum of gout over all leading axes.
template <typename T>
TensorT<T> bias_grad(const TensorT<T>& gout);

template <typename T>
TensorT<T> scale(const TensorT<T>& x, double c);

template <typename T>
TensorT<T> reduce_mean(const TensorT<T>& x, int axis);

template <typename T>
TensorT<T> reduce_mean_backward(const TensorT<T>& gout, const Shape& input_shape, int axis);

// Mean label-smoothed cross entropy over the batch. logits is [b, classes].
template <typename T>
double cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& labels,
                     double smoothing);

template <typename T>
TensorT<T> cross_entropy_backward(const TensorT<T>& logits, const std::vector<std::int32_t>& labels,
                                  double smoothing);

// dst.grad += src.data (allocating dst.grad on first use).
template <typename T>
void accumulate_grad(TensorT<T>& dst, const TensorT<T>& src);

// a.data += b.data
template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b);

}  // namespace moekit
