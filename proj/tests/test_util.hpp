// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "moekit/error.hpp"
#include "moekit/tensor.hpp"

namespace moekit::testing {

// Normalized L2 distance between analytic and numeric gradients.
inline double rel_err(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-12);
}

// Central-difference gradient of `loss` w.r.t. every element of `param`.
// Independent of any backward implementation by construction.
inline std::vector<double> numeric_grad(Tensor64& param, const std::function<double()>& loss,
                                        double step = 1e-5) {
  std::vector<double> g(param.data.size());
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double saved = param.data[i];
    param.data[i] = saved + step;
    const double lp = loss();
    param.data[i] = saved - step;
    const double lm = loss();
    param.data[i] = saved;
    g[i] = (lp - lm) / (2.0 * step);
  }
  return g;
}

inline double weighted_sum(const Tensor64& y, const Tensor64& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * w.data[i];
  return acc;
}

template <typename Fn>
::testing::AssertionResult throws_code(Err code, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    if (e.code() == code) return ::testing::AssertionSuccess();
    return ::testing::AssertionFailure() << "unexpected error code: " << e.what();
  } catch (const std::exception& e) {
    return ::testing::AssertionFailure() << "unexpected exception type: " << e.what();
  }
  return ::testing::AssertionFailure() << "expected " << err_name(code) << ", nothing thrown";
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace moekit::testing

#define EXPECT_ERR(code, ...) \
  EXPECT_TRUE(moekit::testing::throws_code(code, [&] { __VA_ARGS__; }))
