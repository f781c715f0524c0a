// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference kernel implementations. Straight loops, no tricks: this is the
// semantics the vector variants are tested against. Compiled with
// -ffp-contract=off so the compiler cannot fuse multiply-adds and silently
// change the reference rounding behaviour.

#include <cmath>
#include <cstring>

#include "condlm/kernels.h"

namespace condlm::kernels {
namespace {

void s_gemm_nn(int m, int k, int n, const float* a, const float* b, float* c,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::memset(crow, 0, sizeof(float) * static_cast<size_t>(n));
    for (int l = 0; l < k; ++l) {
      const float av = a[static_cast<size_t>(i) * k + l];
      const float* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void s_gemm_nt(int m, int k, int n, const float* a, const float* b, float* c,
               bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<size_t>(j) * k;
      float acc = 0.0f;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void s_gemm_tn(int m, int k, int n, const float* a, const float* b, float* c,
               bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  for (int l = 0; l < k; ++l) {
    const float* arow = a + static_cast<size_t>(l) * m;
    const float* brow = b + static_cast<size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

float s_dot(int n, const float* x, const float* y) {
  float acc = 0.0f;
  for (int i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

float s_sum(int n, const float* x) {
  float acc = 0.0f;
  for (int i = 0; i < n; ++i) acc += x[i];
  return acc;
}

float s_sumsq(int n, const float* x) {
  float acc = 0.0f;
  for (int i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

void s_axpy(int n, float alpha, const float* x, float* y) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void s_scale(int n, float alpha, const float* x, float* y) {
  for (int i = 0; i < n; ++i) y[i] = alpha * x[i];
}

void s_add(int n, const float* x, const float* y, float* z) {
  for (int i = 0; i < n; ++i) z[i] = x[i] + y[i];
}

void s_mul(int n, const float* x, const float* y, float* z) {
  for (int i = 0; i < n; ++i) z[i] = x[i] * y[i];
}

void s_adamw(int n, float* p, const float* g, float* m, float* v, float lr,
             float beta1, float beta2, float eps, float wd, float bc1,
             float bc2) {
  for (int i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    const float mhat = m[i] / bc1;
    const float vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops = {s_gemm_nn, s_gemm_nt, s_gemm_tn, s_dot,  s_sum,
                          s_sumsq,   s_axpy,    s_scale,   s_add,  s_mul,
                          s_adamw};
  return ops;
}

}  // namespace condlm::kernels
