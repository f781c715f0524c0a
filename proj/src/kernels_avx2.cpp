// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// AVX2/FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma on x86-64; callers must check avx2_available() before
// dispatching here. Reductions use multiple accumulators, so their rounding
// differs from the scalar reference within normal float tolerance.

#include <stdexcept>

#include "condlm/kernels.h"

#if defined(__x86_64__) || defined(__i386__)

#include <immintrin.h>

#include <cmath>
#include <cstring>

namespace condlm::kernels {
namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

void v_gemm_nn(int m, int k, int n, const float* a, const float* b, float* c,
               bool accumulate) {
  const int n8 = n & ~7;
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::memset(crow, 0, sizeof(float) * static_cast<size_t>(n));
    for (int l = 0; l < k; ++l) {
      const float av = a[static_cast<size_t>(i) * k + l];
      if (av == 0.0f) continue;
      const __m256 va = _mm256_set1_ps(av);
      const float* brow = b + static_cast<size_t>(l) * n;
      int j = 0;
      for (; j < n8; j += 8) {
        __m256 vc = _mm256_loadu_ps(crow + j);
        vc = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), vc);
        _mm256_storeu_ps(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void v_gemm_nt(int m, int k, int n, const float* a, const float* b, float* c,
               bool accumulate) {
  const int k8 = k & ~7;
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<size_t>(j) * k;
      __m256 acc = _mm256_setzero_ps();
      int l = 0;
      for (; l < k8; l += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + l),
                              _mm256_loadu_ps(brow + l), acc);
      float s = hsum8(acc);
      for (; l < k; ++l) s += arow[l] * brow[l];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

void v_gemm_tn(int m, int k, int n, const float* a, const float* b, float* c,
               bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  const int n8 = n & ~7;
  for (int l = 0; l < k; ++l) {
    const float* arow = a + static_cast<size_t>(l) * m;
    const float* brow = b + static_cast<size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      const __m256 va = _mm256_set1_ps(av);
      float* crow = c + static_cast<size_t>(i) * n;
      int j = 0;
      for (; j < n8; j += 8) {
        __m256 vc = _mm256_loadu_ps(crow + j);
        vc = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), vc);
        _mm256_storeu_ps(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

float v_dot(int n, const float* x, const float* y) {
  const int n16 = n & ~15;
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int i = 0;
  for (; i < n16; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8),
                           _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  float s = hsum8(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

float v_sum(int n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum8(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float v_sumsq(int n, const float* x) {
  __m256 acc = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    acc = _mm256_fmadd_ps(v, v, acc);
  }
  float s = hsum8(acc);
  for (; i < n; ++i) s += x[i] * x[i];
  return s;
}

void v_axpy(int n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void v_scale(int n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = alpha * x[i];
}

void v_add(int n, const float* x, const float* y, float* z) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        z + i, _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] + y[i];
}

void v_mul(int n, const float* x, const float* y, float* z) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        z + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

void v_adamw(int n, float* p, const float* g, float* m, float* v, float lr,
             float beta1, float beta2, float eps, float wd, float bc1,
             float bc2) {
  const __m256 vb1 = _mm256_set1_ps(beta1);
  const __m256 vb1c = _mm256_set1_ps(1.0f - beta1);
  const __m256 vb2 = _mm256_set1_ps(beta2);
  const __m256 vb2c = _mm256_set1_ps(1.0f - beta2);
  const __m256 vlr = _mm256_set1_ps(lr);
  const __m256 veps = _mm256_set1_ps(eps);
  const __m256 vwd = _mm256_set1_ps(wd);
  const __m256 vrbc1 = _mm256_set1_ps(1.0f / bc1);
  const __m256 vrbc2 = _mm256_set1_ps(1.0f / bc2);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vg = _mm256_loadu_ps(g + i);
    __m256 vm = _mm256_loadu_ps(m + i);
    __m256 vv = _mm256_loadu_ps(v + i);
    vm = _mm256_fmadd_ps(vb1, vm, _mm256_mul_ps(vb1c, vg));
    vv = _mm256_fmadd_ps(vb2, vv, _mm256_mul_ps(vb2c, _mm256_mul_ps(vg, vg)));
    _mm256_storeu_ps(m + i, vm);
    _mm256_storeu_ps(v + i, vv);
    const __m256 mhat = _mm256_mul_ps(vm, vrbc1);
    const __m256 vhat = _mm256_mul_ps(vv, vrbc2);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), veps);
    __m256 vp = _mm256_loadu_ps(p + i);
    const __m256 step =
        _mm256_add_ps(_mm256_div_ps(mhat, denom), _mm256_mul_ps(vwd, vp));
    vp = _mm256_fnmadd_ps(vlr, step, vp);
    _mm256_storeu_ps(p + i, vp);
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    const float mhat = m[i] * (1.0f / bc1);
    const float vhat = v[i] * (1.0f / bc2);
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace

const Ops& avx2_ops() {
  static const Ops ops = {v_gemm_nn, v_gemm_nt, v_gemm_tn, v_dot,  v_sum,
                          v_sumsq,   v_axpy,    v_scale,   v_add,  v_mul,
                          v_adamw};
  return ops;
}

}  // namespace condlm::kernels

#else  // non-x86 build: no AVX2 table

namespace condlm::kernels {

const Ops& avx2_ops() {
  throw std::runtime_error("AVX2 kernels are not compiled into this build");
}

}  // namespace condlm::kernels

#endif
