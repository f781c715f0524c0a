// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float kernels behind the tensor layer. Every operation has a plain
// scalar implementation that acts as the reference, plus (on x86-64 hosts
// that support it) an AVX2/FMA variant. The active variant is chosen once at
// startup by CPU detection and can be overridden either programmatically or
// with the CONDLM_KERNELS environment variable ("scalar", "avx2", "auto").
//
// Vector variants may reassociate reductions, so results can differ from the
// scalar reference by normal floating-point rounding. Equivalence tests pin
// the allowed divergence; everything downstream treats kernel output as
// deterministic for a fixed backend on a fixed host.

#pragma once

#include <string>

namespace condlm::kernels {

enum class Backend {
  Scalar,
  Avx2,
};

// Returns the backend all kernel calls currently dispatch to.
Backend active_backend();

// Forces a backend. Throws std::invalid_argument if the requested backend is
// not usable on this host (e.g. Avx2 without CPU support).
void set_backend(Backend backend);

// Re-runs detection: honours CONDLM_KERNELS if set, otherwise picks the best
// variant the CPU supports. Called lazily before the first kernel use.
void reset_backend_from_environment();

const char* backend_name(Backend backend);
bool avx2_available();

// c[m x n] = a[m x k] * b[k x n], adding into c when accumulate is set.
void gemm_nn(int m, int k, int n, const float* a, const float* b, float* c,
             bool accumulate);

// c[m x n] = a[m x k] * b[n x k]^T. Rows of b are treated as columns.
void gemm_nt(int m, int k, int n, const float* a, const float* b, float* c,
             bool accumulate);

// c[m x n] = a[k x m]^T * b[k x n].
void gemm_tn(int m, int k, int n, const float* a, const float* b, float* c,
             bool accumulate);

float dot(int n, const float* x, const float* y);
float sum(int n, const float* x);
float sumsq(int n, const float* x);

// y += alpha * x
void axpy(int n, float alpha, const float* x, float* y);
// y = alpha * x
void scale(int n, float alpha, const float* x, float* y);
// z = x + y
void add(int n, const float* x, const float* y, float* z);
// z = x * y (elementwise)
void mul(int n, const float* x, const float* y, float* z);

// One decoupled-weight-decay Adam step over a flat parameter block.
// bc1/bc2 are the bias corrections (1 - beta^t) for the current step count.
void adamw_update(int n, float* p, const float* g, float* m, float* v,
                  float lr, float beta1, float beta2, float eps, float wd,
                  float bc1, float bc2);

// Implementation tables. Each entry set lives in its own translation unit so
// the AVX2 one can be compiled with -mavx2 -mfma while the scalar reference
// stays free of contracted multiply-adds.
struct Ops {
  void (*gemm_nn)(int, int, int, const float*, const float*, float*, bool);
  void (*gemm_nt)(int, int, int, const float*, const float*, float*, bool);
  void (*gemm_tn)(int, int, int, const float*, const float*, float*, bool);
  float (*dot)(int, const float*, const float*);
  float (*sum)(int, const float*);
  float (*sumsq)(int, const float*);
  void (*axpy)(int, float, const float*, float*);
  void (*scale)(int, float, const float*, float*);
  void (*add)(int, const float*, const float*, float*);
  void (*mul)(int, const float*, const float*, float*);
  void (*adamw_update)(int, float*, const float*, float*, float*, float,
                       float, float, float, float, float, float);
};

const Ops& scalar_ops();
const Ops& avx2_ops();  // throws std::runtime_error when unavailable

}  // namespace condlm::kernels
