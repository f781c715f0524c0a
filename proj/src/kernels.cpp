// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/kernels.h"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace condlm::kernels {
namespace {

const Ops* g_ops = nullptr;
Backend g_backend = Backend::Scalar;

bool cpu_has_avx2() {
#if (defined(__x86_64__) || defined(__i386__)) && defined(__GNUC__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

void apply(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      g_ops = &scalar_ops();
      break;
    case Backend::Avx2:
      if (!cpu_has_avx2())
        throw std::invalid_argument("AVX2 kernels requested but unsupported on this CPU");
      g_ops = &avx2_ops();
      break;
  }
  g_backend = backend;
}

const Ops& ops() {
  if (g_ops == nullptr) reset_backend_from_environment();
  return *g_ops;
}

}  // namespace

bool avx2_available() { return cpu_has_avx2(); }

const char* backend_name(Backend backend) {
  switch (backend) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "?";
}

Backend active_backend() {
  if (g_ops == nullptr) reset_backend_from_environment();
  return g_backend;
}

void set_backend(Backend backend) { apply(backend); }

void reset_backend_from_environment() {
  const char* env = std::getenv("CONDLM_KERNELS");
  const std::string want = env ? env : "auto";
  if (want == "scalar") {
    apply(Backend::Scalar);
  } else if (want == "avx2") {
    apply(Backend::Avx2);
  } else if (want == "auto" || want.empty()) {
    apply(cpu_has_avx2() ? Backend::Avx2 : Backend::Scalar);
  } else {
    throw std::invalid_argument("CONDLM_KERNELS must be scalar, avx2 or auto, got: " + want);
  }
}

void gemm_nn(int m, int k, int n, const float* a, const float* b, float* c,
             bool accumulate) {
  ops().gemm_nn(m, k, n, a, b, c, accumulate);
}
void gemm_nt(int m, int k, int n, const float* a, const float* b, float* c,
             bool accumulate) {
  ops().gemm_nt(m, k, n, a, b, c, accumulate);
}
void gemm_tn(int m, int k, int n, const float* a, const float* b, float* c,
             bool accumulate) {
  ops().gemm_tn(m, k, n, a, b, c, accumulate);
}
float dot(int n, const float* x, const float* y) { return ops().dot(n, x, y); }
float sum(int n, const float* x) { return ops().sum(n, x); }
float sumsq(int n, const float* x) { return ops().sumsq(n, x); }
void axpy(int n, float alpha, const float* x, float* y) {
  ops().axpy(n, alpha, x, y);
}
void scale(int n, float alpha, const float* x, float* y) {
  ops().scale(n, alpha, x, y);
}
void add(int n, const float* x, const float* y, float* z) {
  ops().add(n, x, y, z);
}
void mul(int n, const float* x, const float* y, float* z) {
  ops().mul(n, x, y, z);
}
void adamw_update(int n, float* p, const float* g, float* m, float* v,
                  float lr, float beta1, float beta2, float eps, float wd,
                  float bc1, float bc2) {
  ops().adamw_update(n, p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2);
}

}  // namespace condlm::kernels
