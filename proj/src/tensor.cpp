// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "condlm/kernels.h"

namespace condlm {
namespace {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_rank2(const TensorPtr& t, const char* op) {
  if (t->rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor, got shape " +
                                shape_str(t->shape));
}

// Rows/last-dim view for ops that treat the last dimension as the feature
// axis (softmax, layer_norm). Rank must be >= 1 and the last dim positive.
std::pair<int64_t, int> row_view(const TensorPtr& t, const char* op) {
  if (t->rank() < 1 || t->shape.back() < 1)
    throw std::invalid_argument(std::string(op) + ": needs rank >= 1 with positive last dim, got " +
                                shape_str(t->shape));
  const int d = t->shape.back();
  return {t->numel() / d, d};
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

uint64_t values_digest(const Tensor& t) {
  uint64_t h = 1469598103934665603ull;
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(t.values.data());
  const size_t n = t.values.size() * sizeof(float);
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<double> log_softmax_f64(std::span<const float> row) {
  if (row.empty()) throw std::invalid_argument("log_softmax_f64: empty row");
  float mx = row[0];
  for (const float v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (const float v : row) z += std::exp(static_cast<double>(v) - mx);
  const double log_z = std::log(z) + mx;
  std::vector<double> out(row.size());
  for (size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - log_z;
  return out;
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  const int64_t n = numel_of(shape);
  t->shape = std::move(shape);
  t->values.assign(static_cast<size_t>(n), 0.0f);
  t->set_requires_grad(requires_grad);
  return t;
}

TensorPtr Tensor::from_values(std::vector<int> shape, std::vector<float> v,
                              bool requires_grad) {
  const int64_t n = numel_of(shape);
  if (n != static_cast<int64_t>(v.size()))
    throw std::invalid_argument("from_values: shape " + shape_str(shape) + " wants " +
                                std::to_string(n) + " values, got " + std::to_string(v.size()));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->values = std::move(v);
  t->set_requires_grad(requires_grad);
  return t;
}

TensorPtr Tensor::scalar(float v) { return from_values({1}, {v}); }

int64_t Tensor::numel() const { return static_cast<int64_t>(values.size()); }

void Tensor::set_requires_grad(bool on) {
  requires_grad = on;
  if (on)
    grad.assign(values.size(), 0.0f);
  else
    grad.clear();
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

void Tape::record(const TensorPtr& out, std::function<void()> back) {
  out->set_requires_grad(true);
  nodes_.push_back({out, std::move(back)});
}

void Tape::backward(const TensorPtr& loss) {
  if (!loss) throw std::invalid_argument("backward: null loss");
  if (loss->numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss->shape));
  if (!grad_enabled_)
    throw std::logic_error("backward: tape was created with gradients disabled");
  if (!loss->requires_grad)
    throw std::invalid_argument("backward: loss does not depend on any tracked tensor");
  // Outputs of recorded ops get fresh gradients every sweep; leaves keep
  // accumulating until the caller zeroes them.
  for (auto& node : nodes_) node.out->zero_grad();
  loss->grad[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
}

TensorPtr Tape::matmul(const TensorPtr& a, const TensorPtr& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a->cols() != b->rows())
    throw std::invalid_argument("matmul: inner dims disagree, a is " + shape_str(a->shape) +
                                ", b is " + shape_str(b->shape));
  const int m = a->rows(), k = a->cols(), n = b->cols();
  auto out = Tensor::zeros({m, n});
  kernels::gemm_nn(m, k, n, a->values.data(), b->values.data(), out->values.data(), false);
  if (tracking(a) || tracking(b)) {
    record(out, [a, b, out, m, k, n] {
      if (a->requires_grad)
        kernels::gemm_nt(m, n, k, out->grad.data(), b->values.data(), a->grad.data(), true);
      if (b->requires_grad)
        kernels::gemm_tn(k, m, n, a->values.data(), out->grad.data(), b->grad.data(), true);
    });
  }
  return out;
}

TensorPtr Tape::matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a->cols() != b->cols())
    throw std::invalid_argument("matmul_nt: shared dims disagree, a is " + shape_str(a->shape) +
                                ", b is " + shape_str(b->shape));
  const int m = a->rows(), k = a->cols(), n = b->rows();
  auto out = Tensor::zeros({m, n});
  kernels::gemm_nt(m, k, n, a->values.data(), b->values.data(), out->values.data(), false);
  if (tracking(a) || tracking(b)) {
    record(out, [a, b, out, m, k, n] {
      if (a->requires_grad)
        kernels::gemm_nn(m, n, k, out->grad.data(), b->values.data(), a->grad.data(), true);
      if (b->requires_grad)
        kernels::gemm_tn(n, m, k, out->grad.data(), a->values.data(), b->grad.data(), true);
    });
  }
  return out;
}

TensorPtr Tape::add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shape mismatch, a is " + shape_str(a->shape) +
                                ", b is " + shape_str(b->shape));
  auto out = Tensor::zeros(a->shape);
  const int n = static_cast<int>(a->numel());
  kernels::add(n, a->values.data(), b->values.data(), out->values.data());
  if (tracking(a) || tracking(b)) {
    record(out, [a, b, out, n] {
      if (a->requires_grad) kernels::axpy(n, 1.0f, out->grad.data(), a->grad.data());
      if (b->requires_grad) kernels::axpy(n, 1.0f, out->grad.data(), b->grad.data());
    });
  }
  return out;
}

TensorPtr Tape::mul(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("mul: shape mismatch, a is " + shape_str(a->shape) +
                                ", b is " + shape_str(b->shape));
  auto out = Tensor::zeros(a->shape);
  const int n = static_cast<int>(a->numel());
  kernels::mul(n, a->values.data(), b->values.data(), out->values.data());
  if (tracking(a) || tracking(b)) {
    record(out, [a, b, out, n] {
      if (a->requires_grad)
        for (int i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->values[i];
      if (b->requires_grad)
        for (int i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->values[i];
    });
  }
  return out;
}

TensorPtr Tape::scale(const TensorPtr& a, float s) {
  auto out = Tensor::zeros(a->shape);
  const int n = static_cast<int>(a->numel());
  kernels::scale(n, s, a->values.data(), out->values.data());
  if (tracking(a)) {
    record(out, [a, out, s, n] {
      kernels::axpy(n, s, out->grad.data(), a->grad.data());
    });
  }
  return out;
}

TensorPtr Tape::gelu(const TensorPtr& a) {
  auto out = Tensor::zeros(a->shape);
  const int n = static_cast<int>(a->numel());
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  for (int i = 0; i < n; ++i) {
    const float x = a->values[i];
    out->values[i] = 0.5f * x * (1.0f + std::erf(x * kInvSqrt2));
  }
  if (tracking(a)) {
    record(out, [a, out, n] {
      constexpr float kInvSqrt2pi = 0.39894228040143268f;
      for (int i = 0; i < n; ++i) {
        const float x = a->values[i];
        const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
        const float pdf = kInvSqrt2pi * std::exp(-0.5f * x * x);
        a->grad[i] += out->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

TensorPtr Tape::softmax_rows(const TensorPtr& a) {
  const auto [nrows, d] = row_view(a, "softmax_rows");
  auto out = Tensor::zeros(a->shape);
  for (int64_t r = 0; r < nrows; ++r) {
    const float* x = a->values.data() + r * d;
    float* p = out->values.data() + r * d;
    float mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < d; ++i) {
      const float e = std::exp(x[i] - mx);
      p[i] = e;
      z += e;
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int i = 0; i < d; ++i) p[i] *= inv;
  }
  if (tracking(a)) {
    record(out, [a, out, nrows = nrows, d = d] {
      for (int64_t r = 0; r < nrows; ++r) {
        const float* p = out->values.data() + r * d;
        const float* dy = out->grad.data() + r * d;
        float* dx = a->grad.data() + r * d;
        const float inner = kernels::dot(d, p, dy);
        for (int i = 0; i < d; ++i) dx[i] += p[i] * (dy[i] - inner);
      }
    });
  }
  return out;
}

TensorPtr Tape::causal_softmax(const TensorPtr& scores) {
  require_rank2(scores, "causal_softmax");
  if (scores->rows() != scores->cols())
    throw std::invalid_argument("causal_softmax: scores must be square, got " +
                                shape_str(scores->shape));
  const int s = scores->rows();
  auto out = Tensor::zeros(scores->shape);
  for (int i = 0; i < s; ++i) {
    const float* x = scores->values.data() + static_cast<size_t>(i) * s;
    float* p = out->values.data() + static_cast<size_t>(i) * s;
    float mx = x[0];
    for (int j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j <= i; ++j) {
      const float e = std::exp(x[j] - mx);
      p[j] = e;
      z += e;
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int j = 0; j <= i; ++j) p[j] *= inv;
    // j > i stays exactly zero.
  }
  if (tracking(scores)) {
    record(out, [scores, out, s] {
      for (int i = 0; i < s; ++i) {
        const float* p = out->values.data() + static_cast<size_t>(i) * s;
        const float* dy = out->grad.data() + static_cast<size_t>(i) * s;
        float* dx = scores->grad.data() + static_cast<size_t>(i) * s;
        const float inner = kernels::dot(i + 1, p, dy);
        for (int j = 0; j <= i; ++j) dx[j] += p[j] * (dy[j] - inner);
      }
    });
  }
  return out;
}

TensorPtr Tape::layer_norm(const TensorPtr& x, const TensorPtr& scale,
                           const TensorPtr& shift, float eps) {
  const auto [nrows, d] = row_view(x, "layer_norm");
  if (scale->shape != std::vector<int>{d} || shift->shape != std::vector<int>{d})
    throw std::invalid_argument("layer_norm: scale/shift must be [" + std::to_string(d) +
                                "], got " + shape_str(scale->shape) + " and " +
                                shape_str(shift->shape));
  auto out = Tensor::zeros(x->shape);
  std::vector<float> xhat(static_cast<size_t>(nrows) * d);
  std::vector<float> rstd(static_cast<size_t>(nrows));
  for (int64_t r = 0; r < nrows; ++r) {
    const float* xr = x->values.data() + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      const double c = xr[i] - mu;
      var += c * c;
    }
    var /= d;
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[static_cast<size_t>(r)] = rs;
    const float muf = static_cast<float>(mu);
    float* xh = xhat.data() + r * d;
    float* y = out->values.data() + r * d;
    for (int i = 0; i < d; ++i) {
      xh[i] = (xr[i] - muf) * rs;
      y[i] = xh[i] * scale->values[i] + shift->values[i];
    }
  }
  if (tracking(x) || tracking(scale) || tracking(shift)) {
    record(out, [x, scale, shift, out, xhat = std::move(xhat), rstd = std::move(rstd),
                 nrows = nrows, d = d] {
      std::vector<float> g(static_cast<size_t>(d));
      for (int64_t r = 0; r < nrows; ++r) {
        const float* dy = out->grad.data() + r * d;
        const float* xh = xhat.data() + r * d;
        if (scale->requires_grad)
          for (int i = 0; i < d; ++i) scale->grad[i] += dy[i] * xh[i];
        if (shift->requires_grad)
          for (int i = 0; i < d; ++i) shift->grad[i] += dy[i];
        if (x->requires_grad) {
          kernels::mul(d, dy, scale->values.data(), g.data());
          const float m1 = kernels::sum(d, g.data()) / d;
          const float m2 = kernels::dot(d, g.data(), xh) / d;
          const float rs = rstd[static_cast<size_t>(r)];
          float* dx = x->grad.data() + r * d;
          for (int i = 0; i < d; ++i) dx[i] += rs * (g[i] - m1 - xh[i] * m2);
        }
      }
    });
  }
  return out;
}

TensorPtr Tape::embedding_lookup(const TensorPtr& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup");
  const int v = table->rows(), d = table->cols();
  for (const int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range for table " + shape_str(table->shape));
  const int t = static_cast<int>(ids.size());
  auto out = Tensor::zeros({t, d});
  for (int i = 0; i < t; ++i)
    std::memcpy(out->values.data() + static_cast<size_t>(i) * d,
                table->values.data() + static_cast<size_t>(ids[i]) * d, sizeof(float) * d);
  if (tracking(table)) {
    std::vector<int> ids_copy(ids.begin(), ids.end());
    record(out, [table, out, ids_copy = std::move(ids_copy), d] {
      for (size_t i = 0; i < ids_copy.size(); ++i)
        kernels::axpy(d, 1.0f, out->grad.data() + i * d,
                      table->grad.data() + static_cast<size_t>(ids_copy[i]) * d);
    });
  }
  return out;
}

TensorPtr Tape::slice_rows(const TensorPtr& a, int start, int len) {
  require_rank2(a, "slice_rows");
  if (start < 0 || len < 0 || start + len > a->rows())
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") outside " + shape_str(a->shape));
  const int c = a->cols();
  auto out = Tensor::zeros({len, c});
  std::memcpy(out->values.data(), a->values.data() + static_cast<size_t>(start) * c,
              sizeof(float) * static_cast<size_t>(len) * c);
  if (tracking(a)) {
    record(out, [a, out, start, len, c] {
      kernels::axpy(len * c, 1.0f, out->grad.data(),
                    a->grad.data() + static_cast<size_t>(start) * c);
    });
  }
  return out;
}

TensorPtr Tape::slice_cols(const TensorPtr& a, int start, int len) {
  require_rank2(a, "slice_cols");
  if (start < 0 || len < 0 || start + len > a->cols())
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") outside " + shape_str(a->shape));
  const int r = a->rows(), c = a->cols();
  auto out = Tensor::zeros({r, len});
  for (int i = 0; i < r; ++i)
    std::memcpy(out->values.data() + static_cast<size_t>(i) * len,
                a->values.data() + static_cast<size_t>(i) * c + start, sizeof(float) * len);
  if (tracking(a)) {
    record(out, [a, out, start, len, r, c] {
      for (int i = 0; i < r; ++i)
        kernels::axpy(len, 1.0f, out->grad.data() + static_cast<size_t>(i) * len,
                      a->grad.data() + static_cast<size_t>(i) * c + start);
    });
  }
  return out;
}

TensorPtr Tape::concat_rows(const TensorPtr& a, const TensorPtr& b) {
  require_rank2(a, "concat_rows");
  require_rank2(b, "concat_rows");
  if (a->cols() != b->cols())
    throw std::invalid_argument("concat_rows: column mismatch, a is " + shape_str(a->shape) +
                                ", b is " + shape_str(b->shape));
  const int c = a->cols();
  auto out = Tensor::zeros({a->rows() + b->rows(), c});
  std::memcpy(out->values.data(), a->values.data(), sizeof(float) * a->values.size());
  std::memcpy(out->values.data() + a->values.size(), b->values.data(),
              sizeof(float) * b->values.size());
  if (tracking(a) || tracking(b)) {
    record(out, [a, b, out] {
      if (a->requires_grad)
        kernels::axpy(static_cast<int>(a->numel()), 1.0f, out->grad.data(), a->grad.data());
      if (b->requires_grad)
        kernels::axpy(static_cast<int>(b->numel()), 1.0f,
                      out->grad.data() + a->numel(), b->grad.data());
    });
  }
  return out;
}

TensorPtr Tape::concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int r = parts[0]->rows();
  int total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p->rows() != r)
      throw std::invalid_argument("concat_cols: row mismatch, expected " + std::to_string(r) +
                                  " rows, got " + shape_str(p->shape));
    total += p->cols();
  }
  auto out = Tensor::zeros({r, total});
  int off = 0;
  for (const auto& p : parts) {
    const int c = p->cols();
    for (int i = 0; i < r; ++i)
      std::memcpy(out->values.data() + static_cast<size_t>(i) * total + off,
                  p->values.data() + static_cast<size_t>(i) * c, sizeof(float) * c);
    off += c;
  }
  bool any = false;
  for (const auto& p : parts) any = any || tracking(p);
  if (any) {
    record(out, [parts, out, r, total] {
      int off = 0;
      for (const auto& p : parts) {
        const int c = p->cols();
        if (p->requires_grad)
          for (int i = 0; i < r; ++i)
            kernels::axpy(c, 1.0f, out->grad.data() + static_cast<size_t>(i) * total + off,
                          p->grad.data() + static_cast<size_t>(i) * c);
        off += c;
      }
    });
  }
  return out;
}

TensorPtr Tape::sum(const TensorPtr& a) {
  auto out = Tensor::zeros({1});
  out->values[0] = kernels::sum(static_cast<int>(a->numel()), a->values.data());
  if (tracking(a)) {
    record(out, [a, out] {
      const float g = out->grad[0];
      for (float& v : a->grad) v += g;
    });
  }
  return out;
}

MaskedLoss Tape::masked_cross_entropy(const TensorPtr& logits,
                                      std::span<const int> targets,
                                      std::span<const uint8_t> mask) {
  require_rank2(logits, "masked_cross_entropy");
  const int t = logits->rows(), v = logits->cols();
  if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t)
    throw std::invalid_argument("masked_cross_entropy: logits " + shape_str(logits->shape) +
                                " with " + std::to_string(targets.size()) + " targets and " +
                                std::to_string(mask.size()) + " mask entries");
  for (const int tgt : targets)
    if (tgt < 0 || tgt >= v)
      throw std::invalid_argument("masked_cross_entropy: target " + std::to_string(tgt) +
                                  " out of vocab range " + std::to_string(v));
  const bool track = tracking(logits);
  std::vector<float> probs;
  if (track) probs.resize(static_cast<size_t>(t) * v);
  double acc = 0.0;
  int count = 0;
  for (int i = 0; i < t; ++i) {
    const float* row = logits->values.data() + static_cast<size_t>(i) * v;
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    if (track) {
      float* p = probs.data() + static_cast<size_t>(i) * v;
      const double inv = 1.0 / z;
      for (int j = 0; j < v; ++j)
        p[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) * inv);
    }
    if (mask[i]) {
      acc += (std::log(z) + mx) - row[targets[i]];
      ++count;
    }
  }
  if (count == 0)
    throw std::invalid_argument("masked_cross_entropy: every position is masked out");
  const double mean = acc / count;
  MaskedLoss result;
  result.count = count;
  result.value = mean;
  result.loss = Tensor::scalar(static_cast<float>(mean));
  if (track) {
    std::vector<int> tgt_copy(targets.begin(), targets.end());
    std::vector<uint8_t> mask_copy(mask.begin(), mask.end());
    auto loss = result.loss;
    record(loss, [logits, loss, probs = std::move(probs), tgt_copy = std::move(tgt_copy),
                  mask_copy = std::move(mask_copy), t, v, count] {
      const float coeff = loss->grad[0] / static_cast<float>(count);
      for (int i = 0; i < t; ++i) {
        if (!mask_copy[static_cast<size_t>(i)]) continue;  // masked rows get exactly zero grad
        const float* p = probs.data() + static_cast<size_t>(i) * v;
        float* dl = logits->grad.data() + static_cast<size_t>(i) * v;
        kernels::axpy(v, coeff, p, dl);
        dl[tgt_copy[static_cast<size_t>(i)]] -= coeff;
      }
    });
  }
  return result;
}

}  // namespace condlm
