// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Small reverse-mode autodiff over float32 tensors. The Tape records every
// differentiable operation in program order; backward() replays the record in
// reverse, which is a valid topological order because an operation can only
// consume tensors that already exist.
//
// Gradient conventions, relied on throughout the training code:
//   * Intermediate (op-output) gradients are zeroed at the start of every
//     backward() call.
//   * Leaf gradients (tensors that are not the output of a recorded op, i.e.
//     parameters) are *accumulated* into; callers zero them explicitly.
//     Calling backward twice on the same graph therefore doubles leaf grads.
//   * Values and gradients are float32; losses and metric accumulations are
//     carried in float64 before being stored.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace condlm {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor {
 public:
  std::vector<int> shape;
  std::vector<float> values;
  std::vector<float> grad;  // sized like values iff requires_grad
  bool requires_grad = false;

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr from_values(std::vector<int> shape, std::vector<float> v,
                               bool requires_grad = false);
  static TensorPtr scalar(float v);

  int64_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  // 2-D accessors; ops that need them validate rank first.
  int rows() const { return shape[0]; }
  int cols() const { return shape[1]; }
  float at(int r, int c) const { return values[static_cast<size_t>(r) * cols() + c]; }
  float& at(int r, int c) { return values[static_cast<size_t>(r) * cols() + c]; }

  void set_requires_grad(bool on);
  void zero_grad();
};

std::string shape_str(const std::vector<int>& shape);

// FNV-1a over the raw value bytes; used to assert a model stayed frozen.
uint64_t values_digest(const Tensor& t);

// Numerically safe log-softmax of one float row, computed in double.
std::vector<double> log_softmax_f64(std::span<const float> row);

// Result bundle for masked_cross_entropy. `value` duplicates the loss tensor
// contents at full double precision for metric accumulation and for
// finite-difference oracles that need a quieter signal than float32.
struct MaskedLoss {
  TensorPtr loss;  // [1], mean NLL over unmasked positions
  int count = 0;   // number of unmasked positions
  double value = 0.0;
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t node_count() const { return nodes_.size(); }

  // c[m x n] = a[m x k] * b[k x n]
  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
  // c[m x n] = a[m x k] * b[n x k]^T (saves explicit transposes in attention)
  TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr mul(const TensorPtr& a, const TensorPtr& b);  // elementwise
  TensorPtr scale(const TensorPtr& a, float s);
  TensorPtr gelu(const TensorPtr& a);

  // Softmax over the last dimension of each row; rows are independent.
  TensorPtr softmax_rows(const TensorPtr& a);
  // Softmax over scores[i, 0..i] per row of a square score matrix; entries
  // above the diagonal are forced to zero probability.
  TensorPtr causal_softmax(const TensorPtr& scores);
  // Per-row normalization over the last dimension with learned scale/shift.
  TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& scale,
                       const TensorPtr& shift, float eps);

  TensorPtr embedding_lookup(const TensorPtr& table, std::span<const int> ids);

  TensorPtr slice_rows(const TensorPtr& a, int start, int len);
  TensorPtr slice_cols(const TensorPtr& a, int start, int len);
  TensorPtr concat_rows(const TensorPtr& a, const TensorPtr& b);
  TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
  TensorPtr sum(const TensorPtr& a);

  // Mean negative log-likelihood of targets[t] under logits row t, taken over
  // positions where mask[t] is nonzero. Throws if every position is masked.
  MaskedLoss masked_cross_entropy(const TensorPtr& logits,
                                  std::span<const int> targets,
                                  std::span<const uint8_t> mask);

  // Reverse sweep from a scalar loss recorded on this tape.
  void backward(const TensorPtr& loss);

 private:
  struct Node {
    TensorPtr out;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;

  // Marks `out` as produced by a recorded op and registers its backward pass.
  // Only called when grad is flowing; otherwise outputs stay plain tensors.
  void record(const TensorPtr& out, std::function<void()> back);
  bool tracking(const TensorPtr& t) const {
    return grad_enabled_ && t->requires_grad;
  }
};

}  // namespace condlm
