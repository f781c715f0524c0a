// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Causal-LM training with two objectives that differ only in batch
// construction. The standard objective supervises every predictable position
// of a document. The conditional objective prepends a context to each
// document and ignores the loss on the context's own positions, so the model
// is trained on p(document | context) while sharing every other
// hyperparameter with the standard run. Conditioned models are meant to be
// used without their context at evaluation time; nothing here ever feeds the
// context at inference.
//
// Examples are laid out as [BOS, context?, window] where window is a slice of
// the document body. Documents longer than the sequence budget are split into
// windows and the context is re-prepended to every window, so each supervised
// token stays conditioned. The loss mask is aligned with predictions: entry i
// covers the prediction of tokens[i+1].

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "condlm/context.h"
#include "condlm/corpus.h"
#include "condlm/model.h"

namespace condlm {

struct Objective {
  enum class Kind { Standard, Conditional };
  Kind kind = Kind::Standard;
  Context context;  // consulted only when kind == Conditional

  static Objective standard() { return {}; }
  static Objective conditional(Context ctx) {
    Objective o;
    o.kind = Kind::Conditional;
    o.context = std::move(ctx);
    return o;
  }
};

struct TrainConfig {
  Objective objective;
  float lr_peak = 3e-4f;
  int batch_size = 16;
  int epochs = 1;
  float warmup_fraction = 0.1f;  // of total steps, linear ramp from 0
  float grad_clip_norm = 1.0f;
  float weight_decay = 0.01f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  uint64_t seed = 0;
  int max_seq_len = 0;  // example budget; 0 means the model's max_seq_len

  void validate() const;
};

// One training example. mask[i] gates the prediction of tokens[i+1]; with a
// soft prefix attached the prefix rows supervise nothing by construction.
struct Example {
  std::vector<int> tokens;
  std::vector<uint8_t> mask;  // size tokens.size() - 1
  TensorPtr soft_prefix;      // shared across examples, may be null
};

// Expands documents into examples under the objective, chunking documents
// that exceed the budget. Throws if the context leaves no room for at least
// one supervised token.
std::vector<Example> build_batch(std::span<const Document> docs, const Objective& objective,
                                 int max_seq_len);

// Linear warmup to lr_peak over floor(warmup_fraction * total) steps, then
// linear decay to 0 at step == total_steps.
float lr_at(int64_t step, int64_t total_steps, const TrainConfig& config);

struct OptimizerState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  int64_t t = 0;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;

  static OptimizerState init(const TransformerLM& model, const TrainConfig& config);
};

// Bias-corrected Adam step with decoupled weight decay over every model
// parameter. Throws if the state was initialized for different shapes.
void adamw_step(TransformerLM& model, OptimizerState& state, float lr);

// Global L2 gradient norm (accumulated in double); scales all gradients down
// to max_norm when exceeded. Returns the pre-clip norm.
double clip_gradients(const TransformerLM& model, float max_norm);

struct StepRecord {
  int64_t step = 0;
  float lr = 0.0f;
  double loss = 0.0;
  double grad_norm = 0.0;  // pre-clip
};

struct TrainTrace {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_loss;
};

struct TrainResult {
  TransformerLM model;
  TrainTrace trace;
};

// Epochs of seeded-shuffle passes over the corpus. The input model is left
// untouched; the returned model carries the updates. Deterministic given the
// config seed.
TrainResult finetune(const TransformerLM& model, const Corpus& corpus,
                     const TrainConfig& config);

// Fresh initialization trained with the same loop, normally on the general
// mixture corpus with the standard objective.
TrainResult pretrain(const ModelConfig& model_config, const Corpus& corpus,
                     const TrainConfig& config);

// One JSON object per step, then one per epoch summary.
void save_trace(const TrainTrace& trace, const std::string& path);

}  // namespace condlm
