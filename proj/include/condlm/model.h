// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer language model, sized for CPU experiments.
// Pre-norm blocks, multi-head causal attention, GELU MLP, learned absolute
// position embeddings, no biases outside the layer norms.
//
// Sequence conventions used by everything downstream:
//   * Every encoded document starts with the reserved BOS token, so position
//     0 has no prediction of its own and scoring starts at position 1.
//   * An optional soft prefix of k vectors occupies position slots 0..k-1
//     ahead of the real tokens, which shift up by k. forward() returns logits
//     only for the real-token positions: row i predicts the token after
//     tokens[0..i].

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "condlm/tensor.h"

namespace condlm {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 128;
  uint64_t init_seed = 0;
  float init_scale = 0.02f;
  bool tie_embeddings = false;
};

void validate(const ModelConfig& config);  // throws std::invalid_argument
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct LayerParams {
  TensorPtr ln1_scale, ln1_shift;
  TensorPtr wq, wk, wv, wo;
  TensorPtr ln2_scale, ln2_shift;
  TensorPtr w1, w2;
};

class TransformerLM {
 public:
  ModelConfig config;
  TensorPtr tok_emb;  // [V x d]
  TensorPtr pos_emb;  // [max_seq_len x d]
  std::vector<LayerParams> layers;
  TensorPtr final_ln_scale, final_ln_shift;
  TensorPtr lm_head;  // [d x V]; absent when tie_embeddings

  // Fresh model with N(0, init_scale) weights from config.init_seed; layer
  // norm scales start at 1 and shifts at 0.
  static TransformerLM init(const ModelConfig& config);

  // Parameters in their fixed manifest order (also the checkpoint order).
  std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;
  int64_t parameter_count() const;
  void zero_grads() const;
  TransformerLM clone() const;
};

// FNV-1a over all parameter bytes in manifest order; cheap frozen-model check.
uint64_t parameters_digest(const TransformerLM& model);

// Next-token logits for the real-token positions: row i is the distribution
// over tokens[i+1] given soft_prefix + tokens[0..i]. Shape [T x V].
TensorPtr forward(const TransformerLM& model, Tape& tape, std::span<const int> tokens,
                  const TensorPtr& soft_prefix = nullptr);

// Logits for every position slot including the soft-prefix rows; row k-1 (the
// last prefix row) predicts tokens[0]. Needed for scoring and sampling that
// start directly from a context. Shape [(k + T) x V].
TensorPtr forward_all_rows(const TransformerLM& model, Tape& tape,
                           std::span<const int> tokens,
                           const TensorPtr& soft_prefix = nullptr);

struct SequenceLogProb {
  std::vector<double> per_token_logprob;  // [T]; unscored entries are 0
  int condition_len = 0;
  int first_scored = 1;  // 0 when a soft prefix supplies the first prediction
  double conditional_sum = 0.0;  // sum over scored positions >= condition_len
  double total_sum = 0.0;        // sum over all scored positions
};

// Log-probabilities of a token sequence under the model. Positions before
// max(condition_len, first_scored) count toward total_sum only; position 0 is
// scored only when a soft prefix provides its prediction.
SequenceLogProb sequence_logprob(const TransformerLM& model, std::span<const int> tokens,
                                 int condition_len, const TensorPtr& soft_prefix = nullptr);

// Autoregressive sampling. temperature == 0 is greedy argmax with ties going
// to the lowest token id; otherwise inverse-CDF sampling from the softmax at
// the given temperature, deterministic in `seed`. The prompt may be empty
// only when a soft prefix is present.
std::vector<int> decode(const TransformerLM& model, std::span<const int> prompt,
                        const TensorPtr& soft_prefix, int length, float temperature,
                        uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Layout: 7 magic bytes "CONDLM1", a little-endian u64 header length, a
// canonical (key-sorted) JSON header {"kind", "config"/..., "manifest":
// [{name, shape}...], "meta"}, then raw little-endian float32 blobs in
// manifest order. Loaders reject unknown magic, manifest mismatches and
// truncated blobs.

struct NamedTensor {
  std::string name;
  TensorPtr tensor;
};

void write_blob_container(const std::string& path, const std::string& kind,
                          const nlohmann::json& header_extra,
                          const std::vector<NamedTensor>& items);

struct BlobContainer {
  std::string kind;
  nlohmann::json header;
  std::vector<NamedTensor> items;
};
BlobContainer read_blob_container(const std::string& path);

void save_checkpoint(const TransformerLM& model, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object());
TransformerLM load_checkpoint(const std::string& path,
                              nlohmann::json* meta_out = nullptr);

// FNV-1a digest of a whole file, hex-encoded; used for checkpoint lineage.
std::string file_digest_hex(const std::string& path);

}  // namespace condlm
