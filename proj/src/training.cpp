// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/training.h"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "condlm/kernels.h"
#include "condlm/rng.h"

namespace condlm {
namespace {

// Splits one document into examples: [BOS, context?, window] per window of
// the document body, every window conditioned the same way.
void append_examples(std::vector<Example>& out, const Document& doc,
                     const Objective& objective, int max_seq_len) {
  const bool conditional = objective.kind == Objective::Kind::Conditional;
  const Context& ctx = objective.context;
  const bool text_ctx = conditional && ctx.kind == ContextKind::Text;
  const bool soft_ctx = conditional && ctx.kind == ContextKind::Soft;

  const int ctx_len = conditional ? ctx.length() : 0;
  const int window = max_seq_len - 1 - ctx_len;
  if (window < 1)
    throw std::invalid_argument("context of " + std::to_string(ctx_len) +
                                " tokens leaves no room for supervised tokens in a budget of " +
                                std::to_string(max_seq_len));

  // doc.tokens = [BOS, body...]; supervise each body token exactly once.
  const std::span<const int> body(doc.tokens.data() + 1, doc.tokens.size() - 1);
  for (size_t start = 0; start < body.size(); start += static_cast<size_t>(window)) {
    const size_t len = std::min(static_cast<size_t>(window), body.size() - start);
    Example ex;
    ex.tokens.reserve(1 + static_cast<size_t>(text_ctx ? ctx_len : 0) + len);
    ex.tokens.push_back(doc.tokens[0]);
    if (text_ctx) ex.tokens.insert(ex.tokens.end(), ctx.tokens.begin(), ctx.tokens.end());
    ex.tokens.insert(ex.tokens.end(), body.begin() + static_cast<ptrdiff_t>(start),
                     body.begin() + static_cast<ptrdiff_t>(start + len));
    ex.mask.assign(ex.tokens.size() - 1, 1);
    if (text_ctx)
      for (int i = 0; i < ctx_len; ++i) ex.mask[static_cast<size_t>(i)] = 0;
    if (soft_ctx) ex.soft_prefix = ctx.soft;
    out.push_back(std::move(ex));
  }
}

double run_batch(TransformerLM& model, const std::vector<Example>& examples) {
  Tape tape;
  TensorPtr batch_loss;
  int64_t batch_tokens = 0;
  std::vector<std::pair<TensorPtr, int64_t>> losses;
  double value = 0.0;
  for (const auto& ex : examples) {
    const int t_len = static_cast<int>(ex.tokens.size());
    if (t_len < 2) continue;
    auto logits = forward(model, tape, ex.tokens, ex.soft_prefix);
    auto scored = tape.slice_rows(logits, 0, t_len - 1);
    const std::vector<int> targets(ex.tokens.begin() + 1, ex.tokens.end());
    const auto ml = tape.masked_cross_entropy(scored, targets, ex.mask);
    losses.emplace_back(ml.loss, ml.count);
    batch_tokens += ml.count;
  }
  if (losses.empty())
    throw std::invalid_argument("batch contains no supervisable tokens");
  for (const auto& [loss, count] : losses) {
    auto weighted = tape.scale(loss, static_cast<float>(static_cast<double>(count) /
                                                        static_cast<double>(batch_tokens)));
    batch_loss = batch_loss ? tape.add(batch_loss, weighted) : weighted;
    value += static_cast<double>(loss->values[0]) * static_cast<double>(count) /
             static_cast<double>(batch_tokens);
  }
  tape.backward(batch_loss);
  return value;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1)
    throw std::invalid_argument("epochs must be at least 1, got " + std::to_string(epochs));
  if (batch_size < 1)
    throw std::invalid_argument("batch_size must be at least 1, got " +
                                std::to_string(batch_size));
  if (!(lr_peak > 0.0f)) throw std::invalid_argument("lr_peak must be positive");
  if (!(warmup_fraction >= 0.0f && warmup_fraction < 1.0f))
    throw std::invalid_argument("warmup_fraction must be in [0, 1), got " +
                                std::to_string(warmup_fraction));
  if (!(grad_clip_norm > 0.0f))
    throw std::invalid_argument("grad_clip_norm must be positive");
  if (weight_decay < 0.0f)
    throw std::invalid_argument("weight_decay must be nonnegative");
  if (max_seq_len < 0)
    throw std::invalid_argument("max_seq_len must be nonnegative");
}

std::vector<Example> build_batch(std::span<const Document> docs, const Objective& objective,
                                 int max_seq_len) {
  if (max_seq_len < 2)
    throw std::invalid_argument("max_seq_len of " + std::to_string(max_seq_len) +
                                " cannot hold BOS plus a supervised token");
  std::vector<Example> out;
  out.reserve(docs.size());
  for (const auto& doc : docs) {
    if (doc.tokens.size() < 2) continue;  // nothing to supervise
    append_examples(out, doc, objective, max_seq_len);
  }
  return out;
}

float lr_at(int64_t step, int64_t total_steps, const TrainConfig& config) {
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  const int64_t warmup = static_cast<int64_t>(
      std::floor(static_cast<double>(config.warmup_fraction) *
                 static_cast<double>(total_steps)));
  if (step < warmup)
    return config.lr_peak * static_cast<float>(static_cast<double>(step) /
                                               static_cast<double>(warmup));
  if (total_steps == warmup) return step == total_steps ? 0.0f : config.lr_peak;
  return config.lr_peak * static_cast<float>(static_cast<double>(total_steps - step) /
                                             static_cast<double>(total_steps - warmup));
}

OptimizerState OptimizerState::init(const TransformerLM& model, const TrainConfig& config) {
  OptimizerState state;
  state.beta1 = config.beta1;
  state.beta2 = config.beta2;
  state.eps = config.eps;
  state.weight_decay = config.weight_decay;
  for (const auto& [name, p] : model.named_parameters()) {
    state.m.emplace_back(p->values.size(), 0.0f);
    state.v.emplace_back(p->values.size(), 0.0f);
  }
  return state;
}

void adamw_step(TransformerLM& model, OptimizerState& state, float lr) {
  const auto params = model.named_parameters();
  if (params.size() != state.m.size())
    throw std::invalid_argument("optimizer state tracks " + std::to_string(state.m.size()) +
                                " tensors but the model has " + std::to_string(params.size()));
  state.t += 1;
  const float bc1 = 1.0f - std::pow(state.beta1, static_cast<float>(state.t));
  const float bc2 = 1.0f - std::pow(state.beta2, static_cast<float>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    if (state.m[i].size() != p->values.size())
      throw std::invalid_argument("optimizer state shape mismatch on '" + params[i].first +
                                  "': " + std::to_string(state.m[i].size()) + " vs " +
                                  std::to_string(p->values.size()));
    kernels::adamw_update(static_cast<int>(p->values.size()), p->values.data(),
                          p->grad.data(), state.m[i].data(), state.v[i].data(), lr,
                          state.beta1, state.beta2, state.eps, state.weight_decay, bc1, bc2);
  }
}

double clip_gradients(const TransformerLM& model, float max_norm) {
  double sumsq = 0.0;
  const auto params = model.named_parameters();
  for (const auto& [name, p] : params)
    for (const float g : p->grad) sumsq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sumsq);
  if (norm > static_cast<double>(max_norm)) {
    const float s = static_cast<float>(static_cast<double>(max_norm) / norm);
    for (const auto& [name, p] : params)
      kernels::scale(static_cast<int>(p->grad.size()), s, p->grad.data(), p->grad.data());
  }
  return norm;
}

TrainResult finetune(const TransformerLM& model, const Corpus& corpus,
                     const TrainConfig& config) {
  config.validate();
  if (corpus.docs.empty()) throw std::invalid_argument("cannot train on an empty corpus");
  const int budget = config.max_seq_len == 0 ? model.config.max_seq_len : config.max_seq_len;
  if (budget > model.config.max_seq_len)
    throw std::invalid_argument("config max_seq_len " + std::to_string(budget) +
                                " exceeds the model's " +
                                std::to_string(model.config.max_seq_len));

  TrainResult result{model.clone(), {}};
  TransformerLM& m = result.model;
  OptimizerState state = OptimizerState::init(m, config);

  const int64_t n_docs = static_cast<int64_t>(corpus.docs.size());
  const int64_t batches_per_epoch =
      (n_docs + config.batch_size - 1) / config.batch_size;
  const int64_t total_steps = batches_per_epoch * config.epochs;

  std::vector<size_t> order(corpus.docs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Document> batch_docs;
  int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(config.seed, "epoch" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t epoch_batches = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(config.batch_size)) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      batch_docs.clear();
      for (size_t i = start; i < end; ++i) batch_docs.push_back(corpus.docs[order[i]]);
      const auto examples = build_batch(batch_docs, config.objective, budget);
      const double loss = run_batch(m, examples);

      ++step;
      const float lr = lr_at(step, total_steps, config);
      const double grad_norm = clip_gradients(m, config.grad_clip_norm);
      adamw_step(m, state, lr);
      m.zero_grads();

      result.trace.steps.push_back(StepRecord{step, lr, loss, grad_norm});
      epoch_loss += loss;
      ++epoch_batches;
    }
    result.trace.epoch_mean_loss.push_back(epoch_loss /
                                           static_cast<double>(epoch_batches));
  }
  return result;
}

TrainResult pretrain(const ModelConfig& model_config, const Corpus& corpus,
                     const TrainConfig& config) {
  return finetune(TransformerLM::init(model_config), corpus, config);
}

void save_trace(const TrainTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& s : trace.steps) {
    const nlohmann::json j = {
        {"step", s.step}, {"lr", s.lr}, {"loss", s.loss}, {"grad_norm", s.grad_norm}};
    out << j.dump() << "\n";
  }
  for (size_t e = 0; e < trace.epoch_mean_loss.size(); ++e) {
    const nlohmann::json j = {{"epoch", e}, {"mean_loss", trace.epoch_mean_loss[e]}};
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("failed writing trace to '" + path + "'");
}

}  // namespace condlm
