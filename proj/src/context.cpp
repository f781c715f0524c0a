// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/context.h"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "condlm/kernels.h"
#include "condlm/rng.h"

namespace condlm {
namespace {

// Token-weighted conditional NLL of document bodies given the soft prefix.
// Bodies only: the BOS anchor is conditioned on, never predicted, matching
// how conditional likelihoods are scored everywhere else.
double corpus_nll(const TransformerLM& model, const Corpus& corpus, const TensorPtr& prefix) {
  double total = 0.0;
  int64_t count = 0;
  for (const auto& doc : corpus.docs) {
    const auto slp = sequence_logprob(model, doc.tokens, 1, prefix);
    total -= slp.conditional_sum;
    count += static_cast<int64_t>(doc.tokens.size()) - 1;
  }
  if (count == 0) throw std::invalid_argument("corpus has no scorable tokens");
  return total / static_cast<double>(count);
}

}  // namespace

const Context& ContextAssignment::at(std::string_view name) const {
  const auto it = by_name.find(std::string(name));
  if (it == by_name.end())
    throw std::invalid_argument("no context assigned for corpus '" + std::string(name) +
                                "' under policy '" + policy + "'");
  return it->second;
}

Context make_domain_hint(const WorldSpec& world, std::string_view domain_name) {
  const DomainSpec& domain = world.domain(domain_name);
  const Vocab& vocab = world.vocab;
  Context ctx;
  ctx.kind = ContextKind::Text;
  ctx.tokens = {vocab.id("following"), vocab.id("is"), vocab.id("text"), vocab.id("about"),
                domain.topic_tokens[0]};
  ctx.label = detokenize(vocab, ctx.tokens);
  return ctx;
}

Context make_random_context(const Vocab& vocab, int length_tokens, uint64_t seed) {
  if (length_tokens < 1)
    throw std::invalid_argument("random context length must be at least 1, got " +
                                std::to_string(length_tokens));
  if (vocab.uuid_ids.empty())
    throw std::invalid_argument("vocabulary has no uuid-alphabet tokens");
  Rng rng(derive_seed(seed, "random_context"));
  Context ctx;
  ctx.kind = ContextKind::Text;
  ctx.tokens.reserve(static_cast<size_t>(length_tokens));
  for (int i = 0; i < length_tokens; ++i)
    ctx.tokens.push_back(
        vocab.uuid_ids[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(vocab.uuid_ids.size())))]);
  ctx.label = detokenize(vocab, ctx.tokens);
  return ctx;
}

Context learn_soft_context(const TransformerLM& model, const Corpus& corpus, int k_vectors,
                           int epochs, float lr, uint64_t seed, int batch_size,
                           std::vector<double>* nll_trajectory) {
  if (k_vectors < 1)
    throw std::invalid_argument("k_vectors must be at least 1, got " +
                                std::to_string(k_vectors));
  if (epochs < 1 || batch_size < 1)
    throw std::invalid_argument("epochs and batch_size must be at least 1");
  if (!(lr > 0.0f)) throw std::invalid_argument("learning rate must be positive");
  if (corpus.docs.empty()) throw std::invalid_argument("cannot fit a soft context to an empty corpus");
  size_t max_len = 0;
  for (const auto& doc : corpus.docs) max_len = std::max(max_len, doc.tokens.size());
  if (k_vectors + static_cast<int>(max_len) > model.config.max_seq_len)
    throw std::invalid_argument(
        "soft prefix of " + std::to_string(k_vectors) + " plus longest document of " +
        std::to_string(max_len) + " tokens exceeds max_seq_len " +
        std::to_string(model.config.max_seq_len));

  const int d = model.config.d_model;
  auto prefix = Tensor::zeros({k_vectors, d}, true);
  {
    Rng rng(derive_seed(seed, "soft_init"));
    for (auto& v : prefix->values) v = rng.normal_f(0.0f, model.config.init_scale);
  }

  if (nll_trajectory) {
    nll_trajectory->clear();
    nll_trajectory->push_back(corpus_nll(model, corpus, prefix));
  }

  // Adam with decoupled decay disabled: the prefix is the only trainable
  // block and the recipe specifies just epochs and lr.
  std::vector<float> m(prefix->values.size(), 0.0f);
  std::vector<float> v(prefix->values.size(), 0.0f);
  int step = 0;

  std::vector<size_t> order(corpus.docs.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, "epoch" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
      Tape tape;
      TensorPtr batch_loss;
      int64_t batch_tokens = 0;
      std::vector<std::pair<TensorPtr, int64_t>> losses;
      for (size_t bi = start; bi < end; ++bi) {
        const auto& tokens = corpus.docs[order[bi]].tokens;
        const int t_len = static_cast<int>(tokens.size());
        if (t_len < 2) continue;
        auto logits = forward(model, tape, tokens, prefix);
        auto scored = tape.slice_rows(logits, 0, t_len - 1);
        const std::vector<int> targets(tokens.begin() + 1, tokens.end());
        const std::vector<uint8_t> mask(targets.size(), 1);
        const auto ml = tape.masked_cross_entropy(scored, targets, mask);
        losses.emplace_back(ml.loss, ml.count);
        batch_tokens += ml.count;
      }
      if (losses.empty()) continue;
      for (const auto& [loss, count] : losses) {
        auto weighted = tape.scale(
            loss, static_cast<float>(static_cast<double>(count) /
                                     static_cast<double>(batch_tokens)));
        batch_loss = batch_loss ? tape.add(batch_loss, weighted) : weighted;
      }
      tape.backward(batch_loss);

      ++step;
      const float bc1 = 1.0f - std::pow(0.9f, static_cast<float>(step));
      const float bc2 = 1.0f - std::pow(0.999f, static_cast<float>(step));
      kernels::adamw_update(static_cast<int>(prefix->values.size()), prefix->values.data(),
                            prefix->grad.data(), m.data(), v.data(), lr, 0.9f, 0.999f, 1e-8f,
                            0.0f, bc1, bc2);
      prefix->zero_grad();
    }
    if (nll_trajectory) nll_trajectory->push_back(corpus_nll(model, corpus, prefix));
  }

  // The optimization above accumulated gradients into the frozen model's
  // parameter buffers as a side effect of the backward pass; clear them so
  // the caller gets the model back in a clean state. Values never changed.
  model.zero_grads();

  Context ctx;
  ctx.kind = ContextKind::Soft;
  ctx.soft = Tensor::from_values(prefix->shape, prefix->values);
  ctx.label = "soft[k=" + std::to_string(k_vectors) + "]";
  return ctx;
}

}  // namespace condlm
