// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Conditioning contexts prepended to documents during finetuning. Three
// kinds: a text hint naming the domain's topic, an opaque random token string
// from the uuid alphabet, and a learned soft prompt of embedding vectors fit
// to a corpus while the model stays frozen. Contexts are immutable values
// after construction.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "condlm/corpus.h"
#include "condlm/model.h"
#include "condlm/tensor.h"

namespace condlm {

enum class ContextKind { None, Text, Soft };

struct Context {
  ContextKind kind = ContextKind::None;
  std::vector<int> tokens;  // Text only
  TensorPtr soft;           // Soft only: [k x d_model]
  std::string label;        // human-readable form for reports

  int length() const {
    if (kind == ContextKind::Text) return static_cast<int>(tokens.size());
    if (kind == ContextKind::Soft) return soft->rows();
    return 0;
  }
};

// One context per corpus name under a single policy.
struct ContextAssignment {
  std::string policy;  // none | hint | random | learned
  std::unordered_map<std::string, Context> by_name;

  const Context& at(std::string_view name) const;
};

// Text context phrasing the domain's topic the same way general-corpus
// announcements do, so a pretrained model already assigns it meaning.
Context make_domain_hint(const WorldSpec& world, std::string_view domain_name);

// length_tokens uniform draws from the uuid alphabet. The alphabet is large
// enough that distinct seeds give distinct contexts with near certainty.
Context make_random_context(const Vocab& vocab, int length_tokens, uint64_t seed);

// Fits k_vectors embedding rows to the corpus by minimizing the conditional
// NLL of document bodies given the soft prefix, with the model frozen. The
// returned vectors are a fixed context thereafter. If nll_trajectory is
// given, it receives the corpus NLL before training and after each epoch.
// Defaults follow the reference recipe: 10 vectors, 3 epochs, lr 1e-1.
Context learn_soft_context(const TransformerLM& model, const Corpus& corpus, int k_vectors,
                           int epochs, float lr, uint64_t seed, int batch_size = 16,
                           std::vector<double>* nll_trajectory = nullptr);

}  // namespace condlm
