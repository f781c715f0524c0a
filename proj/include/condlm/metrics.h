// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Measurements over trained models: topic priors, loss profiles, gradient
// norms, divergences from a reference model, context effects, fact recall,
// perplexity, and the continual-learning summary statistics. Every function
// here is read-only with respect to the model: parameter values are never
// changed, and the one function that needs gradient buffers
// (objective_gradient_norm) zeroes them before returning. Evaluation is
// contextless unless the metric's own definition involves a context.

#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condlm/context.h"
#include "condlm/corpus.h"
#include "condlm/model.h"
#include "condlm/training.h"

namespace condlm {

// ---------------------------------------------------------------------------
// Topic prior probe

// Probability of each topic token in the next-token distribution after a
// probe sentence, e.g. "the text is about [topic]". The map is keyed by the
// topic token's text; summing a domain's tokens gives that domain's prior.
struct TopicProbeResult {
  std::map<std::string, double> topic_probability;
  std::vector<int> template_tokens;  // BOS plus the words before the slot
  std::string model_tag;
};

inline constexpr std::string_view kDefaultProbeTemplate = "the text is about [topic]";

// The template must end with the literal "[topic]" placeholder; everything
// before it must tokenize under the world's vocabulary.
TopicProbeResult topic_probe(const TransformerLM& model, const WorldSpec& world,
                             std::string_view template_text = kDefaultProbeTemplate,
                             std::string_view model_tag = "");

// Sum of the probe probabilities over one domain's topic tokens.
double domain_topic_probability(const TopicProbeResult& probe, const WorldSpec& world,
                                std::string_view domain_name);

// ---------------------------------------------------------------------------
// Per-position loss profile

// Mean NLL of the token at each 1-based position, over the documents long
// enough to have that position. Counts are weakly decreasing in position.
struct PositionLossProfile {
  std::vector<int64_t> count;    // count[p-1] documents contributed position p
  std::vector<double> mean_nll;  // mean_nll[p-1]; 0 where count is 0
  std::string corpus_tag;
};

PositionLossProfile per_position_loss(const TransformerLM& model, const Corpus& corpus,
                                      int max_pos, std::string_view corpus_tag = "");

// CSV with header "position,count,mean_nll"; numbers printed with %.10g so
// identical profiles serialize bytewise identically.
void write_profile_csv(const PositionLossProfile& profile, const std::string& path);

// ---------------------------------------------------------------------------
// Objective gradient norm

// L2 norm of the gradient of the mean objective loss over the whole corpus,
// flattened across all parameters except layer-norm scales and shifts. The
// mean weights every supervised token equally. Gradient buffers are zeroed
// before returning, so the model is observationally unchanged.
double objective_gradient_norm(const TransformerLM& model, const Corpus& corpus,
                               const Objective& objective);

// The exclusion convention, stated explicitly so reports can record it.
bool gradient_norm_excludes(std::string_view parameter_name);
std::vector<std::string> gradient_norm_excluded_parameters(const TransformerLM& model);

// ---------------------------------------------------------------------------
// Divergence from a reference model

// Mean over all predictable token positions of KL(p_next || q_next) between
// the two models' next-token distributions, evaluated contextless on the
// corpus. Both models must share the vocabulary size.
double mean_token_kl(const TransformerLM& model_p, const TransformerLM& model_q,
                     const Corpus& corpus);

// ---------------------------------------------------------------------------
// Context effect

// Per-token and total delta = log p(x) - log p(x|a): positive where the
// context makes a token less likely, negative where it makes it more likely.
// `text` is a document token sequence starting at BOS; deltas cover the body
// tokens text[1..] in order.
struct ContextEffect {
  std::vector<double> per_token_delta;
  double total_delta = 0.0;
};

ContextEffect context_effect(const TransformerLM& model, std::span<const int> text,
                             const Context& context);

// ---------------------------------------------------------------------------
// Fact recall and perplexity

// Fraction of probes whose true answer scores a strictly higher next-token
// log-probability than every distractor. Ties count as incorrect.
double fact_qa_accuracy(const TransformerLM& model, std::span<const FactProbe> probes);

// exp(mean NLL) over all predictable tokens of the corpus, contextless.
double perplexity(const TransformerLM& model, const Corpus& corpus);

// ---------------------------------------------------------------------------
// Continual-learning summaries

// Accuracy on each task after each training episode. Row 0 is the pretrained
// model before any episode; row k is after episode k. Tasks are 1-based in
// the accessor to match the usual formula indexing.
struct AccuracyMatrix {
  int n_tasks = 0;
  std::vector<std::vector<double>> rows;

  double at(int episode, int task) const;  // task in 1..n_tasks
};

// Mean drop from each earlier task's best accuracy to its accuracy after
// episode k, over tasks 1..k-1. The max runs over episode rows 1..k-1; pass
// include_pretrained_in_max to also admit row 0 as a baseline. Negative
// values mean backward transfer. Requires k >= 2.
double average_forgetting(const AccuracyMatrix& matrix, int k,
                          bool include_pretrained_in_max = false);

// Mean accuracy over all tasks after episode k, trained or not.
double cumulative_accuracy(const AccuracyMatrix& matrix, int k);

// ---------------------------------------------------------------------------
// Pairwise context KL

// Monte Carlo estimate of the average pairwise KL divergence between the
// conditional distributions p(.|a_i) induced by the contexts: sequences are
// sampled once per source context at temperature 1 and re-scored under every
// other context, log-ratios normalized per token. std_error is the standard
// error of the mean over the independent per-sample statistics.
struct PairwiseContextKl {
  double value = 0.0;
  double std_error = 0.0;
  std::vector<std::vector<double>> pair_kl;  // [n][n], diagonal zero
  int n_samples = 0;
  int sample_len = 0;
  uint64_t seed = 0;
};

PairwiseContextKl pairwise_context_kl(const TransformerLM& model,
                                      std::span<const Context> contexts, int n_samples,
                                      int sample_len, uint64_t seed, int bos_id = 0);

// ---------------------------------------------------------------------------
// Record plumbing

// Uniform JSON shape for metric outputs: {metric, model_tag, params, value,
// seed}. Harness code attaches these to run records.
nlohmann::json metric_record(std::string_view metric, std::string_view model_tag,
                             const nlohmann::json& params, const nlohmann::json& value,
                             uint64_t seed = 0);

}  // namespace condlm
