// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/metrics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "condlm/rng.h"

namespace condlm {

namespace {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

std::span<const float> logits_row(const TensorPtr& logits, int row) {
  return {logits->values.data() +
              static_cast<size_t>(row) * static_cast<size_t>(logits->cols()),
          static_cast<size_t>(logits->cols())};
}

// Sum of conditional log-probabilities of `body` under the given context,
// sharing one convention across metrics: text contexts sit between BOS and
// the body, soft contexts ride as an input prefix, and the body tokens are
// always the scored positions.
double body_logprob_given(const TransformerLM& model, int bos_id,
                          std::span<const int> body, const Context& context) {
  std::vector<int> seq;
  seq.reserve(1 + body.size() + context.tokens.size());
  seq.push_back(bos_id);
  int condition_len = 1;
  TensorPtr prefix;
  if (context.kind == ContextKind::Text) {
    seq.insert(seq.end(), context.tokens.begin(), context.tokens.end());
    condition_len += static_cast<int>(context.tokens.size());
  } else if (context.kind == ContextKind::Soft) {
    prefix = context.soft;
  }
  seq.insert(seq.end(), body.begin(), body.end());
  return sequence_logprob(model, seq, condition_len, prefix).conditional_sum;
}

}  // namespace

TopicProbeResult topic_probe(const TransformerLM& model, const WorldSpec& world,
                             std::string_view template_text, std::string_view model_tag) {
  const auto words = split_words(template_text);
  if (words.empty() || words.back() != "[topic]")
    throw std::invalid_argument(
        "probe template must end with the [topic] slot, got: " + std::string(template_text));
  for (size_t i = 0; i + 1 < words.size(); ++i)
    if (words[i] == "[topic]")
      throw std::invalid_argument("probe template has a non-final [topic] slot");

  TopicProbeResult result;
  result.model_tag = std::string(model_tag);
  result.template_tokens.push_back(world.vocab.bos_id);
  for (size_t i = 0; i + 1 < words.size(); ++i)
    result.template_tokens.push_back(world.vocab.id(words[i]));

  Tape tape(false);
  const auto logits = forward(model, tape, result.template_tokens);
  const auto lp = log_softmax_f64(logits_row(logits, logits->rows() - 1));
  for (const auto& domain : world.domains)
    for (const int t : domain.topic_tokens)
      result.topic_probability[world.vocab.token(t)] = std::exp(lp[static_cast<size_t>(t)]);
  return result;
}

double domain_topic_probability(const TopicProbeResult& probe, const WorldSpec& world,
                                std::string_view domain_name) {
  const auto& domain = world.domain(domain_name);
  double total = 0.0;
  for (const int t : domain.topic_tokens) {
    const auto it = probe.topic_probability.find(world.vocab.token(t));
    if (it == probe.topic_probability.end())
      throw std::invalid_argument("probe result lacks topic token " + world.vocab.token(t));
    total += it->second;
  }
  return total;
}

PositionLossProfile per_position_loss(const TransformerLM& model, const Corpus& corpus,
                                      int max_pos, std::string_view corpus_tag) {
  if (corpus.docs.empty()) throw std::invalid_argument("corpus is empty");
  if (max_pos < 1) throw std::invalid_argument("max_pos must be at least 1");
  PositionLossProfile profile;
  profile.corpus_tag = std::string(corpus_tag);
  profile.count.assign(static_cast<size_t>(max_pos), 0);
  profile.mean_nll.assign(static_cast<size_t>(max_pos), 0.0);
  std::vector<double> sum(static_cast<size_t>(max_pos), 0.0);
  for (const auto& doc : corpus.docs) {
    const int t = static_cast<int>(doc.tokens.size());
    if (t < 2) continue;
    const auto slp = sequence_logprob(model, doc.tokens, 1);
    const int top = std::min(max_pos, t - 1);
    for (int p = 1; p <= top; ++p) {
      sum[static_cast<size_t>(p - 1)] -= slp.per_token_logprob[static_cast<size_t>(p)];
      profile.count[static_cast<size_t>(p - 1)] += 1;
    }
  }
  for (int p = 0; p < max_pos; ++p)
    if (profile.count[static_cast<size_t>(p)] > 0)
      profile.mean_nll[static_cast<size_t>(p)] =
          sum[static_cast<size_t>(p)] / static_cast<double>(profile.count[static_cast<size_t>(p)]);
  return profile;
}

void write_profile_csv(const PositionLossProfile& profile, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "position,count,mean_nll\n";
  char buf[64];
  for (size_t p = 0; p < profile.count.size(); ++p) {
    std::snprintf(buf, sizeof(buf), "%.10g", profile.mean_nll[p]);
    out << (p + 1) << ',' << profile.count[p] << ',' << buf << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

bool gradient_norm_excludes(std::string_view parameter_name) {
  // Layer norms contribute pathological scale-sensitive gradients; both the
  // scales and the shifts stay out of the reported norm.
  return parameter_name.find("ln1.") != std::string_view::npos ||
         parameter_name.find("ln2.") != std::string_view::npos ||
         parameter_name.find("final_ln.") != std::string_view::npos;
}

std::vector<std::string> gradient_norm_excluded_parameters(const TransformerLM& model) {
  std::vector<std::string> out;
  for (const auto& [name, p] : model.named_parameters())
    if (gradient_norm_excludes(name)) out.push_back(name);
  return out;
}

double objective_gradient_norm(const TransformerLM& model, const Corpus& corpus,
                               const Objective& objective) {
  if (corpus.docs.empty()) throw std::invalid_argument("corpus is empty");
  const auto params = model.named_parameters();
  for (const auto& [name, p] : params) p->set_requires_grad(true);
  model.zero_grads();

  const auto examples =
      build_batch({corpus.docs.data(), corpus.docs.size()}, objective, model.config.max_seq_len);
  int64_t total = 0;
  for (const auto& ex : examples)
    for (const uint8_t m : ex.mask) total += m;
  if (total == 0) throw std::invalid_argument("objective supervises no tokens on this corpus");

  // Each example's mean loss is reweighted by its share of the supervised
  // tokens, so the accumulated gradient is exactly that of the corpus-wide
  // token mean, independent of how documents were chunked.
  for (const auto& ex : examples) {
    int64_t count = 0;
    for (const uint8_t m : ex.mask) count += m;
    if (count == 0) continue;
    Tape tape(true);
    const auto logits = forward(model, tape, ex.tokens, ex.soft_prefix);
    const auto scored = tape.slice_rows(logits, 0, static_cast<int>(ex.tokens.size()) - 1);
    const std::vector<int> targets(ex.tokens.begin() + 1, ex.tokens.end());
    const auto ml = tape.masked_cross_entropy(scored, targets, ex.mask);
    const auto scaled = tape.scale(ml.loss, static_cast<float>(static_cast<double>(count) /
                                                               static_cast<double>(total)));
    tape.backward(scaled);
  }

  double sumsq = 0.0;
  for (const auto& [name, p] : params) {
    if (gradient_norm_excludes(name)) continue;
    for (const float g : p->grad) sumsq += static_cast<double>(g) * static_cast<double>(g);
  }
  model.zero_grads();
  return std::sqrt(sumsq);
}

double mean_token_kl(const TransformerLM& model_p, const TransformerLM& model_q,
                     const Corpus& corpus) {
  if (model_p.config.vocab_size != model_q.config.vocab_size)
    throw std::invalid_argument("vocab sizes differ: " +
                                std::to_string(model_p.config.vocab_size) + " vs " +
                                std::to_string(model_q.config.vocab_size));
  if (corpus.docs.empty()) throw std::invalid_argument("corpus is empty");
  double total = 0.0;
  int64_t positions = 0;
  for (const auto& doc : corpus.docs) {
    const int t = static_cast<int>(doc.tokens.size());
    if (t < 2) continue;
    Tape tp(false);
    Tape tq(false);
    const auto lp = forward(model_p, tp, doc.tokens);
    const auto lq = forward(model_q, tq, doc.tokens);
    for (int row = 0; row < t - 1; ++row) {
      const auto a = log_softmax_f64(logits_row(lp, row));
      const auto b = log_softmax_f64(logits_row(lq, row));
      double kl = 0.0;
      for (size_t v = 0; v < a.size(); ++v) kl += std::exp(a[v]) * (a[v] - b[v]);
      total += kl;
      positions += 1;
    }
  }
  if (positions == 0) throw std::invalid_argument("corpus has no predictable tokens");
  return total / static_cast<double>(positions);
}

ContextEffect context_effect(const TransformerLM& model, std::span<const int> text,
                             const Context& context) {
  if (text.empty()) throw std::invalid_argument("text is empty");
  const auto base = sequence_logprob(model, text, 1);

  SequenceLogProb with;
  int body_offset = 1;
  if (context.kind == ContextKind::Text && !context.tokens.empty()) {
    std::vector<int> seq;
    seq.reserve(text.size() + context.tokens.size());
    seq.push_back(text[0]);
    seq.insert(seq.end(), context.tokens.begin(), context.tokens.end());
    seq.insert(seq.end(), text.begin() + 1, text.end());
    body_offset = 1 + static_cast<int>(context.tokens.size());
    with = sequence_logprob(model, seq, body_offset);
  } else if (context.kind == ContextKind::Soft) {
    with = sequence_logprob(model, text, 1, context.soft);
  } else {
    with = base;  // no context, or an empty text context
  }

  ContextEffect effect;
  const size_t body = text.size() - 1;
  effect.per_token_delta.resize(body);
  for (size_t i = 0; i < body; ++i)
    effect.per_token_delta[i] = base.per_token_logprob[1 + i] -
                                with.per_token_logprob[static_cast<size_t>(body_offset) + i];
  effect.total_delta = base.conditional_sum - with.conditional_sum;
  return effect;
}

double fact_qa_accuracy(const TransformerLM& model, std::span<const FactProbe> probes) {
  if (probes.empty()) throw std::invalid_argument("no probes given");
  int64_t correct = 0;
  for (const auto& probe : probes) {
    Tape tape(false);
    const auto logits = forward(model, tape, probe.prompt);
    const auto lp = log_softmax_f64(logits_row(logits, logits->rows() - 1));
    const double answer_lp = lp[static_cast<size_t>(probe.answer)];
    bool win = true;
    for (const int d : probe.distractors)
      if (lp[static_cast<size_t>(d)] >= answer_lp) win = false;
    if (win) correct += 1;
  }
  return static_cast<double>(correct) / static_cast<double>(probes.size());
}

double perplexity(const TransformerLM& model, const Corpus& corpus) {
  if (corpus.docs.empty()) throw std::invalid_argument("corpus is empty");
  double total = 0.0;
  int64_t count = 0;
  for (const auto& doc : corpus.docs) {
    if (doc.tokens.size() < 2) continue;
    total -= sequence_logprob(model, doc.tokens, 1).conditional_sum;
    count += static_cast<int64_t>(doc.tokens.size()) - 1;
  }
  if (count == 0) throw std::invalid_argument("corpus has no predictable tokens");
  return std::exp(total / static_cast<double>(count));
}

double AccuracyMatrix::at(int episode, int task) const {
  if (episode < 0 || episode >= static_cast<int>(rows.size()))
    throw std::invalid_argument("episode " + std::to_string(episode) + " out of range");
  const auto& row = rows[static_cast<size_t>(episode)];
  if (static_cast<int>(row.size()) != n_tasks)
    throw std::invalid_argument("row " + std::to_string(episode) + " has " +
                                std::to_string(row.size()) + " entries, expected " +
                                std::to_string(n_tasks));
  if (task < 1 || task > n_tasks)
    throw std::invalid_argument("task " + std::to_string(task) + " out of range");
  return row[static_cast<size_t>(task - 1)];
}

double average_forgetting(const AccuracyMatrix& matrix, int k,
                          bool include_pretrained_in_max) {
  if (k < 2) throw std::invalid_argument("average forgetting needs k >= 2");
  if (k >= static_cast<int>(matrix.rows.size()))
    throw std::invalid_argument("episode " + std::to_string(k) + " out of range");
  double total = 0.0;
  for (int i = 1; i <= k - 1; ++i) {
    double best = -1.0;
    for (int j = include_pretrained_in_max ? 0 : 1; j <= k - 1; ++j)
      best = std::max(best, matrix.at(j, i));
    total += best - matrix.at(k, i);
  }
  return total / static_cast<double>(k - 1);
}

double cumulative_accuracy(const AccuracyMatrix& matrix, int k) {
  if (matrix.n_tasks < 1) throw std::invalid_argument("matrix has no tasks");
  double total = 0.0;
  for (int i = 1; i <= matrix.n_tasks; ++i) total += matrix.at(k, i);
  return total / static_cast<double>(matrix.n_tasks);
}

PairwiseContextKl pairwise_context_kl(const TransformerLM& model,
                                      std::span<const Context> contexts, int n_samples,
                                      int sample_len, uint64_t seed, int bos_id) {
  const int n = static_cast<int>(contexts.size());
  if (n < 2) throw std::invalid_argument("need at least two contexts");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be at least 1");
  if (sample_len < 1) throw std::invalid_argument("sample_len must be at least 1");
  for (const auto& c : contexts)
    if (1 + c.length() + sample_len > model.config.max_seq_len)
      throw std::invalid_argument("context plus sample_len exceeds max_seq_len");

  PairwiseContextKl result;
  result.n_samples = n_samples;
  result.sample_len = sample_len;
  result.seed = seed;
  result.pair_kl.assign(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n), 0.0));

  // One statistic per drawn sample: its mean per-token log-ratio against all
  // other contexts. Samples are independent, so the spread of these values
  // gives the estimator's standard error directly.
  std::vector<double> stats;
  stats.reserve(static_cast<size_t>(n) * static_cast<size_t>(n_samples));

  for (int i = 0; i < n; ++i) {
    const auto& src = contexts[static_cast<size_t>(i)];
    std::vector<int> prompt{bos_id};
    TensorPtr prefix;
    if (src.kind == ContextKind::Text)
      prompt.insert(prompt.end(), src.tokens.begin(), src.tokens.end());
    else if (src.kind == ContextKind::Soft)
      prefix = src.soft;

    for (int s = 0; s < n_samples; ++s) {
      const uint64_t sample_seed =
          derive_seed(seed, "ctx" + std::to_string(i) + ".sample" + std::to_string(s));
      const auto body = decode(model, prompt, prefix, sample_len, 1.0f, sample_seed);
      const double lp_self = body_logprob_given(model, bos_id, body, src);
      double stat = 0.0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const double lp_other =
            body_logprob_given(model, bos_id, body, contexts[static_cast<size_t>(j)]);
        const double ratio = (lp_self - lp_other) / static_cast<double>(sample_len);
        result.pair_kl[static_cast<size_t>(i)][static_cast<size_t>(j)] += ratio;
        stat += ratio;
      }
      stats.push_back(stat / static_cast<double>(n - 1));
    }
  }

  double mean = 0.0;
  for (auto& row : result.pair_kl)
    for (auto& cell : row) cell /= static_cast<double>(n_samples);
  for (const double s : stats) mean += s;
  mean /= static_cast<double>(stats.size());
  result.value = mean;
  double var = 0.0;
  for (const double s : stats) var += (s - mean) * (s - mean);
  if (stats.size() > 1) var /= static_cast<double>(stats.size() - 1);
  result.std_error = std::sqrt(var / static_cast<double>(stats.size()));
  return result;
}

nlohmann::json metric_record(std::string_view metric, std::string_view model_tag,
                             const nlohmann::json& params, const nlohmann::json& value,
                             uint64_t seed) {
  return nlohmann::json{{"metric", std::string(metric)},
                        {"model_tag", std::string(model_tag)},
                        {"params", params},
                        {"value", value},
                        {"seed", seed}};
}

}  // namespace condlm
