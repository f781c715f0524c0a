// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Measurement code against independent oracles: closed-form KL between
// constant-logit models, brute-force gradient flattening, second
// implementations of the forgetting formulas, exact one-step conditionals
// for the pairwise-KL estimator, and uniform-model identities. Directional
// checks run on a small trained fixture shared across test cases.

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <vector>

#include "condlm/context.h"
#include "condlm/corpus.h"
#include "condlm/metrics.h"
#include "condlm/model.h"
#include "condlm/rng.h"
#include "condlm/training.h"
#include "support.h"

using condlm::AccuracyMatrix;
using condlm::Context;
using condlm::ContextKind;
using condlm::Corpus;
using condlm::Document;
using condlm::ModelConfig;
using condlm::Objective;
using condlm::TrainConfig;
using condlm::TransformerLM;
using condlm::WorldParams;
using condlm_test::make_constant_logits_model;

namespace {

// Shared trained models: a 4-domain world, a model pretrained on the general
// mixture, and three finetunes of it on the alpha corpus (standard,
// conditional with the domain hint, conditional with a random context).
// Built once; every consumer treats the members as read-only.
struct Fixture {
  condlm::WorldSpec world;
  Corpus alpha_corpus;
  Corpus alpha_eval;
  Corpus general_eval;
  TransformerLM pretrained;
  TransformerLM ft_standard;
  TransformerLM ft_hint;
  TransformerLM ft_random;
  // A light standard finetune, stopped before forgetting erodes what the
  // pretrained model knew about announcement phrasing.
  TransformerLM ft_gentle;
  Context hint;
  Context random_ctx;
  std::vector<condlm::FactProbe> alpha_probes;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    WorldParams p;
    p.n_domains = 4;
    p.n_facts_per_domain = 12;
    p.n_entities_per_domain = 8;
    p.n_relations = 4;
    p.n_filler_words = 24;
    p.n_uuid_tokens = 8;
    p.n_background_facts = 4;
    p.n_background_entities = 8;
    Fixture f;
    f.world = condlm::generate_world(404, p);

    // Pretraining lengths reach past the positions a prepended hint shifts
    // finetuning bodies into, so tail position embeddings are not raw noise.
    const auto pretrain_corpus =
        condlm::generate_general_corpus(f.world, 800, 20, "train", {24, 58}, 2.0);
    // Density 24 over 128 docs plants each fact 24 times, enough to learn;
    // the small eval split only needs the same token statistics, not recall.
    f.alpha_corpus = condlm::generate_corpus(f.world, "alpha", 128, {32, 48}, 24.0, 21);
    f.alpha_eval = condlm::generate_corpus(f.world, "alpha", 24, {32, 48}, 3.0, 22);
    f.general_eval = condlm::generate_general_corpus(f.world, 48, 23, "heldout", {24, 40}, 2.0);

    ModelConfig mc;
    mc.vocab_size = f.world.vocab.size();
    mc.d_model = 32;
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.d_ff = 64;
    mc.max_seq_len = 64;
    mc.init_seed = 9;
    mc.init_scale = 0.05f;

    TrainConfig pre_cfg;
    pre_cfg.epochs = 10;
    pre_cfg.batch_size = 16;
    pre_cfg.lr_peak = 3e-3f;
    pre_cfg.seed = 30;
    f.pretrained = condlm::pretrain(mc, pretrain_corpus, pre_cfg).model;

    f.hint = condlm::make_domain_hint(f.world, "alpha");
    f.random_ctx = condlm::make_random_context(f.world.vocab, 8, 33);

    TrainConfig ft_cfg;
    ft_cfg.epochs = 24;
    ft_cfg.batch_size = 16;
    ft_cfg.lr_peak = 3e-3f;
    ft_cfg.seed = 31;
    f.ft_standard = condlm::finetune(f.pretrained, f.alpha_corpus, ft_cfg).model;
    TrainConfig hint_cfg = ft_cfg;
    hint_cfg.objective = Objective::conditional(f.hint);
    f.ft_hint = condlm::finetune(f.pretrained, f.alpha_corpus, hint_cfg).model;
    TrainConfig rnd_cfg = ft_cfg;
    rnd_cfg.objective = Objective::conditional(f.random_ctx);
    f.ft_random = condlm::finetune(f.pretrained, f.alpha_corpus, rnd_cfg).model;
    TrainConfig gentle_cfg = ft_cfg;
    gentle_cfg.epochs = 3;
    gentle_cfg.lr_peak = 1e-3f;
    f.ft_gentle = condlm::finetune(f.pretrained, f.alpha_corpus, gentle_cfg).model;

    f.alpha_probes = condlm::make_fact_probes(f.world, "alpha", 12, 34);
    return f;
  }();
  return f;
}

// f64 softmax of a float logit vector, used for closed-form oracles.
std::vector<double> softmax64(const std::vector<float>& logits) {
  double mx = logits[0];
  for (const float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

double kl64(const std::vector<double>& p, const std::vector<double>& q) {
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

Corpus corpus_of(std::vector<std::vector<int>> token_lists) {
  Corpus c;
  for (auto& t : token_lists) {
    Document d;
    d.domain = "alpha";
    d.tokens = std::move(t);
    c.docs.push_back(std::move(d));
  }
  return c;
}

}  // namespace

TEST_CASE("topic probe reports slot probabilities for every topic token", "[metrics]") {
  const auto& f = fixture();
  const int v = f.world.vocab.size();
  const auto uniform = make_constant_logits_model(std::vector<float>(static_cast<size_t>(v), 0.0f));

  const auto probe = condlm::topic_probe(uniform, f.world);
  REQUIRE(probe.topic_probability.size() == 8);  // 4 domains x 2 topic tokens
  for (const auto& [token, prob] : probe.topic_probability)
    REQUIRE_THAT(prob, Catch::Matchers::WithinAbs(1.0 / v, 1e-9));
  REQUIRE(probe.template_tokens.size() == 5);
  REQUIRE(probe.template_tokens[0] == f.world.vocab.bos_id);
  REQUIRE(probe.template_tokens[4] == f.world.vocab.id("about"));
  REQUIRE_THAT(condlm::domain_topic_probability(probe, f.world, "alpha"),
               Catch::Matchers::WithinAbs(2.0 / v, 1e-9));

  double reported_sum = 0.0;
  for (const auto& [token, prob] : probe.topic_probability) {
    REQUIRE(prob >= 0.0);
    REQUIRE(prob <= 1.0);
    reported_sum += prob;
  }
  REQUIRE(reported_sum < 1.0);  // topics are a subset of the slot distribution
}

TEST_CASE("topic probe rejects malformed templates", "[metrics]") {
  const auto& f = fixture();
  REQUIRE_THROWS_WITH(condlm::topic_probe(fixture().pretrained, f.world, "the text is about"),
                      Catch::Matchers::ContainsSubstring("[topic]"));
  REQUIRE_THROWS_WITH(
      condlm::topic_probe(fixture().pretrained, f.world, "the [topic] is interesting [topic]"),
      Catch::Matchers::ContainsSubstring("non-final"));
  REQUIRE_THROWS_WITH(condlm::topic_probe(fixture().pretrained, f.world, "zebra [topic]"),
                      Catch::Matchers::ContainsSubstring("zebra"));
}

TEST_CASE("standard finetuning raises the finetuned domain's topic prior", "[metrics]") {
  const auto& f = fixture();
  const auto before = condlm::topic_probe(f.pretrained, f.world);
  const auto after = condlm::topic_probe(f.ft_gentle, f.world);
  CAPTURE(condlm::domain_topic_probability(before, f.world, "alpha"),
          condlm::domain_topic_probability(after, f.world, "alpha"));
  REQUIRE(condlm::domain_topic_probability(after, f.world, "alpha") >
          condlm::domain_topic_probability(before, f.world, "alpha"));
}

TEST_CASE("position loss profile matches direct per-document accumulation", "[metrics]") {
  const auto& f = fixture();
  const int max_pos = 12;
  const auto profile = condlm::per_position_loss(f.pretrained, f.alpha_eval, max_pos, "alpha");
  REQUIRE(profile.corpus_tag == "alpha");

  // Independent accumulation straight from sequence scores.
  std::vector<double> sum(static_cast<size_t>(max_pos), 0.0);
  std::vector<int64_t> count(static_cast<size_t>(max_pos), 0);
  for (const auto& doc : f.alpha_eval.docs) {
    const auto slp = condlm::sequence_logprob(f.pretrained, doc.tokens, 1);
    for (int pos = 1; pos < static_cast<int>(doc.tokens.size()) && pos <= max_pos; ++pos) {
      sum[static_cast<size_t>(pos - 1)] -= slp.per_token_logprob[static_cast<size_t>(pos)];
      count[static_cast<size_t>(pos - 1)] += 1;
    }
  }
  for (int pos = 0; pos < max_pos; ++pos) {
    REQUIRE(profile.count[static_cast<size_t>(pos)] == count[static_cast<size_t>(pos)]);
    REQUIRE_THAT(profile.mean_nll[static_cast<size_t>(pos)],
                 Catch::Matchers::WithinAbs(
                     sum[static_cast<size_t>(pos)] / static_cast<double>(count[static_cast<size_t>(pos)]),
                     1e-12));
  }
  for (size_t pos = 1; pos < profile.count.size(); ++pos)
    REQUIRE(profile.count[pos] <= profile.count[pos - 1]);
}

TEST_CASE("position loss profile handles single docs and uniform models", "[metrics]") {
  const auto uniform = make_constant_logits_model(std::vector<float>(7, 0.0f));
  const auto corpus = corpus_of({{0, 3, 5, 2}, {0, 1, 2}, {0, 6}});
  const auto profile = condlm::per_position_loss(uniform, corpus, 5);
  REQUIRE(profile.count == std::vector<int64_t>{3, 2, 1, 0, 0});
  for (int pos = 0; pos < 3; ++pos)
    REQUIRE_THAT(profile.mean_nll[static_cast<size_t>(pos)],
                 Catch::Matchers::WithinAbs(std::log(7.0), 1e-9));
  REQUIRE(profile.mean_nll[3] == 0.0);

  const auto single = corpus_of({{0, 3, 5, 2}});
  const auto sp = condlm::per_position_loss(uniform, single, 3);
  const auto slp = condlm::sequence_logprob(uniform, single.docs[0].tokens, 1);
  for (int pos = 1; pos <= 3; ++pos)
    REQUIRE_THAT(sp.mean_nll[static_cast<size_t>(pos - 1)],
                 Catch::Matchers::WithinAbs(-slp.per_token_logprob[static_cast<size_t>(pos)], 1e-12));

  REQUIRE_THROWS_WITH(condlm::per_position_loss(uniform, Corpus{}, 3),
                      Catch::Matchers::ContainsSubstring("empty"));
  REQUIRE_THROWS_WITH(condlm::per_position_loss(uniform, single, 0),
                      Catch::Matchers::ContainsSubstring("max_pos"));
}

TEST_CASE("profile CSV serializes deterministically with a fixed header", "[metrics]") {
  condlm::PositionLossProfile profile;
  profile.count = {4, 2};
  profile.mean_nll = {1.25, 0.333333333333333};
  profile.corpus_tag = "t";
  const auto path = std::filesystem::temp_directory_path() / "condlm_profile.csv";
  condlm::write_profile_csv(profile, path.string());
  std::ifstream in(path);
  std::stringstream first;
  first << in.rdbuf();
  condlm::write_profile_csv(profile, path.string());
  std::ifstream in2(path);
  std::stringstream second;
  second << in2.rdbuf();
  REQUIRE(first.str() == second.str());
  REQUIRE(first.str() == "position,count,mean_nll\n1,4,1.25\n2,2,0.3333333333\n");
  std::filesystem::remove(path);
}

TEST_CASE("gradient norm equals a brute-force flatten over included parameters",
          "[metrics]") {
  const auto& f = fixture();
  Corpus small;
  small.docs.assign(f.alpha_eval.docs.begin(), f.alpha_eval.docs.begin() + 8);

  const double got = condlm::objective_gradient_norm(f.pretrained, small, Objective::standard());

  // Brute force on a clone: accumulate the token-weighted mean loss gradient
  // document by document, then flatten and take norms with and without the
  // layer-norm parameters.
  auto clone = f.pretrained.clone();
  const auto params = clone.named_parameters();
  for (const auto& [name, p] : params) p->set_requires_grad(true);
  clone.zero_grads();
  int64_t total = 0;
  for (const auto& doc : small.docs) total += static_cast<int64_t>(doc.tokens.size()) - 1;
  for (const auto& doc : small.docs) {
    condlm::Tape tape(true);
    const auto logits = condlm::forward(clone, tape, doc.tokens);
    const auto scored = tape.slice_rows(logits, 0, static_cast<int>(doc.tokens.size()) - 1);
    const std::vector<int> targets(doc.tokens.begin() + 1, doc.tokens.end());
    const std::vector<uint8_t> mask(targets.size(), 1);
    const auto ml = tape.masked_cross_entropy(scored, targets, mask);
    const auto scaled =
        tape.scale(ml.loss, static_cast<float>(static_cast<double>(ml.count) /
                                               static_cast<double>(total)));
    tape.backward(scaled);
  }
  double incl = 0.0, all = 0.0;
  for (const auto& [name, p] : params) {
    double s = 0.0;
    for (const float g : p->grad) s += static_cast<double>(g) * static_cast<double>(g);
    all += s;
    if (!condlm::gradient_norm_excludes(name)) incl += s;
  }
  REQUIRE_THAT(got, Catch::Matchers::WithinRel(std::sqrt(incl), 1e-9));
  REQUIRE(got < std::sqrt(all));  // the excluded layer-norm gradients are real
}

TEST_CASE("gradient norm excludes exactly the layer-norm parameters", "[metrics]") {
  const auto& f = fixture();
  const auto excluded = condlm::gradient_norm_excluded_parameters(f.pretrained);
  REQUIRE(excluded.size() == 10);  // 4 per layer x 2 layers, plus the final pair
  for (const auto& name : excluded) REQUIRE(name.find("ln") != std::string::npos);
  REQUIRE_FALSE(condlm::gradient_norm_excludes("tok_emb"));
  REQUIRE_FALSE(condlm::gradient_norm_excludes("layers.0.attn.wq"));
  REQUIRE_FALSE(condlm::gradient_norm_excludes("lm_head"));
  REQUIRE(condlm::gradient_norm_excludes("layers.1.ln2.shift"));
  REQUIRE(condlm::gradient_norm_excludes("final_ln.scale"));
}

TEST_CASE("gradient norm is zero at a teacher-forced stationary point", "[metrics]") {
  // A model that already puts essentially all mass on token 2 sees ~zero
  // gradient when every supervised target is token 2.
  std::vector<float> logits(8, 0.0f);
  logits[2] = 40.0f;
  const auto model = make_constant_logits_model(logits);
  const auto corpus = corpus_of({{0, 2, 2, 2}, {0, 2, 2}});
  REQUIRE(condlm::objective_gradient_norm(model, corpus, Objective::standard()) < 1e-8);
}

TEST_CASE("gradient norm leaves parameters and gradient buffers untouched", "[metrics]") {
  const auto& f = fixture();
  Corpus small;
  small.docs.assign(f.alpha_eval.docs.begin(), f.alpha_eval.docs.begin() + 4);
  const auto digest = condlm::parameters_digest(f.pretrained);
  condlm::objective_gradient_norm(f.pretrained, small, Objective::standard());
  REQUIRE(condlm::parameters_digest(f.pretrained) == digest);
  for (const auto& [name, p] : f.pretrained.named_parameters())
    for (const float g : p->grad) REQUIRE(g == 0.0f);
}

TEST_CASE("hint-conditioned loss has a smaller gradient on the skewed corpus",
          "[metrics]") {
  // The hint explains the style skew but not the planted facts, so the
  // cleanest margin is on a skewed corpus whose tokens are mostly style.
  const auto& f = fixture();
  const auto skewed = condlm::generate_corpus(f.world, "alpha", 96, {32, 48}, 3.0, 25);
  const double standard =
      condlm::objective_gradient_norm(f.pretrained, skewed, Objective::standard());
  const double conditional =
      condlm::objective_gradient_norm(f.pretrained, skewed, Objective::conditional(f.hint));
  CAPTURE(standard, conditional);
  REQUIRE(conditional < standard);
}

TEST_CASE("mean token KL matches the closed form for constant-logit models", "[metrics]") {
  const std::vector<float> la = {0.3f, -0.2f, 0.9f, 0.0f, -1.1f, 0.4f};
  const std::vector<float> lb = {-0.5f, 0.8f, 0.1f, -0.3f, 0.6f, 0.0f};
  const auto ma = make_constant_logits_model(la);
  const auto mb = make_constant_logits_model(lb);
  const auto corpus = corpus_of({{0, 1, 2, 3, 4}, {0, 5, 1}});
  const double want = kl64(softmax64(la), softmax64(lb));
  REQUIRE_THAT(condlm::mean_token_kl(ma, mb, corpus), Catch::Matchers::WithinAbs(want, 1e-9));
  REQUIRE(condlm::mean_token_kl(ma, mb, corpus) > 0.0);
  REQUIRE_THAT(condlm::mean_token_kl(ma, ma, corpus), Catch::Matchers::WithinAbs(0.0, 1e-12));

  const auto& f = fixture();
  REQUIRE_THROWS_WITH(condlm::mean_token_kl(ma, f.pretrained, corpus),
                      Catch::Matchers::ContainsSubstring("vocab"));
  REQUIRE(condlm::mean_token_kl(f.pretrained, f.ft_standard, f.general_eval) > 0.0);
}

TEST_CASE("context effect is exactly zero for absent or empty contexts", "[metrics]") {
  const auto& f = fixture();
  const auto& doc = f.alpha_eval.docs[0];
  Context none;
  const auto quiet = condlm::context_effect(f.pretrained, doc.tokens, none);
  REQUIRE(quiet.total_delta == 0.0);
  for (const double d : quiet.per_token_delta) REQUIRE(d == 0.0);

  Context empty_text;
  empty_text.kind = ContextKind::Text;
  const auto still = condlm::context_effect(f.pretrained, doc.tokens, empty_text);
  REQUIRE(still.total_delta == 0.0);
  for (const double d : still.per_token_delta) REQUIRE(d == 0.0);
}

TEST_CASE("context effect decomposes into the two sequence scores", "[metrics]") {
  const auto& f = fixture();
  const auto& doc = f.alpha_eval.docs[1];
  const auto effect = condlm::context_effect(f.pretrained, doc.tokens, f.hint);
  REQUIRE(effect.per_token_delta.size() == doc.tokens.size() - 1);

  const double without = condlm::sequence_logprob(f.pretrained, doc.tokens, 1).conditional_sum;
  std::vector<int> with_ctx;
  with_ctx.push_back(doc.tokens[0]);
  with_ctx.insert(with_ctx.end(), f.hint.tokens.begin(), f.hint.tokens.end());
  with_ctx.insert(with_ctx.end(), doc.tokens.begin() + 1, doc.tokens.end());
  const double with =
      condlm::sequence_logprob(f.pretrained, with_ctx, 1 + static_cast<int>(f.hint.tokens.size()))
          .conditional_sum;
  REQUIRE_THAT(effect.total_delta, Catch::Matchers::WithinAbs(without - with, 1e-12));

  double token_sum = 0.0;
  for (const double d : effect.per_token_delta) token_sum += d;
  REQUIRE_THAT(effect.total_delta, Catch::Matchers::WithinAbs(token_sum, 1e-9));

  // Soft contexts run through the prefix path.
  Context soft;
  soft.kind = ContextKind::Soft;
  soft.soft = condlm::Tensor::zeros({3, f.pretrained.config.d_model});
  const auto soft_effect = condlm::context_effect(f.pretrained, doc.tokens, soft);
  REQUIRE(soft_effect.per_token_delta.size() == doc.tokens.size() - 1);
  REQUIRE(std::isfinite(soft_effect.total_delta));

  std::vector<int> overlong(static_cast<size_t>(f.pretrained.config.max_seq_len), 2);
  overlong[0] = f.world.vocab.bos_id;
  REQUIRE_THROWS(condlm::context_effect(f.pretrained, overlong, f.hint));
}

TEST_CASE("a trained random context raises domain-text likelihood", "[metrics]") {
  const auto& f = fixture();
  double total = 0.0;
  for (const auto& doc : f.alpha_eval.docs)
    total += condlm::context_effect(f.ft_random, doc.tokens, f.random_ctx).total_delta;
  CAPTURE(total);
  REQUIRE(total / static_cast<double>(f.alpha_eval.docs.size()) < 0.0);
}

TEST_CASE("fact probes are well-posed against the world's fact table", "[metrics]") {
  const auto& f = fixture();
  // A lookup oracle that answers from the DomainSpec must score 1.0: the
  // planted fact behind each prompt names the answer, never a distractor.
  int correct = 0;
  for (const auto& probe : f.alpha_probes) {
    const int subject = probe.prompt[4];
    const int relation = probe.prompt[2];
    int found = -1;
    for (const auto& fact : f.world.domain("alpha").facts)
      if (fact.subject == subject && fact.relation == relation) found = fact.object;
    if (found == probe.answer &&
        std::find(probe.distractors.begin(), probe.distractors.end(), found) ==
            probe.distractors.end())
      ++correct;
  }
  REQUIRE(correct == static_cast<int>(f.alpha_probes.size()));
}

TEST_CASE("fact QA sits at chance for an untrained model", "[metrics][slow]") {
  WorldParams p;
  p.n_domains = 8;
  p.n_facts_per_domain = 64;
  p.n_entities_per_domain = 16;
  p.n_relations = 8;
  p.n_filler_words = 24;
  p.n_uuid_tokens = 8;
  p.n_background_facts = 4;
  p.n_background_entities = 8;
  const auto world = condlm::generate_world(505, p);
  std::vector<condlm::FactProbe> probes;
  for (const auto& domain : world.domains) {
    const auto batch = condlm::make_fact_probes(world, domain.name, 64, 506);
    probes.insert(probes.end(), batch.begin(), batch.end());
  }
  REQUIRE(probes.size() == 512);

  ModelConfig mc;
  mc.vocab_size = world.vocab.size();
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.max_seq_len = 16;
  mc.init_seed = 77;
  mc.init_scale = 0.02f;
  const auto model = TransformerLM::init(mc);
  const double acc = condlm::fact_qa_accuracy(model, probes);
  CAPTURE(acc);
  REQUIRE(acc > 0.25 - 0.05);
  REQUIRE(acc < 0.25 + 0.05);
}

TEST_CASE("fact QA counts exact ties as incorrect", "[metrics]") {
  const auto& f = fixture();
  const int v = f.world.vocab.size();
  const auto uniform = make_constant_logits_model(std::vector<float>(static_cast<size_t>(v), 0.0f));
  REQUIRE(condlm::fact_qa_accuracy(uniform, f.alpha_probes) == 0.0);
  REQUIRE_THROWS_WITH(condlm::fact_qa_accuracy(uniform, {}),
                      Catch::Matchers::ContainsSubstring("probes"));
}

TEST_CASE("domain finetuning teaches the planted facts", "[metrics]") {
  const auto& f = fixture();
  const double before = condlm::fact_qa_accuracy(f.pretrained, f.alpha_probes);
  const double after = condlm::fact_qa_accuracy(f.ft_standard, f.alpha_probes);
  CAPTURE(before, after);
  REQUIRE(after > before);
  REQUIRE(after >= 0.5);
}

TEST_CASE("perplexity of the uniform model is the vocabulary size", "[metrics]") {
  const auto uniform = make_constant_logits_model(std::vector<float>(9, 0.0f));
  const auto corpus = corpus_of({{0, 1, 2, 3}, {0, 4, 5}});
  REQUIRE_THAT(condlm::perplexity(uniform, corpus), Catch::Matchers::WithinAbs(9.0, 1e-9));
  REQUIRE_THROWS_WITH(condlm::perplexity(uniform, Corpus{}),
                      Catch::Matchers::ContainsSubstring("empty"));
  const auto bos_only = corpus_of({{0}});
  REQUIRE_THROWS_WITH(condlm::perplexity(uniform, bos_only),
                      Catch::Matchers::ContainsSubstring("predictable"));
}

TEST_CASE("perplexity agrees with the count-weighted profile mean", "[metrics]") {
  const auto& f = fixture();
  const double ppl = condlm::perplexity(f.pretrained, f.alpha_eval);
  REQUIRE(ppl >= 1.0);

  int longest = 0;
  for (const auto& doc : f.alpha_eval.docs)
    longest = std::max(longest, static_cast<int>(doc.tokens.size()) - 1);
  const auto profile = condlm::per_position_loss(f.pretrained, f.alpha_eval, longest);
  double weighted = 0.0;
  int64_t count = 0;
  for (size_t pos = 0; pos < profile.count.size(); ++pos) {
    weighted += profile.mean_nll[pos] * static_cast<double>(profile.count[pos]);
    count += profile.count[pos];
  }
  REQUIRE_THAT(ppl, Catch::Matchers::WithinRel(std::exp(weighted / static_cast<double>(count)),
                                               1e-9));
}

TEST_CASE("forgetting formulas match their direct definitions", "[metrics]") {
  AccuracyMatrix m;
  m.n_tasks = 1;
  m.rows = {{0.2}, {0.8}, {0.7}};
  REQUIRE_THAT(condlm::average_forgetting(m, 2), Catch::Matchers::WithinAbs(0.1, 1e-12));

  // Monotone improvement means zero or negative forgetting.
  AccuracyMatrix up;
  up.n_tasks = 2;
  up.rows = {{0.1, 0.1}, {0.3, 0.2}, {0.5, 0.4}};
  REQUIRE(condlm::average_forgetting(up, 2) <= 0.0);

  // The pretrained row participates in the max only on request.
  AccuracyMatrix base;
  base.n_tasks = 1;
  base.rows = {{0.9}, {0.5}, {0.6}};
  REQUIRE_THAT(condlm::average_forgetting(base, 2, false),
               Catch::Matchers::WithinAbs(-0.1, 1e-12));
  REQUIRE_THAT(condlm::average_forgetting(base, 2, true),
               Catch::Matchers::WithinAbs(0.3, 1e-12));

  REQUIRE_THROWS_WITH(condlm::average_forgetting(m, 1),
                      Catch::Matchers::ContainsSubstring("k >= 2"));
  REQUIRE_THROWS_WITH(condlm::average_forgetting(m, 3),
                      Catch::Matchers::ContainsSubstring("out of range"));
}

TEST_CASE("cumulative accuracy is the row mean over all tasks", "[metrics]") {
  AccuracyMatrix m;
  m.n_tasks = 2;
  m.rows = {{0.5, 0.5}, {0.9, 0.1}};
  REQUIRE_THAT(condlm::cumulative_accuracy(m, 0), Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(condlm::cumulative_accuracy(m, 1), Catch::Matchers::WithinAbs(0.5, 1e-12));

  AccuracyMatrix ragged;
  ragged.n_tasks = 2;
  ragged.rows = {{0.5, 0.5}, {0.9}};
  REQUIRE_THROWS_WITH(condlm::cumulative_accuracy(ragged, 1),
                      Catch::Matchers::ContainsSubstring("entries"));
}

TEST_CASE("forgetting and cumulative accuracy match brute force on random matrices",
          "[metrics]") {
  condlm::Rng rng(606);
  AccuracyMatrix m;
  m.n_tasks = 4;
  for (int row = 0; row <= 4; ++row) {
    std::vector<double> r;
    for (int i = 0; i < 4; ++i) r.push_back(rng.uniform());
    m.rows.push_back(r);
  }
  for (int k = 2; k <= 4; ++k) {
    for (const bool include0 : {false, true}) {
      double total = 0.0;
      for (int i = 1; i <= k - 1; ++i) {
        double best = include0 ? m.rows[0][static_cast<size_t>(i - 1)] : -1.0;
        for (int j = 1; j <= k - 1; ++j)
          best = std::max(best, m.rows[static_cast<size_t>(j)][static_cast<size_t>(i - 1)]);
        total += best - m.rows[static_cast<size_t>(k)][static_cast<size_t>(i - 1)];
      }
      REQUIRE_THAT(condlm::average_forgetting(m, k, include0),
                   Catch::Matchers::WithinAbs(total / (k - 1), 1e-12));
    }
  }
  for (int k = 0; k <= 4; ++k) {
    double mean = 0.0;
    for (int i = 0; i < 4; ++i) mean += m.rows[static_cast<size_t>(k)][static_cast<size_t>(i)];
    REQUIRE_THAT(condlm::cumulative_accuracy(m, k),
                 Catch::Matchers::WithinAbs(mean / 4.0, 1e-12));
  }
}

TEST_CASE("pairwise context KL is exactly zero for identical contexts", "[metrics]") {
  const auto& f = fixture();
  const std::vector<Context> twins = {f.hint, f.hint};
  const auto r = condlm::pairwise_context_kl(f.pretrained, twins, 8, 6, 70,
                                             f.world.vocab.bos_id);
  REQUIRE(std::abs(r.value) < 1e-6);
  REQUIRE(r.std_error == 0.0);
  REQUIRE(r.pair_kl[0][1] == 0.0);
  REQUIRE(r.pair_kl[1][0] == 0.0);
}

TEST_CASE("pairwise context KL matches enumerated one-step conditionals", "[metrics][slow]") {
  const auto& f = fixture();
  // Two single-token contexts; with sample_len 1 the conditional distribution
  // is one next-token distribution each, so the exact KL is a finite sum.
  Context ca, cb;
  ca.kind = ContextKind::Text;
  ca.tokens = {f.world.domain("alpha").topic_tokens[0]};
  cb.kind = ContextKind::Text;
  cb.tokens = {f.world.domain("beta").topic_tokens[0]};

  auto one_step = [&](const Context& c) {
    condlm::Tape tape(false);
    const std::vector<int> prompt = {f.world.vocab.bos_id, c.tokens[0]};
    const auto logits = condlm::forward(f.pretrained, tape, prompt);
    std::vector<float> row(logits->values.end() - f.world.vocab.size(), logits->values.end());
    return softmax64(row);
  };
  const auto pa = one_step(ca);
  const auto pb = one_step(cb);
  const double exact = 0.5 * (kl64(pa, pb) + kl64(pb, pa));

  const std::vector<Context> contexts = {ca, cb};
  const auto r = condlm::pairwise_context_kl(f.pretrained, contexts, 10000, 1, 71,
                                             f.world.vocab.bos_id);
  CAPTURE(r.value, r.std_error, exact);
  REQUIRE(std::abs(r.value - exact) < 3.0 * r.std_error + 1e-9);
  REQUIRE(r.value >= -3.0 * r.std_error);

  // The mean of the off-diagonal pair entries reproduces the headline value.
  const double pair_mean = (r.pair_kl[0][1] + r.pair_kl[1][0]) / 2.0;
  REQUIRE_THAT(r.value, Catch::Matchers::WithinAbs(pair_mean, 1e-12));
}

TEST_CASE("pairwise context KL reuses one sample set per source context", "[metrics]") {
  const auto& f = fixture();
  // Contexts 1 and 2 are identical, so scoring source 0's one sample set
  // under either target must give bitwise-equal estimates; fresh per-pair
  // samples would not. Sources 1 and 2 still draw their own sample sets.
  const std::vector<Context> contexts = {f.hint, f.random_ctx, f.random_ctx};
  const auto r = condlm::pairwise_context_kl(f.pretrained, contexts, 6, 6, 72,
                                             f.world.vocab.bos_id);
  REQUIRE(r.pair_kl[0][1] == r.pair_kl[0][2]);
  REQUIRE(r.pair_kl[1][2] == 0.0);

  const auto again = condlm::pairwise_context_kl(f.pretrained, contexts, 6, 6, 72,
                                                 f.world.vocab.bos_id);
  REQUIRE(again.value == r.value);
  const auto other = condlm::pairwise_context_kl(f.pretrained, contexts, 6, 6, 73,
                                                 f.world.vocab.bos_id);
  REQUIRE(other.value != r.value);
}

TEST_CASE("pairwise context KL validates its inputs", "[metrics]") {
  const auto& f = fixture();
  const std::vector<Context> one = {f.hint};
  REQUIRE_THROWS_WITH(condlm::pairwise_context_kl(f.pretrained, one, 4, 4, 1),
                      Catch::Matchers::ContainsSubstring("two contexts"));
  const std::vector<Context> two = {f.hint, f.random_ctx};
  REQUIRE_THROWS_WITH(condlm::pairwise_context_kl(f.pretrained, two, 0, 4, 1),
                      Catch::Matchers::ContainsSubstring("n_samples"));
  REQUIRE_THROWS_WITH(condlm::pairwise_context_kl(f.pretrained, two, 4, 0, 1),
                      Catch::Matchers::ContainsSubstring("sample_len"));
  REQUIRE_THROWS_WITH(
      condlm::pairwise_context_kl(f.pretrained, two, 4, f.pretrained.config.max_seq_len, 1),
      Catch::Matchers::ContainsSubstring("max_seq_len"));
}

TEST_CASE("metric evaluation never changes the model", "[metrics]") {
  const auto& f = fixture();
  Corpus small;
  small.docs.assign(f.alpha_eval.docs.begin(), f.alpha_eval.docs.begin() + 4);
  const auto digest = condlm::parameters_digest(f.pretrained);

  condlm::topic_probe(f.pretrained, f.world);
  condlm::per_position_loss(f.pretrained, small, 8);
  condlm::objective_gradient_norm(f.pretrained, small, Objective::conditional(f.hint));
  condlm::mean_token_kl(f.pretrained, f.ft_standard, small);
  condlm::context_effect(f.pretrained, small.docs[0].tokens, f.hint);
  condlm::fact_qa_accuracy(f.pretrained, f.alpha_probes);
  condlm::perplexity(f.pretrained, small);
  const std::vector<Context> contexts = {f.hint, f.random_ctx};
  condlm::pairwise_context_kl(f.pretrained, contexts, 2, 4, 7, f.world.vocab.bos_id);

  REQUIRE(condlm::parameters_digest(f.pretrained) == digest);
}

TEST_CASE("metric records carry a uniform JSON shape", "[metrics]") {
  const auto rec = condlm::metric_record("perplexity", "pretrained", {{"corpus", "general"}},
                                         12.5, 42);
  REQUIRE(rec["metric"] == "perplexity");
  REQUIRE(rec["model_tag"] == "pretrained");
  REQUIRE(rec["params"]["corpus"] == "general");
  REQUIRE(rec["value"] == 12.5);
  REQUIRE(rec["seed"] == 42);
}
