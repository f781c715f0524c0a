// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Training mechanics against closed-form oracles: the schedule at its pinned
// points, batch construction and chunking by direct scan, gradient clipping
// against a flattened brute-force norm, decoupled weight decay by hand, and
// the loop's determinism and learning behavior on small corpora.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "condlm/context.h"
#include "condlm/corpus.h"
#include "condlm/model.h"
#include "condlm/rng.h"
#include "condlm/training.h"

using condlm::Context;
using condlm::ContextKind;
using condlm::Corpus;
using condlm::Document;
using condlm::ModelConfig;
using condlm::Objective;
using condlm::TrainConfig;
using condlm::TransformerLM;
using condlm::WorldParams;

namespace {

condlm::WorldSpec small_world() {
  WorldParams p;
  p.n_domains = 2;
  p.n_facts_per_domain = 4;
  p.n_entities_per_domain = 4;
  p.n_relations = 2;
  p.n_filler_words = 12;
  p.n_uuid_tokens = 8;
  p.n_background_facts = 2;
  p.n_background_entities = 4;
  return condlm::generate_world(71, p);
}

ModelConfig small_model_config(const condlm::WorldSpec& world) {
  ModelConfig c;
  c.vocab_size = world.vocab.size();
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq_len = 64;
  c.init_seed = 9;
  c.init_scale = 0.05f;
  return c;
}

Document make_doc(int bos, const std::vector<int>& body) {
  Document d;
  d.domain = "alpha";
  d.tokens.push_back(bos);
  d.tokens.insert(d.tokens.end(), body.begin(), body.end());
  return d;
}

}  // namespace

TEST_CASE("the learning-rate schedule hits its pinned points", "[training]") {
  TrainConfig cfg;
  cfg.lr_peak = 3e-4f;
  cfg.warmup_fraction = 0.1f;
  const int64_t total = 100;  // warmup ends at step 10
  REQUIRE(condlm::lr_at(0, total, cfg) == 0.0f);
  REQUIRE(condlm::lr_at(10, total, cfg) == cfg.lr_peak);
  REQUIRE(condlm::lr_at(100, total, cfg) == 0.0f);
  REQUIRE_THAT(condlm::lr_at(55, total, cfg),
               Catch::Matchers::WithinRel(3e-4 * 45.0 / 90.0, 1e-6));
  // Monotone up through warmup, monotone down after.
  for (int64_t s = 1; s <= 10; ++s)
    REQUIRE(condlm::lr_at(s, total, cfg) > condlm::lr_at(s - 1, total, cfg));
  for (int64_t s = 11; s <= 100; ++s)
    REQUIRE(condlm::lr_at(s, total, cfg) < condlm::lr_at(s - 1, total, cfg));
  REQUIRE_THROWS_WITH(condlm::lr_at(101, total, cfg),
                      Catch::Matchers::ContainsSubstring("outside"));
}

TEST_CASE("standard batches supervise every predictable position", "[training]") {
  const auto doc = make_doc(0, {5, 6, 7, 8});
  const auto batch = condlm::build_batch({&doc, 1}, Objective::standard(), 32);
  REQUIRE(batch.size() == 1);
  REQUIRE(batch[0].tokens == doc.tokens);
  REQUIRE(batch[0].mask == std::vector<uint8_t>{1, 1, 1, 1});
  REQUIRE_FALSE(batch[0].soft_prefix);
}

TEST_CASE("conditional batches mask exactly the context predictions", "[training]") {
  Context ctx;
  ctx.kind = ContextKind::Text;
  ctx.tokens = {10, 11, 12, 13, 14};
  std::vector<int> body(19);
  std::iota(body.begin(), body.end(), 20);
  const auto doc = make_doc(0, body);  // 20 tokens with BOS
  const auto batch = condlm::build_batch({&doc, 1}, Objective::conditional(ctx), 64);
  REQUIRE(batch.size() == 1);
  const auto& ex = batch[0];
  REQUIRE(ex.tokens.size() == 25);
  REQUIRE(ex.tokens[0] == 0);
  for (int i = 0; i < 5; ++i) REQUIRE(ex.tokens[static_cast<size_t>(1 + i)] == 10 + i);
  REQUIRE(ex.mask.size() == 24);
  int leading_false = 0;
  while (leading_false < 24 && ex.mask[static_cast<size_t>(leading_false)] == 0)
    ++leading_false;
  REQUIRE(leading_false == 5);
  for (size_t i = 5; i < ex.mask.size(); ++i) REQUIRE(ex.mask[i] == 1);
}

TEST_CASE("an empty text context reproduces the standard batch bitwise", "[training]") {
  Context empty;
  empty.kind = ContextKind::Text;
  const auto doc = make_doc(0, {3, 4, 5, 6, 7});
  const auto std_batch = condlm::build_batch({&doc, 1}, Objective::standard(), 16);
  const auto cond_batch = condlm::build_batch({&doc, 1}, Objective::conditional(empty), 16);
  REQUIRE(cond_batch.size() == std_batch.size());
  REQUIRE(cond_batch[0].tokens == std_batch[0].tokens);
  REQUIRE(cond_batch[0].mask == std_batch[0].mask);
}

TEST_CASE("chunking re-prepends the context to every window", "[training]") {
  Context ctx;
  ctx.kind = ContextKind::Text;
  ctx.tokens = {40, 41, 42, 43};
  const int budget = 16;
  const int window = budget - 1 - 4;  // 11
  std::vector<int> body(2 * window);
  std::iota(body.begin(), body.end(), 50);
  const auto doc = make_doc(0, body);
  const auto batch = condlm::build_batch({&doc, 1}, Objective::conditional(ctx), budget);
  REQUIRE(batch.size() == 2);
  std::vector<int> recovered;
  for (const auto& ex : batch) {
    REQUIRE(ex.tokens.size() <= static_cast<size_t>(budget));
    REQUIRE(ex.tokens[0] == 0);
    for (int i = 0; i < 4; ++i) REQUIRE(ex.tokens[static_cast<size_t>(1 + i)] == 40 + i);
    for (int i = 0; i < 4; ++i) REQUIRE(ex.mask[static_cast<size_t>(i)] == 0);
    for (size_t i = 4; i < ex.mask.size(); ++i) REQUIRE(ex.mask[i] == 1);
    recovered.insert(recovered.end(), ex.tokens.begin() + 5, ex.tokens.end());
  }
  // Supervised windows partition the body in order.
  REQUIRE(recovered == body);

  // A soft context shifts the budget without occupying token slots.
  Context soft;
  soft.kind = ContextKind::Soft;
  soft.soft = condlm::Tensor::zeros({3, 8});
  const auto soft_batch = condlm::build_batch({&doc, 1}, Objective::conditional(soft), budget);
  for (const auto& ex : soft_batch) {
    REQUIRE(ex.soft_prefix == soft.soft);
    REQUIRE(ex.tokens.size() <= static_cast<size_t>(budget - 3));
    for (const uint8_t m : ex.mask) REQUIRE(m == 1);
  }

  // No room for a single supervised token.
  Context fat;
  fat.kind = ContextKind::Text;
  fat.tokens.assign(15, 40);
  REQUIRE_THROWS_WITH(condlm::build_batch({&doc, 1}, Objective::conditional(fat), budget),
                      Catch::Matchers::ContainsSubstring("supervised"));
}

TEST_CASE("gradient clipping matches a flattened brute-force norm", "[training]") {
  const auto world = small_world();
  auto model = TransformerLM::init(small_model_config(world));
  condlm::Rng rng(17);
  for (const auto& [name, p] : model.named_parameters()) {
    p->set_requires_grad(true);
    for (auto& g : p->grad) g = rng.normal_f(0.0f, 0.01f);
  }
  double want_sumsq = 0.0;
  for (const auto& [name, p] : model.named_parameters())
    for (const float g : p->grad) want_sumsq += static_cast<double>(g) * g;
  const double want_norm = std::sqrt(want_sumsq);

  SECTION("norm below the cap is reported and left unchanged") {
    const auto grads_before = model.layers[0].wq->grad;
    const double got = condlm::clip_gradients(model, static_cast<float>(want_norm) + 1.0f);
    REQUIRE_THAT(got, Catch::Matchers::WithinRel(want_norm, 1e-12));
    REQUIRE(model.layers[0].wq->grad == grads_before);
  }
  SECTION("norm above the cap rescales to the cap") {
    const float cap = static_cast<float>(want_norm) / 2.0f;
    const double got = condlm::clip_gradients(model, cap);
    REQUIRE_THAT(got, Catch::Matchers::WithinRel(want_norm, 1e-12));
    double post_sumsq = 0.0;
    for (const auto& [name, p] : model.named_parameters())
      for (const float g : p->grad) post_sumsq += static_cast<double>(g) * g;
    REQUIRE_THAT(std::sqrt(post_sumsq),
                 Catch::Matchers::WithinRel(static_cast<double>(cap), 1e-6));
  }
}

TEST_CASE("weight decay without gradients is a pure decoupled shrink", "[training]") {
  const auto world = small_world();
  auto model = TransformerLM::init(small_model_config(world));
  TrainConfig cfg;
  cfg.weight_decay = 0.5f;
  auto state = condlm::OptimizerState::init(model, cfg);
  const float before = model.final_ln_scale->values[0];  // layer-norm scale inits to 1
  REQUIRE(before == 1.0f);
  condlm::adamw_step(model, state, 0.1f);
  REQUIRE_THAT(model.final_ln_scale->values[0],
               Catch::Matchers::WithinAbs(before * (1.0f - 0.1f * 0.5f), 1e-7));
  REQUIRE(state.t == 1);

  // State initialized for a different architecture is rejected by name.
  auto other_cfg = small_model_config(world);
  other_cfg.d_model = 16;
  other_cfg.d_ff = 32;
  auto other = TransformerLM::init(other_cfg);
  REQUIRE_THROWS_WITH(condlm::adamw_step(other, state, 0.1f),
                      Catch::Matchers::ContainsSubstring("mismatch"));
}

TEST_CASE("finetuning is deterministic and leaves the input model alone", "[training]") {
  const auto world = small_world();
  const auto model = TransformerLM::init(small_model_config(world));
  const auto corpus = condlm::generate_corpus(world, "alpha", 16, {16, 24}, 1.0, 3);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 5;

  const auto digest_in = condlm::parameters_digest(model);
  const auto r1 = condlm::finetune(model, corpus, cfg);
  const auto r2 = condlm::finetune(model, corpus, cfg);
  REQUIRE(condlm::parameters_digest(model) == digest_in);
  REQUIRE(condlm::parameters_digest(r1.model) == condlm::parameters_digest(r2.model));
  REQUIRE(condlm::parameters_digest(r1.model) != digest_in);

  // Byte-identical checkpoints from identical runs.
  const auto p1 = std::filesystem::temp_directory_path() / "condlm_train_a.bin";
  const auto p2 = std::filesystem::temp_directory_path() / "condlm_train_b.bin";
  condlm::save_checkpoint(r1.model, p1.string());
  condlm::save_checkpoint(r2.model, p2.string());
  REQUIRE(condlm::file_digest_hex(p1.string()) == condlm::file_digest_hex(p2.string()));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);

  // The recorded lr trace follows the schedule formula exactly.
  const int64_t total = static_cast<int64_t>(r1.trace.steps.size());
  REQUIRE(total == 2);  // 16 docs / batch 8, 1 epoch
  for (const auto& s : r1.trace.steps) REQUIRE(s.lr == condlm::lr_at(s.step, total, cfg));

  TrainConfig bad = cfg;
  bad.epochs = 0;
  REQUIRE_THROWS_WITH(condlm::finetune(model, corpus, bad),
                      Catch::Matchers::ContainsSubstring("epochs"));
}

TEST_CASE("the loop learns a learnable corpus", "[training]") {
  const auto world = small_world();
  const auto model = TransformerLM::init(small_model_config(world));
  const auto corpus = condlm::generate_corpus(world, "alpha", 64, {24, 40}, 2.0, 11);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr_peak = 3e-3f;
  cfg.seed = 6;
  const auto result = condlm::finetune(model, corpus, cfg);
  REQUIRE(result.trace.epoch_mean_loss.size() == 3);
  REQUIRE(result.trace.epoch_mean_loss.back() < result.trace.epoch_mean_loss.front());
  for (const auto& s : result.trace.steps) REQUIRE(std::isfinite(s.loss));
}

TEST_CASE("conditional and standard finetuning are bitwise equal at |c| = 0",
          "[training]") {
  const auto world = small_world();
  const auto model = TransformerLM::init(small_model_config(world));
  const auto corpus = condlm::generate_corpus(world, "beta", 16, {16, 24}, 1.0, 4);
  TrainConfig std_cfg;
  std_cfg.epochs = 1;
  std_cfg.batch_size = 8;
  std_cfg.seed = 12;
  TrainConfig cond_cfg = std_cfg;
  Context empty;
  empty.kind = ContextKind::Text;
  cond_cfg.objective = Objective::conditional(empty);

  const auto a = condlm::finetune(model, corpus, std_cfg);
  const auto b = condlm::finetune(model, corpus, cond_cfg);
  REQUIRE(condlm::parameters_digest(a.model) == condlm::parameters_digest(b.model));
  for (size_t i = 0; i < a.trace.steps.size(); ++i)
    REQUIRE(a.trace.steps[i].loss == b.trace.steps[i].loss);
}

TEST_CASE("pretraining beats a fresh model on held-out text", "[training][slow]") {
  const auto world = small_world();
  const auto mc = small_model_config(world);
  const auto train = condlm::generate_general_corpus(world, 400, 13, "train", {24, 40}, 2.0);
  std::unordered_set<uint64_t> taken;
  for (const auto& d : train.docs) taken.insert(condlm::document_hash(d));
  const auto heldout =
      condlm::generate_general_corpus(world, 60, 14, "heldout", {24, 40}, 2.0, &taken);

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.lr_peak = 3e-3f;
  cfg.seed = 15;
  const auto result = condlm::pretrain(mc, train, cfg);

  const auto fresh = TransformerLM::init(mc);
  auto mean_nll = [&](const TransformerLM& m) {
    double total = 0.0;
    int64_t count = 0;
    for (const auto& doc : heldout.docs) {
      total -= condlm::sequence_logprob(m, doc.tokens, 1).conditional_sum;
      count += static_cast<int64_t>(doc.tokens.size()) - 1;
    }
    return total / static_cast<double>(count);
  };
  REQUIRE(mean_nll(result.model) < mean_nll(fresh));

  // Balanced mixture leaves the topic slot balanced: probabilities of the
  // two topics after "the text is about" stay within 0.2 of each other.
  const auto& v = world.vocab;
  const std::vector<int> prompt = {v.bos_id, v.id("the"), v.id("text"), v.id("is"),
                                   v.id("about")};
  condlm::Tape tape(false);
  const auto logits = condlm::forward(result.model, tape, prompt);
  const std::span<const float> last_row(
      logits->values.data() +
          static_cast<size_t>(logits->rows() - 1) * static_cast<size_t>(logits->cols()),
      static_cast<size_t>(logits->cols()));
  const auto lp = condlm::log_softmax_f64(last_row);
  const double pa = std::exp(lp[static_cast<size_t>(world.domain("alpha").topic_tokens[0])]);
  const double pb = std::exp(lp[static_cast<size_t>(world.domain("beta").topic_tokens[0])]);
  REQUIRE(std::abs(pa - pb) < 0.2);
  REQUIRE(pa + pb > 0.5);  // the slot is dominated by topic markers
}

TEST_CASE("traces serialize as one JSON object per line", "[training]") {
  condlm::TrainTrace trace;
  trace.steps.push_back({1, 0.1f, 2.5, 0.9});
  trace.epoch_mean_loss.push_back(2.5);
  const auto path = std::filesystem::temp_directory_path() / "condlm_trace.jsonl";
  condlm::save_trace(trace, path.string());
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line))
    if (!line.empty()) {
      REQUIRE_NOTHROW(nlohmann::json::parse(line));
      ++lines;
    }
  REQUIRE(lines == 2);
  std::filesystem::remove(path);
}
