// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration. One ExperimentConfig describes a synthetic world,
// a model, training budgets, and a list of finetuning variants that differ
// only in their conditioning policy. run_transfer sweeps each variant over a
// grid of epoch budgets from one shared pretrained checkpoint; run_continual
// trains each variant through an ordered sequence of domain episodes. Both
// append metric records and checkpoint paths to a RunRecord, and emit_report
// turns a record into fixed-name CSV files plus a plain-text summary of the
// directional checks.
//
// Everything downstream of the master seed is deterministic: per-purpose
// seeds are derived by name, CSV floats are printed with a fixed format, and
// row order is fixed, so rerunning a config with the same master seed must
// reproduce every CSV byte for byte. Wall-clock timings exist only in the
// RunRecord, never in a CSV.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "condlm/context.h"
#include "condlm/corpus.h"
#include "condlm/model.h"
#include "condlm/training.h"

namespace condlm {

// ---------------------------------------------------------------------------
// Configuration

// How a finetuning variant builds its training objective. Standard supervises
// documents as-is; the other three prepend a context whose loss is masked.
enum class ContextPolicy {
  Standard,  // no context
  Hint,      // text hint naming the domain's topic
  Random,    // fixed random token string
  Learned,   // soft prefix fit by prompt tuning before finetuning
};

ContextPolicy context_policy_from_string(std::string_view s);
std::string to_string(ContextPolicy policy);

// One finetuning arm of the experiment. In a transfer run the variant is
// trained from the pretrained checkpoint once per entry in `epochs`; in a
// continual run every episode trains for the run's per-episode budget and
// `epochs` is ignored.
struct VariantSpec {
  std::string name;
  ContextPolicy policy = ContextPolicy::Standard;
  std::vector<int> epochs;
};

// Corpus sizes and shapes. The general corpus pretrains the model and its
// held-out split measures what finetuning costs; domain corpora carry the
// planted facts that finetuning is supposed to teach.
// Pretraining lengths deliberately exceed the domain lengths: conditional
// finetuning shifts document bodies right by the context length, and every
// position a profile or a conditional score can touch must have been trained
// at least once during pretraining.
struct CorpusParams {
  int pretrain_docs = 800;
  std::pair<int, int> pretrain_len_range{24, 64};
  double background_fact_density = 2.0;
  int heldout_docs = 64;
  int domain_docs = 128;
  std::pair<int, int> domain_len_range{32, 56};
  double fact_density = 24.0;
  int domain_eval_docs = 24;
  double eval_fact_density = 3.0;
};

// Optimizer budgets shared by every variant. Finetunes restart the learning
// rate schedule from scratch (fresh warmup and decay) per run and, in the
// continual setting, per episode.
struct TrainParams {
  int epochs = 10;
  float lr_peak = 3e-3f;
  int batch_size = 16;
  float warmup_fraction = 0.1f;
  float grad_clip_norm = 1.0f;
  float weight_decay = 0.01f;

  TrainConfig to_train_config(Objective objective, uint64_t seed) const;
};

// Knobs for the measurement pass.
struct MetricParams {
  int n_probes_per_domain = 12;
  int profile_max_pos = 56;
  // Epoch budget at which probe, position-loss, and token-KL comparisons are
  // reported. Must appear in every variant's epochs list of a transfer run.
  int analysis_epochs = 3;
  int context_effect_docs = 24;
  int pairwise_kl_samples = 16;
  int pairwise_kl_sample_len = 24;
  int random_context_len = 6;
  int soft_context_vectors = 10;
  int soft_context_epochs = 3;
  float soft_context_lr = 1e-1f;
};

struct ExperimentConfig {
  uint64_t master_seed = 1;
  WorldParams world;
  ModelConfig model;
  CorpusParams corpus;
  TrainParams pretrain;
  TrainParams finetune;
  std::vector<VariantSpec> variants;
  std::string transfer_domain;           // domain trained on in a transfer run
  std::vector<std::string> continual_domains;  // episode order for continual
  MetricParams metrics;
  std::string run_dir = "run";

  // Rejects duplicate variant names, unknown context policies, nonpositive
  // budgets, domain names outside the world, and an analysis epoch budget
  // missing from some variant's epochs list.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
void save_experiment_config(const ExperimentConfig& config, const std::string& path);
ExperimentConfig load_experiment_config(const std::string& path);

// The world every run of this config sees, generated from a seed derived
// from the master seed. Exposed so callers can resolve domain names before
// running anything.
WorldSpec make_world(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Run record

// Everything a run claims to have produced: the fully resolved config
// snapshot, metric records, checkpoint paths keyed by stage, and wall-clock
// seconds per stage. Records from a transfer run and a continual run over the
// same config can be merged so one report covers both.
struct RunRecord {
  nlohmann::json config;                        // resolved snapshot
  nlohmann::json records = nlohmann::json::array();
  std::map<std::string, std::string> checkpoints;  // stage key -> file path
  std::map<std::string, double> timings_s;

  void add_record(nlohmann::json record);
  // First record matching all given fields, or nullptr. `where` matches
  // against the record's top level and its "params" object.
  const nlohmann::json* find(std::string_view metric, const nlohmann::json& where) const;

  void merge_from(const RunRecord& other);
  void save(const std::string& path) const;
  static RunRecord load(const std::string& path);
};

// Stage keys used in RunRecord::checkpoints, e.g. "pretrained",
// transfer_stage("hint", 3) == "transfer.hint.epochs3",
// continual_stage("standard", 2) == "continual.standard.episode2".
std::string transfer_stage(std::string_view variant, int epochs);
std::string continual_stage(std::string_view variant, int episode);

// ---------------------------------------------------------------------------
// Runs

// Observer for coarse progress events ({"event", "stage", ...} objects).
// Wall-clock durations appear here and in RunRecord::timings_s only.
using EventSink = std::function<void(const nlohmann::json&)>;

// Pretrains once, then finetunes every variant at every epoch budget from the
// pretrained checkpoint, measuring fact recall, held-out perplexity, the
// topic probe, position-loss profiles, drift KL against the pretrained model,
// objective gradient norms at the pretrained point, and the context effect of
// each conditional variant's most-trained model. Writes checkpoints under
// <run_dir>/checkpoints, the record to <run_dir>/transfer.runrecord.json, and
// the QA-vs-perplexity tradeoff CSV to <run_dir>/fig5_tradeoff.csv.
RunRecord run_transfer(const ExperimentConfig& config, const EventSink& events = {});

// Pretrains once, then trains each variant through the continual_domains
// sequence, each episode starting from the previous episode's weights with a
// fresh learning-rate schedule. After every episode all tasks are re-tested,
// filling one accuracy-matrix row; forgetting and cumulative-accuracy
// summaries, final general perplexity, and the pairwise context KL of each
// conditional policy's contexts (under the pretrained model) are recorded.
// The learned policy fits a fresh soft context per episode on the weights
// entering that episode, asserting the model stayed frozen while fitting.
// Writes the record to <run_dir>/continual.runrecord.json.
RunRecord run_continual(const ExperimentConfig& config, const EventSink& events = {});

// ---------------------------------------------------------------------------
// Report

struct ReportStatus {
  bool complete = false;                // every file had its data
  std::vector<std::string> absent;      // names of missing metrics/files
  std::vector<std::pair<std::string, bool>> checks;  // directional check -> pass
};

// Writes the eight fixed-name CSVs (fig2_topic_prior, fig3_position_loss,
// fig4_context_effect, fig5_tradeoff, fig6_forgetting, table1_gradnorm,
// table2_kl, table3_continual) plus summary.txt into out_dir. Metrics the
// record lacks are listed as ABSENT in the summary and make the status
// incomplete. Every PASS/FAIL line in the summary is recomputable from the
// CSV files alone.
ReportStatus emit_report(const RunRecord& run, const std::string& out_dir);

// Fixed float format shared by every CSV cell ("%.10g").
std::string csv_number(double v);

}  // namespace condlm
