// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic worlds with known statistics. A world fixes a closed vocabulary
// partitioned into roles, a set of named domains with disjoint topic markers
// and disjoint entity pools, planted (subject, relation, object) facts that
// are functionally consistent within each domain, and a mixture for sampling
// a general corpus whose facts come only from a shared background pool. That
// separation is what downstream measurements rely on: topic-prior shifts and
// fact knowledge stay independently attributable because finetuning-domain
// facts never occur in the general corpus while every domain's topic markers
// do, at the mixture's prior.
//
// Document layout is part of the contract, because evaluation re-derives
// expected token statistics from the spec fields alone:
//   [BOS] + one opening sampled from the domain's opening patterns + a
//   seeded shuffle of fact sentences and filler tokens filling the document
//   to its sampled length.
// Fact sentences are rendered through the fixed surface templates below, and
// each (fact, template) pair is rendered the same number of times corpus-wide:
// the smallest per-pair count that gives every fact at least fact_density
// appearances. Filler tokens are drawn from the domain's unigram weights.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace condlm {

// A planted (subject, relation, object) triple, all token ids. Within one
// domain the object is unique given (subject, relation).
struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;
  bool operator==(const Fact&) const = default;
};

// Closed vocabulary with dense ids 0..size-1 and a role partition. Every id
// belongs to exactly one role list.
struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> ids;

  int bos_id = 0;
  int pad_id = 1;
  std::vector<int> special_ids;   // BOS, PAD
  std::vector<int> hint_ids;      // the, of, is, about, text, following
  std::vector<int> topic_ids;     // all domains' topic markers
  std::vector<int> entity_ids;    // all entity pools, domain and background
  std::vector<int> relation_ids;
  std::vector<int> filler_ids;
  std::vector<int> uuid_ids;      // alphabet for opaque random contexts

  int size() const { return static_cast<int>(tokens.size()); }
  // Id of a known token string. Throws if the word is not in the vocabulary.
  int id(std::string_view word) const;
  const std::string& token(int id) const;
};

// One way a document may open. Patterns surface the domain's topic markers in
// the first few positions, which is what makes early positions predictable
// from the topic alone.
struct OpeningPattern {
  std::vector<int> tokens;
  double weight = 0.0;
};

struct DomainSpec {
  std::string name;
  std::vector<int> topic_tokens;    // this domain's markers, disjoint across domains
  std::vector<int> entity_pool;     // subjects and objects of this domain's facts
  std::vector<Fact> facts;          // unique object per (subject, relation)
  std::vector<double> filler_weights;  // unigram weights aligned with vocab.filler_ids
  std::vector<OpeningPattern> openings;  // weights sum to 1
};

struct WorldSpec {
  uint64_t seed = 0;
  Vocab vocab;
  std::vector<DomainSpec> domains;
  std::vector<double> general_mixture;  // per-domain weights, sum 1
  std::vector<int> background_entity_pool;
  std::vector<Fact> background_facts;   // the only facts in the general corpus

  const DomainSpec& domain(std::string_view name) const;
  int domain_index(std::string_view name) const;
};

// Role sizes for world generation. Defaults give a vocabulary of ~200 tokens
// with four domains.
struct WorldParams {
  int n_domains = 4;
  int n_facts_per_domain = 12;
  int n_entities_per_domain = 16;
  int n_relations = 8;
  int n_filler_words = 96;
  int n_uuid_tokens = 16;
  int n_background_facts = 12;
  int n_background_entities = 16;
};

struct Document {
  std::string domain;
  std::vector<int> tokens;  // BOS-prefixed
};

struct Corpus {
  std::vector<Document> docs;
  std::string split;  // "train" or "heldout"
};

// A 4-way cloze probe: the prompt ends right before the object slot, the
// answer is the planted object, the distractors are other entities from the
// same domain pool.
struct FactProbe {
  std::vector<int> prompt;
  int answer = 0;
  std::vector<int> distractors;  // exactly 3, all != answer
  std::string domain;
};

// Fixed fact surface templates. Index 0: "subject relation object".
// Index 1: "the relation of subject is object". The second template's prefix
// doubles as the probe prompt.
inline constexpr int kNumFactTemplates = 2;
std::vector<int> render_fact(const Vocab& vocab, const Fact& fact, int template_index);
// Scoring prompt for a fact: BOS then the template-1 rendering without the
// object, "the relation of subject is".
std::vector<int> probe_prompt(const Vocab& vocab, const Fact& fact);

WorldSpec generate_world(uint64_t seed, const WorldParams& params = {});

// Domain corpus with planted facts at the given expected per-fact appearance
// count. Document lengths (including BOS) are uniform over the inclusive
// range. Throws if the domain is unknown or a document cannot fit its opening
// plus its share of fact sentences.
Corpus generate_corpus(const WorldSpec& world, std::string_view domain_name, int n_docs,
                       std::pair<int, int> doc_len_range, double fact_density,
                       uint64_t seed);

// Mixture corpus in the domains' styles, with fact sentences drawn only from
// the background pool. `avoid` filters out documents whose token hash is
// already taken, which keeps a held-out split disjoint from a train split at
// the document level.
Corpus generate_general_corpus(const WorldSpec& world, int n_docs, uint64_t seed,
                               std::string_view split = "train",
                               std::pair<int, int> doc_len_range = {40, 72},
                               double background_fact_density = 3.0,
                               const std::unordered_set<uint64_t>* avoid = nullptr);

// Stable content hash of a document's token sequence.
uint64_t document_hash(const Document& doc);

// n probes over n distinct facts of the domain. Throws if the domain has
// fewer than n facts or fewer than 4 entities in its pool.
std::vector<FactProbe> make_fact_probes(const WorldSpec& world, std::string_view domain_name,
                                        int n, uint64_t seed);

// Whitespace tokenization over the closed vocabulary. Throws naming the first
// out-of-vocabulary word.
std::vector<int> tokenize(const Vocab& vocab, std::string_view text);
std::string detokenize(const Vocab& vocab, std::span<const int> ids);

nlohmann::json world_to_json(const WorldSpec& world);
WorldSpec world_from_json(const nlohmann::json& j);
void save_world(const WorldSpec& world, const std::string& path);
WorldSpec load_world(const std::string& path);

// One space-separated id sequence per line, plus a "<path>.meta.json" sidecar
// carrying the split tag and per-line domain names.
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

// JSON lines: {"prompt": [...], "answer": id, "distractors": [...], "domain": name}.
void save_probes(const std::vector<FactProbe>& probes, const std::string& path);
std::vector<FactProbe> load_probes(const std::string& path);

}  // namespace condlm
