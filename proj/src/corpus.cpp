// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "condlm/rng.h"

namespace condlm {
namespace {

// Domain names, in generation order. Worlds larger than this list would need
// synthesized names, which nothing at this scale asks for.
const char* kDomainNames[] = {"alpha", "beta",  "gamma", "delta", "epsilon", "zeta",
                              "eta",   "theta", "iota",  "kappa", "lambda",  "mu"};
constexpr int kMaxDomains = static_cast<int>(sizeof(kDomainNames) / sizeof(kDomainNames[0]));

const char* kHintWords[] = {"the", "of", "is", "about", "text", "following"};

uint64_t fnv1a_ids(std::span<const int> ids) {
  uint64_t h = 1469598103934665603ull;
  for (const int id : ids) {
    uint32_t u = static_cast<uint32_t>(id);
    for (int b = 0; b < 4; ++b) {
      h ^= (u >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  return h;
}

int add_token(Vocab& vocab, std::string name) {
  const int id = vocab.size();
  if (!vocab.ids.emplace(name, id).second)
    throw std::logic_error("duplicate token '" + name + "' while building vocabulary");
  vocab.tokens.push_back(std::move(name));
  return id;
}

void check_positive(int value, const char* field) {
  if (value <= 0)
    throw std::invalid_argument(std::string(field) + " must be positive, got " +
                                std::to_string(value));
}

// Opening patterns for one domain, built from its topic markers alone. A
// large share of documents has no opening at all: their domain shows only
// through the filler distribution and the planted facts, which is what makes
// an explicit context informative rather than redundant with the document's
// own first tokens.
std::vector<OpeningPattern> make_openings(const DomainSpec& domain) {
  const int t0 = domain.topic_tokens[0];
  const int t1 = domain.topic_tokens[1];
  return {
      {{}, 0.40},
      {{t0}, 0.25},
      {{t0, t1}, 0.20},
      {{t1}, 0.15},
  };
}

// Share of general-corpus documents that carry a meta-text announcement of
// their domain before the document proper, the way web text wraps content in
// headers. Domain corpora never carry one, so a prepended hint context reads
// exactly like this pretraining shape instead of like a malformed document.
constexpr double kAnnounceRate = 0.35;

std::vector<int> make_announcement(const Vocab& vocab, const DomainSpec& domain, Rng& rng) {
  const int t0 = domain.topic_tokens[0];
  if (rng.uniform() < 0.5)
    return {vocab.id("following"), vocab.id("is"), vocab.id("text"), vocab.id("about"), t0};
  return {vocab.id("the"), vocab.id("text"), vocab.id("is"), vocab.id("about"), t0};
}

// One document body: the opening, then a seeded shuffle of the assigned fact
// sentences and enough filler tokens to reach the exact length.
Document make_document(const Vocab& vocab, const DomainSpec& domain, int length,
                       const std::vector<std::vector<int>>& sentences, Rng& rng) {
  std::vector<double> opening_weights;
  opening_weights.reserve(domain.openings.size());
  for (const auto& o : domain.openings) opening_weights.push_back(o.weight);
  const auto& opening = domain.openings[rng.categorical(opening_weights)].tokens;

  int sentence_tokens = 0;
  for (const auto& s : sentences) sentence_tokens += static_cast<int>(s.size());
  const int filler_n =
      length - 1 - static_cast<int>(opening.size()) - sentence_tokens;
  if (filler_n < 0)
    throw std::invalid_argument(
        "document of length " + std::to_string(length) + " cannot fit an opening of " +
        std::to_string(opening.size()) + " tokens plus " + std::to_string(sentence_tokens) +
        " fact-sentence tokens; widen doc_len_range or lower fact_density");

  std::vector<std::vector<int>> units = sentences;
  units.reserve(units.size() + static_cast<size_t>(filler_n));
  for (int i = 0; i < filler_n; ++i) {
    const size_t pick = rng.categorical(domain.filler_weights);
    units.push_back({vocab.filler_ids[pick]});
  }
  rng.shuffle(units);

  Document doc;
  doc.domain = domain.name;
  doc.tokens.reserve(static_cast<size_t>(length));
  doc.tokens.push_back(vocab.bos_id);
  doc.tokens.insert(doc.tokens.end(), opening.begin(), opening.end());
  for (const auto& u : units) doc.tokens.insert(doc.tokens.end(), u.begin(), u.end());
  return doc;
}

// Renders every (fact, template) pair the same number of times: the smallest
// per-pair count giving each fact at least `density` appearances in total.
std::vector<std::vector<int>> render_fact_sentences(const Vocab& vocab,
                                                    const std::vector<Fact>& facts,
                                                    double density, Rng& rng) {
  std::vector<std::vector<int>> sentences;
  if (facts.empty() || density <= 0.0) return sentences;
  const int cycles =
      static_cast<int>(std::ceil(density / static_cast<double>(kNumFactTemplates)));
  sentences.reserve(static_cast<size_t>(cycles) * facts.size() * kNumFactTemplates);
  for (int c = 0; c < cycles; ++c)
    for (const auto& fact : facts)
      for (int t = 0; t < kNumFactTemplates; ++t)
        sentences.push_back(render_fact(vocab, fact, t));
  rng.shuffle(sentences);
  return sentences;
}

// Deals sentences round-robin to documents in a shuffled document order, so
// per-document counts differ by at most one.
std::vector<std::vector<std::vector<int>>> deal_sentences(
    std::vector<std::vector<int>> sentences, int n_docs, Rng& rng) {
  std::vector<int> order(static_cast<size_t>(n_docs));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<std::vector<int>>> per_doc(static_cast<size_t>(n_docs));
  for (size_t i = 0; i < sentences.size(); ++i)
    per_doc[static_cast<size_t>(order[i % order.size()])].push_back(
        std::move(sentences[i]));
  return per_doc;
}

int sample_length(std::pair<int, int> range, Rng& rng) {
  if (range.first < 2 || range.second < range.first)
    throw std::invalid_argument("doc_len_range [" + std::to_string(range.first) + ", " +
                                std::to_string(range.second) +
                                "] must satisfy 2 <= lo <= hi");
  return range.first + static_cast<int>(rng.uniform_int(range.second - range.first + 1));
}

nlohmann::json fact_to_json(const Fact& f) {
  return nlohmann::json::array({f.subject, f.relation, f.object});
}

Fact fact_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3)
    throw std::invalid_argument("fact must be a [subject, relation, object] triple");
  return Fact{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

void check_mixture(const std::vector<double>& mixture, size_t n_domains) {
  if (mixture.size() != n_domains)
    throw std::invalid_argument("general_mixture has " + std::to_string(mixture.size()) +
                                " weights for " + std::to_string(n_domains) + " domains");
  double sum = 0.0;
  for (const double w : mixture) {
    if (!(w >= 0.0)) throw std::invalid_argument("general_mixture weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("general_mixture weights sum to " + std::to_string(sum) +
                                ", expected 1");
}

}  // namespace

int Vocab::id(std::string_view word) const {
  const auto it = ids.find(std::string(word));
  if (it == ids.end())
    throw std::invalid_argument("unknown token '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("token id " + std::to_string(id) +
                                " out of range for vocabulary of " + std::to_string(size()));
  return tokens[static_cast<size_t>(id)];
}

const DomainSpec& WorldSpec::domain(std::string_view name) const {
  return domains[static_cast<size_t>(domain_index(name))];
}

int WorldSpec::domain_index(std::string_view name) const {
  for (size_t i = 0; i < domains.size(); ++i)
    if (domains[i].name == name) return static_cast<int>(i);
  throw std::invalid_argument("unknown domain '" + std::string(name) + "'");
}

std::vector<int> render_fact(const Vocab& vocab, const Fact& fact, int template_index) {
  switch (template_index) {
    case 0:
      return {fact.subject, fact.relation, fact.object};
    case 1:
      return {vocab.id("the"), fact.relation, vocab.id("of"),
              fact.subject,    vocab.id("is"), fact.object};
    default:
      throw std::invalid_argument("fact template index " + std::to_string(template_index) +
                                  " out of range, have " + std::to_string(kNumFactTemplates));
  }
}

std::vector<int> probe_prompt(const Vocab& vocab, const Fact& fact) {
  auto tokens = render_fact(vocab, fact, 1);
  tokens.pop_back();
  tokens.insert(tokens.begin(), vocab.bos_id);
  return tokens;
}

WorldSpec generate_world(uint64_t seed, const WorldParams& params) {
  if (params.n_domains < 2 || params.n_domains > kMaxDomains)
    throw std::invalid_argument("n_domains must be in [2, " + std::to_string(kMaxDomains) +
                                "], got " + std::to_string(params.n_domains));
  check_positive(params.n_facts_per_domain, "n_facts_per_domain");
  check_positive(params.n_relations, "n_relations");
  check_positive(params.n_filler_words, "n_filler_words");
  check_positive(params.n_uuid_tokens, "n_uuid_tokens");
  check_positive(params.n_background_entities, "n_background_entities");
  if (params.n_entities_per_domain < 4)
    throw std::invalid_argument("n_entities_per_domain must be at least 4 (probes need 3 "
                                "distractors), got " +
                                std::to_string(params.n_entities_per_domain));
  if (params.n_facts_per_domain > params.n_entities_per_domain * params.n_relations)
    throw std::invalid_argument(
        "cannot plant " + std::to_string(params.n_facts_per_domain) + " facts with only " +
        std::to_string(params.n_entities_per_domain * params.n_relations) +
        " distinct (subject, relation) pairs per domain");
  if (params.n_background_facts > params.n_background_entities * params.n_relations)
    throw std::invalid_argument(
        "cannot plant " + std::to_string(params.n_background_facts) +
        " background facts with only " +
        std::to_string(params.n_background_entities * params.n_relations) +
        " distinct (subject, relation) pairs");

  WorldSpec world;
  world.seed = seed;
  Vocab& vocab = world.vocab;

  vocab.bos_id = add_token(vocab, "<bos>");
  vocab.pad_id = add_token(vocab, "<pad>");
  vocab.special_ids = {vocab.bos_id, vocab.pad_id};
  for (const char* w : kHintWords) vocab.hint_ids.push_back(add_token(vocab, w));

  world.domains.resize(static_cast<size_t>(params.n_domains));
  for (int d = 0; d < params.n_domains; ++d) {
    DomainSpec& dom = world.domains[static_cast<size_t>(d)];
    dom.name = kDomainNames[d];
    dom.topic_tokens = {add_token(vocab, dom.name), add_token(vocab, dom.name + "_lore")};
    vocab.topic_ids.insert(vocab.topic_ids.end(), dom.topic_tokens.begin(),
                           dom.topic_tokens.end());
  }
  for (int d = 0; d < params.n_domains; ++d) {
    DomainSpec& dom = world.domains[static_cast<size_t>(d)];
    for (int e = 0; e < params.n_entities_per_domain; ++e) {
      const int id = add_token(vocab, dom.name + "_e" + std::to_string(e));
      dom.entity_pool.push_back(id);
      vocab.entity_ids.push_back(id);
    }
  }
  for (int e = 0; e < params.n_background_entities; ++e) {
    const int id = add_token(vocab, "bg_e" + std::to_string(e));
    world.background_entity_pool.push_back(id);
    vocab.entity_ids.push_back(id);
  }
  for (int r = 0; r < params.n_relations; ++r)
    vocab.relation_ids.push_back(add_token(vocab, "rel" + std::to_string(r)));
  for (int f = 0; f < params.n_filler_words; ++f)
    vocab.filler_ids.push_back(add_token(vocab, "w" + std::to_string(f)));
  for (int u = 0; u < params.n_uuid_tokens; ++u)
    vocab.uuid_ids.push_back(add_token(vocab, "x" + std::to_string(u)));

  // Facts: distinct (subject, relation) pairs per pool, each with a random
  // object from the same pool, which keeps the object unique given the pair.
  auto plant_facts = [&](const std::vector<int>& pool, int n_facts,
                         std::string_view stream) {
    Rng rng(derive_seed(seed, std::string("facts.") + std::string(stream)));
    std::vector<std::pair<int, int>> pairs;
    for (const int s : pool)
      for (const int r : vocab.relation_ids) pairs.emplace_back(s, r);
    rng.shuffle(pairs);
    std::vector<Fact> facts;
    facts.reserve(static_cast<size_t>(n_facts));
    for (int i = 0; i < n_facts; ++i) {
      const auto& [s, r] = pairs[static_cast<size_t>(i)];
      const int o = pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
      facts.push_back(Fact{s, r, o});
    }
    return facts;
  };
  for (auto& dom : world.domains)
    dom.facts = plant_facts(dom.entity_pool, params.n_facts_per_domain, dom.name);
  world.background_facts =
      plant_facts(world.background_entity_pool, params.n_background_facts, "background");

  // Filler style: a shared harmonic profile rotated per domain, so domains
  // are statistically distinct but share support.
  for (int d = 0; d < params.n_domains; ++d) {
    DomainSpec& dom = world.domains[static_cast<size_t>(d)];
    const int k = params.n_filler_words;
    const int rot = d * k / params.n_domains;
    dom.filler_weights.resize(static_cast<size_t>(k));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      dom.filler_weights[static_cast<size_t>(j)] = 1.0 / (1.0 + (j + rot) % k);
      sum += dom.filler_weights[static_cast<size_t>(j)];
    }
    for (auto& w : dom.filler_weights) w /= sum;
    dom.openings = make_openings(dom);
  }

  world.general_mixture.assign(static_cast<size_t>(params.n_domains),
                               1.0 / params.n_domains);
  return world;
}

Corpus generate_corpus(const WorldSpec& world, std::string_view domain_name, int n_docs,
                       std::pair<int, int> doc_len_range, double fact_density,
                       uint64_t seed) {
  check_positive(n_docs, "n_docs");
  if (fact_density < 0.0)
    throw std::invalid_argument("fact_density must be nonnegative, got " +
                                std::to_string(fact_density));
  const DomainSpec& domain = world.domain(domain_name);

  Rng structure(derive_seed(seed, "structure"));
  auto sentences =
      render_fact_sentences(world.vocab, domain.facts, fact_density, structure);
  auto per_doc = deal_sentences(std::move(sentences), n_docs, structure);

  Corpus corpus;
  corpus.split = "train";
  corpus.docs.reserve(static_cast<size_t>(n_docs));
  for (int i = 0; i < n_docs; ++i) {
    Rng rng(derive_seed(seed, "doc" + std::to_string(i)));
    const int length = sample_length(doc_len_range, rng);
    corpus.docs.push_back(make_document(world.vocab, domain, length,
                                        per_doc[static_cast<size_t>(i)], rng));
  }
  return corpus;
}

Corpus generate_general_corpus(const WorldSpec& world, int n_docs, uint64_t seed,
                               std::string_view split, std::pair<int, int> doc_len_range,
                               double background_fact_density,
                               const std::unordered_set<uint64_t>* avoid) {
  check_positive(n_docs, "n_docs");
  check_mixture(world.general_mixture, world.domains.size());

  Rng structure(derive_seed(seed, "structure"));
  auto sentences = render_fact_sentences(world.vocab, world.background_facts,
                                         background_fact_density, structure);
  auto per_doc = deal_sentences(std::move(sentences), n_docs, structure);

  Corpus corpus;
  corpus.split = std::string(split);
  corpus.docs.reserve(static_cast<size_t>(n_docs));
  for (int i = 0; i < n_docs; ++i) {
    const auto& domain =
        world.domains[structure.categorical(world.general_mixture)];
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw std::runtime_error("could not produce a document distinct from the avoid "
                                 "set after 100 attempts (document " +
                                 std::to_string(i) + ")");
      Rng rng(derive_seed(seed, "doc" + std::to_string(i) + "." + std::to_string(attempt)));
      const int length = sample_length(doc_len_range, rng);
      std::vector<int> announce;
      if (rng.uniform() < kAnnounceRate)
        announce = make_announcement(world.vocab, domain, rng);
      Document doc = make_document(world.vocab, domain,
                                   length - static_cast<int>(announce.size()),
                                   per_doc[static_cast<size_t>(i)], rng);
      doc.tokens.insert(doc.tokens.begin() + 1, announce.begin(), announce.end());
      if (avoid && avoid->count(document_hash(doc)) > 0) continue;
      corpus.docs.push_back(std::move(doc));
      break;
    }
  }
  return corpus;
}

uint64_t document_hash(const Document& doc) { return fnv1a_ids(doc.tokens); }

std::vector<FactProbe> make_fact_probes(const WorldSpec& world, std::string_view domain_name,
                                        int n, uint64_t seed) {
  check_positive(n, "n");
  const DomainSpec& domain = world.domain(domain_name);
  if (static_cast<size_t>(n) > domain.facts.size())
    throw std::invalid_argument("requested " + std::to_string(n) + " probes but domain '" +
                                domain.name + "' has only " +
                                std::to_string(domain.facts.size()) + " facts");
  if (domain.entity_pool.size() < 4)
    throw std::invalid_argument("domain '" + domain.name + "' has only " +
                                std::to_string(domain.entity_pool.size()) +
                                " entities, need at least 4 for distractors");

  Rng rng(derive_seed(seed, "probes." + domain.name));
  std::vector<int> order(domain.facts.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<FactProbe> probes;
  probes.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Fact& fact = domain.facts[static_cast<size_t>(order[static_cast<size_t>(i)])];
    FactProbe probe;
    probe.domain = domain.name;
    probe.prompt = probe_prompt(world.vocab, fact);
    probe.answer = fact.object;
    std::vector<int> pool;
    for (const int e : domain.entity_pool)
      if (e != fact.object) pool.push_back(e);
    rng.shuffle(pool);
    probe.distractors.assign(pool.begin(), pool.begin() + 3);
    probes.push_back(std::move(probe));
  }
  return probes;
}

std::vector<int> tokenize(const Vocab& vocab, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<int> out;
  std::string word;
  while (in >> word) out.push_back(vocab.id(word));
  return out;
}

std::string detokenize(const Vocab& vocab, std::span<const int> ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

nlohmann::json world_to_json(const WorldSpec& world) {
  nlohmann::json j;
  j["seed"] = world.seed;
  j["vocab"] = {{"tokens", world.vocab.tokens},
                {"roles",
                 {{"special", world.vocab.special_ids},
                  {"hint", world.vocab.hint_ids},
                  {"topic", world.vocab.topic_ids},
                  {"entity", world.vocab.entity_ids},
                  {"relation", world.vocab.relation_ids},
                  {"filler", world.vocab.filler_ids},
                  {"uuid", world.vocab.uuid_ids}}}};
  j["domains"] = nlohmann::json::array();
  for (const auto& d : world.domains) {
    nlohmann::json dj;
    dj["name"] = d.name;
    dj["topic_tokens"] = d.topic_tokens;
    dj["entity_pool"] = d.entity_pool;
    dj["filler_weights"] = d.filler_weights;
    dj["openings"] = nlohmann::json::array();
    for (const auto& o : d.openings)
      dj["openings"].push_back({{"tokens", o.tokens}, {"weight", o.weight}});
    dj["facts"] = nlohmann::json::array();
    for (const auto& f : d.facts) dj["facts"].push_back(fact_to_json(f));
    j["domains"].push_back(std::move(dj));
  }
  j["general_mixture"] = world.general_mixture;
  j["background_entity_pool"] = world.background_entity_pool;
  j["background_facts"] = nlohmann::json::array();
  for (const auto& f : world.background_facts)
    j["background_facts"].push_back(fact_to_json(f));
  return j;
}

WorldSpec world_from_json(const nlohmann::json& j) {
  WorldSpec world;
  world.seed = j.at("seed").get<uint64_t>();
  Vocab& vocab = world.vocab;
  vocab.tokens = j.at("vocab").at("tokens").get<std::vector<std::string>>();
  for (size_t i = 0; i < vocab.tokens.size(); ++i) {
    if (!vocab.ids.emplace(vocab.tokens[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate token '" + vocab.tokens[i] + "' in vocabulary");
  }
  const auto& roles = j.at("vocab").at("roles");
  vocab.special_ids = roles.at("special").get<std::vector<int>>();
  vocab.hint_ids = roles.at("hint").get<std::vector<int>>();
  vocab.topic_ids = roles.at("topic").get<std::vector<int>>();
  vocab.entity_ids = roles.at("entity").get<std::vector<int>>();
  vocab.relation_ids = roles.at("relation").get<std::vector<int>>();
  vocab.filler_ids = roles.at("filler").get<std::vector<int>>();
  vocab.uuid_ids = roles.at("uuid").get<std::vector<int>>();
  if (vocab.special_ids.size() != 2)
    throw std::invalid_argument("vocabulary must have exactly BOS and PAD specials");
  vocab.bos_id = vocab.special_ids[0];
  vocab.pad_id = vocab.special_ids[1];

  std::vector<int> seen(vocab.tokens.size(), 0);
  for (const auto* role : {&vocab.special_ids, &vocab.hint_ids, &vocab.topic_ids,
                           &vocab.entity_ids, &vocab.relation_ids, &vocab.filler_ids,
                           &vocab.uuid_ids})
    for (const int id : *role) {
      if (id < 0 || id >= vocab.size())
        throw std::invalid_argument("role id " + std::to_string(id) + " out of range");
      seen[static_cast<size_t>(id)]++;
    }
  for (size_t i = 0; i < seen.size(); ++i)
    if (seen[i] != 1)
      throw std::invalid_argument("token id " + std::to_string(i) + " appears in " +
                                  std::to_string(seen[i]) + " roles, expected exactly 1");

  for (const auto& dj : j.at("domains")) {
    DomainSpec d;
    d.name = dj.at("name").get<std::string>();
    d.topic_tokens = dj.at("topic_tokens").get<std::vector<int>>();
    d.entity_pool = dj.at("entity_pool").get<std::vector<int>>();
    d.filler_weights = dj.at("filler_weights").get<std::vector<double>>();
    for (const auto& oj : dj.at("openings"))
      d.openings.push_back(OpeningPattern{oj.at("tokens").get<std::vector<int>>(),
                                          oj.at("weight").get<double>()});
    for (const auto& fj : dj.at("facts")) d.facts.push_back(fact_from_json(fj));
    world.domains.push_back(std::move(d));
  }
  world.general_mixture = j.at("general_mixture").get<std::vector<double>>();
  check_mixture(world.general_mixture, world.domains.size());
  world.background_entity_pool = j.at("background_entity_pool").get<std::vector<int>>();
  for (const auto& fj : j.at("background_facts"))
    world.background_facts.push_back(fact_from_json(fj));
  return world;
}

void save_world(const WorldSpec& world, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << world_to_json(world).dump(2) << "\n";
  if (!out) throw std::runtime_error("failed writing world to '" + path + "'");
}

WorldSpec load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open world file '" + path + "'");
  nlohmann::json j;
  in >> j;
  return world_from_json(j);
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  nlohmann::json meta;
  meta["split"] = corpus.split;
  meta["domains"] = nlohmann::json::array();
  for (const auto& doc : corpus.docs) {
    meta["domains"].push_back(doc.domain);
    for (size_t i = 0; i < doc.tokens.size(); ++i) {
      if (i > 0) out << ' ';
      out << doc.tokens[i];
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing corpus to '" + path + "'");
  std::ofstream mout(path + ".meta.json");
  if (!mout) throw std::runtime_error("cannot open '" + path + ".meta.json' for writing");
  mout << meta.dump(2) << "\n";
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file '" + path + "'");
  std::ifstream min(path + ".meta.json");
  if (!min) throw std::runtime_error("cannot open corpus sidecar '" + path + ".meta.json'");
  nlohmann::json meta;
  min >> meta;

  Corpus corpus;
  corpus.split = meta.at("split").get<std::string>();
  const auto domains = meta.at("domains").get<std::vector<std::string>>();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Document doc;
    std::istringstream ls(line);
    int id;
    while (ls >> id) doc.tokens.push_back(id);
    corpus.docs.push_back(std::move(doc));
  }
  if (corpus.docs.size() != domains.size())
    throw std::runtime_error("corpus '" + path + "' has " + std::to_string(corpus.docs.size()) +
                             " documents but sidecar lists " + std::to_string(domains.size()));
  for (size_t i = 0; i < corpus.docs.size(); ++i) corpus.docs[i].domain = domains[i];
  return corpus;
}

void save_probes(const std::vector<FactProbe>& probes, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& p : probes) {
    nlohmann::json j = {{"prompt", p.prompt},
                        {"answer", p.answer},
                        {"distractors", p.distractors},
                        {"domain", p.domain}};
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("failed writing probes to '" + path + "'");
}

std::vector<FactProbe> load_probes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open probe file '" + path + "'");
  std::vector<FactProbe> probes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    FactProbe p;
    p.prompt = j.at("prompt").get<std::vector<int>>();
    p.answer = j.at("answer").get<int>();
    p.distractors = j.at("distractors").get<std::vector<int>>();
    p.domain = j.at("domain").get<std::string>();
    if (p.distractors.size() != 3)
      throw std::invalid_argument("probe must carry exactly 3 distractors, got " +
                                  std::to_string(p.distractors.size()));
    probes.push_back(std::move(p));
  }
  return probes;
}

}  // namespace condlm
