// Copyright (c) 2026, the condlm authors
// SPDX-License-Identifier: Apache-2.0

#include "condlm/model.h"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "condlm/rng.h"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order and assume little-endian");

namespace condlm {
namespace {

constexpr char kMagic[7] = {'C', 'O', 'N', 'D', 'L', 'M', '1'};
constexpr float kLnEps = 1e-5f;

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const unsigned char* bytes = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

TensorPtr init_weight(Rng& rng, std::vector<int> shape, float scale) {
  auto t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t->values) v = rng.normal_f(0.0f, scale);
  return t;
}

TensorPtr clone_tensor(const TensorPtr& t) {
  auto out = Tensor::from_values(t->shape, t->values, t->requires_grad);
  return out;
}

}  // namespace

void validate(const ModelConfig& c) {
  const auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (c.vocab_size < 2) fail("vocab_size must be >= 2, got " + std::to_string(c.vocab_size));
  if (c.d_model < 1) fail("d_model must be >= 1, got " + std::to_string(c.d_model));
  if (c.n_layers < 1) fail("n_layers must be >= 1, got " + std::to_string(c.n_layers));
  if (c.n_heads < 1) fail("n_heads must be >= 1, got " + std::to_string(c.n_heads));
  if (c.d_model % c.n_heads != 0)
    fail("n_heads " + std::to_string(c.n_heads) + " must divide d_model " +
         std::to_string(c.d_model));
  if (c.d_ff < 1) fail("d_ff must be >= 1, got " + std::to_string(c.d_ff));
  if (c.max_seq_len < 2) fail("max_seq_len must be >= 2, got " + std::to_string(c.max_seq_len));
  if (!(c.init_scale >= 0.0f) || !std::isfinite(c.init_scale))
    fail("init_scale must be finite and >= 0");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
          {"init_seed", c.init_seed},   {"init_scale", c.init_scale},
          {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  c.init_scale = j.at("init_scale").get<float>();
  c.tie_embeddings = j.value("tie_embeddings", false);
  validate(c);
  return c;
}

TransformerLM TransformerLM::init(const ModelConfig& config) {
  validate(config);
  TransformerLM m;
  m.config = config;
  Rng rng(config.init_seed);
  const int d = config.d_model;
  // Draw order follows the parameter manifest so init stays reproducible.
  m.tok_emb = init_weight(rng, {config.vocab_size, d}, config.init_scale);
  m.pos_emb = init_weight(rng, {config.max_seq_len, d}, config.init_scale);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_scale = Tensor::from_values({d}, std::vector<float>(d, 1.0f), true);
    lp.ln1_shift = Tensor::zeros({d}, true);
    lp.wq = init_weight(rng, {d, d}, config.init_scale);
    lp.wk = init_weight(rng, {d, d}, config.init_scale);
    lp.wv = init_weight(rng, {d, d}, config.init_scale);
    lp.wo = init_weight(rng, {d, d}, config.init_scale);
    lp.ln2_scale = Tensor::from_values({d}, std::vector<float>(d, 1.0f), true);
    lp.ln2_shift = Tensor::zeros({d}, true);
    lp.w1 = init_weight(rng, {d, config.d_ff}, config.init_scale);
    lp.w2 = init_weight(rng, {config.d_ff, d}, config.init_scale);
    m.layers.push_back(std::move(lp));
  }
  m.final_ln_scale = Tensor::from_values({d}, std::vector<float>(d, 1.0f), true);
  m.final_ln_shift = Tensor::zeros({d}, true);
  if (!config.tie_embeddings)
    m.lm_head = init_weight(rng, {d, config.vocab_size}, config.init_scale);
  return m;
}

std::vector<std::pair<std::string, TensorPtr>> TransformerLM::named_parameters() const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.scale", layers[l].ln1_scale);
    out.emplace_back(p + "ln1.shift", layers[l].ln1_shift);
    out.emplace_back(p + "attn.wq", layers[l].wq);
    out.emplace_back(p + "attn.wk", layers[l].wk);
    out.emplace_back(p + "attn.wv", layers[l].wv);
    out.emplace_back(p + "attn.wo", layers[l].wo);
    out.emplace_back(p + "ln2.scale", layers[l].ln2_scale);
    out.emplace_back(p + "ln2.shift", layers[l].ln2_shift);
    out.emplace_back(p + "mlp.w1", layers[l].w1);
    out.emplace_back(p + "mlp.w2", layers[l].w2);
  }
  out.emplace_back("final_ln.scale", final_ln_scale);
  out.emplace_back("final_ln.shift", final_ln_shift);
  if (lm_head) out.emplace_back("lm_head", lm_head);
  return out;
}

int64_t TransformerLM::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t->numel();
  return n;
}

void TransformerLM::zero_grads() const {
  for (const auto& [name, t] : named_parameters()) t->zero_grad();
}

TransformerLM TransformerLM::clone() const {
  TransformerLM m;
  m.config = config;
  m.tok_emb = clone_tensor(tok_emb);
  m.pos_emb = clone_tensor(pos_emb);
  for (const auto& l : layers) {
    LayerParams lp;
    lp.ln1_scale = clone_tensor(l.ln1_scale);
    lp.ln1_shift = clone_tensor(l.ln1_shift);
    lp.wq = clone_tensor(l.wq);
    lp.wk = clone_tensor(l.wk);
    lp.wv = clone_tensor(l.wv);
    lp.wo = clone_tensor(l.wo);
    lp.ln2_scale = clone_tensor(l.ln2_scale);
    lp.ln2_shift = clone_tensor(l.ln2_shift);
    lp.w1 = clone_tensor(l.w1);
    lp.w2 = clone_tensor(l.w2);
    m.layers.push_back(std::move(lp));
  }
  m.final_ln_scale = clone_tensor(final_ln_scale);
  m.final_ln_shift = clone_tensor(final_ln_shift);
  if (lm_head) m.lm_head = clone_tensor(lm_head);
  return m;
}

uint64_t parameters_digest(const TransformerLM& model) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : model.named_parameters()) {
    h = fnv1a(h, name.data(), name.size());
    h = fnv1a(h, t->values.data(), t->values.size() * sizeof(float));
  }
  return h;
}

TensorPtr forward_all_rows(const TransformerLM& model, Tape& tape,
                           std::span<const int> tokens, const TensorPtr& soft_prefix) {
  const ModelConfig& c = model.config;
  const int t_len = static_cast<int>(tokens.size());
  const int k = soft_prefix ? soft_prefix->rows() : 0;
  if (soft_prefix) {
    if (soft_prefix->rank() != 2 || soft_prefix->cols() != c.d_model)
      throw std::invalid_argument("forward: soft prefix must be [k x " +
                                  std::to_string(c.d_model) + "], got " +
                                  shape_str(soft_prefix->shape));
    if (k < 1) throw std::invalid_argument("forward: soft prefix has no rows");
  }
  const int s = k + t_len;
  if (s < 1) throw std::invalid_argument("forward: empty input (no tokens, no prefix)");
  if (s > c.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(s) +
                                " (prefix " + std::to_string(k) + " + tokens " +
                                std::to_string(t_len) + ") exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
  for (const int id : tokens)
    if (id < 0 || id >= c.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                  " outside vocab of size " + std::to_string(c.vocab_size));

  TensorPtr x0;
  if (t_len > 0) {
    auto emb = tape.embedding_lookup(model.tok_emb, tokens);
    x0 = soft_prefix ? tape.concat_rows(soft_prefix, emb) : emb;
  } else {
    x0 = soft_prefix;
  }
  auto x = tape.add(x0, tape.slice_rows(model.pos_emb, 0, s));

  const int hd = c.d_model / c.n_heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (const auto& layer : model.layers) {
    auto h = tape.layer_norm(x, layer.ln1_scale, layer.ln1_shift, kLnEps);
    auto q = tape.matmul(h, layer.wq);
    auto kk = tape.matmul(h, layer.wk);
    auto v = tape.matmul(h, layer.wv);
    std::vector<TensorPtr> heads;
    heads.reserve(static_cast<size_t>(c.n_heads));
    for (int i = 0; i < c.n_heads; ++i) {
      auto qh = tape.slice_cols(q, i * hd, hd);
      auto kh = tape.slice_cols(kk, i * hd, hd);
      auto vh = tape.slice_cols(v, i * hd, hd);
      auto attn = tape.causal_softmax(tape.scale(tape.matmul_nt(qh, kh), att_scale));
      heads.push_back(tape.matmul(attn, vh));
    }
    x = tape.add(x, tape.matmul(tape.concat_cols(heads), layer.wo));
    auto h2 = tape.layer_norm(x, layer.ln2_scale, layer.ln2_shift, kLnEps);
    x = tape.add(x, tape.matmul(tape.gelu(tape.matmul(h2, layer.w1)), layer.w2));
  }
  auto xf = tape.layer_norm(x, model.final_ln_scale, model.final_ln_shift, kLnEps);
  return model.config.tie_embeddings ? tape.matmul_nt(xf, model.tok_emb)
                                     : tape.matmul(xf, model.lm_head);
}

TensorPtr forward(const TransformerLM& model, Tape& tape, std::span<const int> tokens,
                  const TensorPtr& soft_prefix) {
  if (tokens.empty()) throw std::invalid_argument("forward: token sequence is empty");
  auto all = forward_all_rows(model, tape, tokens, soft_prefix);
  const int k = soft_prefix ? soft_prefix->rows() : 0;
  if (k == 0) return all;
  return tape.slice_rows(all, k, static_cast<int>(tokens.size()));
}

SequenceLogProb sequence_logprob(const TransformerLM& model, std::span<const int> tokens,
                                 int condition_len, const TensorPtr& soft_prefix) {
  const int t_len = static_cast<int>(tokens.size());
  if (t_len < 1) throw std::invalid_argument("sequence_logprob: empty token sequence");
  if (condition_len < 0 || condition_len > t_len)
    throw std::invalid_argument("sequence_logprob: condition_len " +
                                std::to_string(condition_len) + " outside [0, " +
                                std::to_string(t_len) + "]");
  Tape tape(false);
  auto all = forward_all_rows(model, tape, tokens, soft_prefix);
  const int k = soft_prefix ? soft_prefix->rows() : 0;
  const int v = all->cols();

  SequenceLogProb out;
  out.condition_len = condition_len;
  out.first_scored = (k > 0) ? 0 : 1;
  out.per_token_logprob.assign(static_cast<size_t>(t_len), 0.0);
  for (int i = out.first_scored; i < t_len; ++i) {
    const int row = k + i - 1;  // row that predicts tokens[i]
    const std::span<const float> logits(all->values.data() + static_cast<size_t>(row) * v,
                                        static_cast<size_t>(v));
    const auto ls = log_softmax_f64(logits);
    out.per_token_logprob[static_cast<size_t>(i)] = ls[static_cast<size_t>(tokens[i])];
  }
  for (int i = out.first_scored; i < t_len; ++i) {
    const double lp = out.per_token_logprob[static_cast<size_t>(i)];
    out.total_sum += lp;
    if (i >= condition_len) out.conditional_sum += lp;
  }
  return out;
}

std::vector<int> decode(const TransformerLM& model, std::span<const int> prompt,
                        const TensorPtr& soft_prefix, int length, float temperature,
                        uint64_t seed) {
  if (length < 0) throw std::invalid_argument("decode: negative length");
  if (temperature < 0.0f) throw std::invalid_argument("decode: negative temperature");
  const int k = soft_prefix ? soft_prefix->rows() : 0;
  if (prompt.empty() && k == 0)
    throw std::invalid_argument("decode: need a prompt or a soft prefix to start from");
  const int final_len = k + static_cast<int>(prompt.size()) + length;
  if (final_len > model.config.max_seq_len)
    throw std::invalid_argument("decode: prefix " + std::to_string(k) + " + prompt " +
                                std::to_string(prompt.size()) + " + length " +
                                std::to_string(length) + " exceeds max_seq_len " +
                                std::to_string(model.config.max_seq_len));
  Rng rng(seed);
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> generated;
  generated.reserve(static_cast<size_t>(length));
  const int v = model.config.vocab_size;
  for (int step = 0; step < length; ++step) {
    Tape tape(false);
    auto all = forward_all_rows(model, tape, seq, soft_prefix);
    const float* row = all->values.data() + (all->numel() - v);
    int next = 0;
    if (temperature == 0.0f) {
      for (int i = 1; i < v; ++i)
        if (row[i] > row[next]) next = i;
    } else {
      double mx = row[0] / temperature;
      for (int i = 1; i < v; ++i) mx = std::max(mx, static_cast<double>(row[i]) / temperature);
      std::vector<double> w(static_cast<size_t>(v));
      for (int i = 0; i < v; ++i)
        w[static_cast<size_t>(i)] = std::exp(static_cast<double>(row[i]) / temperature - mx);
      next = static_cast<int>(rng.categorical(w));
    }
    seq.push_back(next);
    generated.push_back(next);
  }
  return generated;
}

void write_blob_container(const std::string& path, const std::string& kind,
                          const nlohmann::json& header_extra,
                          const std::vector<NamedTensor>& items) {
  nlohmann::json header = header_extra;
  header["kind"] = kind;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& item : items)
    manifest.push_back({{"name", item.name}, {"shape", item.tensor->shape}});
  header["manifest"] = manifest;
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& item : items)
    out.write(reinterpret_cast<const char*>(item.tensor->values.data()),
              static_cast<std::streamsize>(item.tensor->values.size() * sizeof(float)));
  if (!out) throw std::runtime_error("short write to " + path);
}

BlobContainer read_blob_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path + " is not a CONDLM1 container");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ull << 30))
    throw std::runtime_error(path + ": bad header length");
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path + ": truncated header");

  BlobContainer c;
  c.header = nlohmann::json::parse(head);
  c.kind = c.header.at("kind").get<std::string>();
  for (const auto& entry : c.header.at("manifest")) {
    NamedTensor item;
    item.name = entry.at("name").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    int64_t n = 1;
    for (const int d : shape) {
      if (d < 0) throw std::runtime_error(path + ": negative dim in manifest for " + item.name);
      n *= d;
    }
    item.tensor = Tensor::zeros(std::move(shape));
    in.read(reinterpret_cast<char*>(item.tensor->values.data()),
            static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(float))));
    if (in.gcount() != static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(float))))
      throw std::runtime_error(path + ": truncated blob for " + item.name);
    c.items.push_back(std::move(item));
  }
  return c;
}

void save_checkpoint(const TransformerLM& model, const std::string& path,
                     const nlohmann::json& meta) {
  std::vector<NamedTensor> items;
  for (const auto& [name, t] : model.named_parameters()) items.push_back({name, t});
  nlohmann::json extra;
  extra["config"] = to_json(model.config);
  extra["meta"] = meta;
  write_blob_container(path, "model", extra, items);
}

TransformerLM load_checkpoint(const std::string& path, nlohmann::json* meta_out) {
  BlobContainer c = read_blob_container(path);
  if (c.kind != "model")
    throw std::runtime_error(path + ": expected a model checkpoint, found kind '" + c.kind + "'");
  const ModelConfig config = model_config_from_json(c.header.at("config"));
  TransformerLM model = TransformerLM::init(config);
  const auto params = model.named_parameters();
  if (params.size() != c.items.size())
    throw std::runtime_error(path + ": manifest has " + std::to_string(c.items.size()) +
                             " tensors, model wants " + std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != c.items[i].name)
      throw std::runtime_error(path + ": manifest entry " + std::to_string(i) + " is '" +
                               c.items[i].name + "', expected '" + params[i].first + "'");
    if (params[i].second->shape != c.items[i].tensor->shape)
      throw std::runtime_error(path + ": shape mismatch for " + c.items[i].name + ": file has " +
                               shape_str(c.items[i].tensor->shape) + ", model wants " +
                               shape_str(params[i].second->shape));
    params[i].second->values = c.items[i].tensor->values;
  }
  if (meta_out) *meta_out = c.header.value("meta", nlohmann::json::object());
  return model;
}

std::string file_digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(h, buf, static_cast<size_t>(in.gcount()));
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return std::string(hex);
}

}  // namespace condlm
