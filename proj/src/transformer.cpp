#include "pmerge/transformer.hpp"

#include <cmath>

#include "pmerge/binary_io.hpp"
#include "pmerge/error.hpp"

namespace pmerge {

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 ||
      max_src_len == 0 || max_tgt_len == 0) {
    fail(ErrorKind::Config, "model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    fail(ErrorKind::Config, "model config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
}

std::string_view to_string(AttentionSite site) {
  switch (site) {
    case AttentionSite::EncoderSelf: return "encoder-self";
    case AttentionSite::DecoderSelf: return "decoder-self";
    case AttentionSite::DecoderCross: return "decoder-cross";
  }
  return "unknown";
}

PrefixActivations PrefixActivations::from_rows(const Tensor& rows, const ModelConfig& cfg) {
  if (rows.rank() != 2 || rows.dim(1) != cfg.prefix_row_dim()) {
    fail(ErrorKind::Dimension, "prefix rows " + shape_str(rows.shape()) + " do not match row width " +
                                   std::to_string(cfg.prefix_row_dim()));
  }
  PrefixActivations out;
  out.length = rows.dim(0);
  const std::size_t d = cfg.d_model;
  for (std::size_t s = 0; s < kNumSites; ++s) {
    out.sites[s].reserve(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::size_t base = (l * kNumSites + s) * 2 * d;
      out.sites[s].push_back({slice(rows, 1, base, d), slice(rows, 1, base + d, d)});
    }
  }
  return out;
}

Tensor sinusoidal_positions(std::size_t len, std::size_t d_model) {
  std::vector<double> v(len * d_model);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d_model);
      const double angle = static_cast<double>(pos) * rate;
      v[pos * d_model + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({len, d_model}, std::move(v));
}

AttentionResult attend_with_prefix(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                   const PrefixKV* prefix, std::size_t n_heads, bool causal,
                                   bool capture) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2 ||
      keys.shape() != values.shape() || queries.dim(1) != keys.dim(1)) {
    fail(ErrorKind::Dimension, "attention: queries " + shape_str(queries.shape()) + ", keys " +
                                   shape_str(keys.shape()) + ", values " + shape_str(values.shape()));
  }
  const std::size_t d = queries.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    fail(ErrorKind::Dimension, "attention: width " + std::to_string(d) + " not divisible into " +
                                   std::to_string(n_heads) + " heads");
  }
  const bool has_prefix = prefix != nullptr && prefix->key.defined();
  std::size_t lp = 0;
  if (has_prefix) {
    if (prefix->key.shape() != prefix->value.shape() || prefix->key.rank() != 2 ||
        prefix->key.dim(1) != d) {
      fail(ErrorKind::Dimension, "attention: prefix key " + shape_str(prefix->key.shape()) +
                                     " / value " + shape_str(prefix->value.shape()) +
                                     " incompatible with width " + std::to_string(d));
    }
    lp = prefix->key.dim(0);
  }
  const std::size_t tq = queries.dim(0), tk = keys.dim(0);
  if (causal && tq != tk) {
    fail(ErrorKind::Dimension, "attention: causal masking needs equal query/key lengths");
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::uint8_t> keep;
  if (causal) {
    keep.assign(tq * (lp + tk), 0);
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = 0; j < lp + i + 1; ++j) keep[i * (lp + tk) + j] = 1;
  }

  AttentionResult result;
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    auto cols = [&](const Tensor& t) { return n_heads == 1 ? t : slice(t, 1, h * dh, dh); };
    Tensor q = cols(queries);
    Tensor k = cols(keys);
    Tensor v = cols(values);
    if (has_prefix) {
      k = concat({cols(prefix->key), k}, 0);
      v = concat({cols(prefix->value), v}, 0);
    }
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt);
    Tensor weights = causal ? masked_softmax(scores, keep) : softmax(scores, 1);
    if (capture) {
      const auto w = weights.data();
      result.heads.push_back({tq, lp + tk, std::vector<double>(w.begin(), w.end())});
    }
    heads.push_back(matmul(weights, v));
  }
  result.output = n_heads == 1 ? heads.front() : concat(heads, 1);
  return result;
}

// --- Transformer ------------------------------------------------------------

Transformer::Transformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  build(&rng);
}

Tensor Transformer::new_param(const std::string& name, Shape shape, std::mt19937_64* rng,
                              double std_dev, double fill) {
  std::vector<double> v(shape_numel(shape), fill);
  if (rng != nullptr && std_dev > 0.0) {
    std::normal_distribution<double> dist(0.0, std_dev);
    for (auto& x : v) x = dist(*rng);
  }
  Tensor t = Tensor::from(std::move(shape), std::move(v), trainable_);
  params_.push_back({name, t});
  return t;
}

void Transformer::build(std::mt19937_64* rng) {
  const std::size_t d = cfg_.d_model, f = cfg_.d_ff;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_proj = proj / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  const double ff_out = 1.0 / std::sqrt(static_cast<double>(f)) /
                        std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));

  auto layer_norm_params = [&](const std::string& name) {
    return LayerNormWeights{new_param(name + ".gamma", {d}, nullptr, 0.0, 1.0),
                            new_param(name + ".beta", {d}, nullptr, 0.0, 0.0)};
  };
  auto attention_params = [&](const std::string& name) {
    return AttentionWeights{new_param(name + ".wq", {d, d}, rng, proj),
                            new_param(name + ".wk", {d, d}, rng, proj),
                            new_param(name + ".wv", {d, d}, rng, proj),
                            new_param(name + ".wo", {d, d}, rng, out_proj)};
  };
  auto ff_params = [&](const std::string& name) {
    return FeedForward{new_param(name + ".w1", {d, f}, rng, proj),
                       new_param(name + ".b1", {f}, nullptr, 0.0),
                       new_param(name + ".w2", {f, d}, rng, ff_out),
                       new_param(name + ".b2", {d}, nullptr, 0.0)};
  };

  embedding_ = new_param("embedding", {cfg_.vocab_size, d}, rng, proj);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayer layer;
    layer.ln_attn = layer_norm_params(p + ".ln_attn");
    layer.attn = attention_params(p + ".attn");
    layer.ln_ff = layer_norm_params(p + ".ln_ff");
    layer.ff = ff_params(p + ".ff");
    encoder_.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer;
    layer.ln_self = layer_norm_params(p + ".ln_self");
    layer.self_attn = attention_params(p + ".self_attn");
    layer.ln_cross = layer_norm_params(p + ".ln_cross");
    layer.cross_attn = attention_params(p + ".cross_attn");
    layer.ln_ff = layer_norm_params(p + ".ln_ff");
    layer.ff = ff_params(p + ".ff");
    decoder_.push_back(std::move(layer));
  }
  enc_final_ = layer_norm_params("encoder.ln_final");
  dec_final_ = layer_norm_params("decoder.ln_final");
}

void Transformer::check_tokens(std::span<const TokenId> ids, std::size_t max_len,
                               const char* what) const {
  if (ids.empty()) fail(ErrorKind::Length, std::string(what) + " sequence is empty");
  if (ids.size() > max_len) {
    fail(ErrorKind::Length, std::string(what) + " length " + std::to_string(ids.size()) +
                                " exceeds maximum " + std::to_string(max_len));
  }
  for (auto id : ids) {
    if (id >= cfg_.vocab_size) {
      fail(ErrorKind::Index, std::string(what) + " token " + std::to_string(id) +
                                 " >= vocab size " + std::to_string(cfg_.vocab_size));
    }
  }
}

Tensor Transformer::embed(std::span<const TokenId> ids) const {
  Tensor x = scale(embedding(embedding_, ids), std::sqrt(static_cast<double>(cfg_.d_model)));
  return add(x, sinusoidal_positions(ids.size(), cfg_.d_model));
}

Tensor Transformer::feed_forward(const FeedForward& ff, const Tensor& x) const {
  Tensor h = gelu(add_row(matmul(x, ff.w1), ff.b1));
  return add_row(matmul(h, ff.w2), ff.b2);
}

Tensor Transformer::encode(std::span<const TokenId> src, const PrefixActivations* prefix,
                           AttentionTrace* trace) const {
  check_tokens(src, cfg_.max_src_len, "source");
  const bool use_prefix = prefix != nullptr && prefix->length > 0;
  if (trace) {
    trace->prefix_len = use_prefix ? prefix->length : 0;
    trace->layers.clear();
  }
  Tensor x = embed(src);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto& layer = encoder_[l];
    Tensor h = layer_norm(x, layer.ln_attn.gamma, layer.ln_attn.beta);
    auto att = attend_with_prefix(matmul(h, layer.attn.wq), matmul(h, layer.attn.wk),
                                  matmul(h, layer.attn.wv),
                                  use_prefix ? &prefix->at(AttentionSite::EncoderSelf, l) : nullptr,
                                  cfg_.n_heads, false, trace != nullptr);
    if (trace) trace->layers.push_back(std::move(att.heads));
    x = add(x, matmul(att.output, layer.attn.wo));
    x = add(x, feed_forward(layer.ff, layer_norm(x, layer.ln_ff.gamma, layer.ln_ff.beta)));
  }
  return layer_norm(x, enc_final_.gamma, enc_final_.beta);
}

Tensor Transformer::decode(const Tensor& memory, std::span<const TokenId> dec_inputs,
                           const PrefixActivations* prefix, AttentionTrace* self_trace,
                           AttentionTrace* cross_trace) const {
  check_tokens(dec_inputs, cfg_.max_tgt_len, "target");
  const bool use_prefix = prefix != nullptr && prefix->length > 0;
  for (AttentionTrace* t : {self_trace, cross_trace}) {
    if (!t) continue;
    t->prefix_len = use_prefix ? prefix->length : 0;
    t->layers.clear();
  }
  Tensor y = embed(dec_inputs);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const auto& layer = decoder_[l];
    Tensor h = layer_norm(y, layer.ln_self.gamma, layer.ln_self.beta);
    auto self_att = attend_with_prefix(
        matmul(h, layer.self_attn.wq), matmul(h, layer.self_attn.wk), matmul(h, layer.self_attn.wv),
        use_prefix ? &prefix->at(AttentionSite::DecoderSelf, l) : nullptr, cfg_.n_heads, true,
        self_trace != nullptr);
    if (self_trace) self_trace->layers.push_back(std::move(self_att.heads));
    y = add(y, matmul(self_att.output, layer.self_attn.wo));

    h = layer_norm(y, layer.ln_cross.gamma, layer.ln_cross.beta);
    auto cross_att = attend_with_prefix(
        matmul(h, layer.cross_attn.wq), matmul(memory, layer.cross_attn.wk),
        matmul(memory, layer.cross_attn.wv),
        use_prefix ? &prefix->at(AttentionSite::DecoderCross, l) : nullptr, cfg_.n_heads, false,
        cross_trace != nullptr);
    if (cross_trace) cross_trace->layers.push_back(std::move(cross_att.heads));
    y = add(y, matmul(cross_att.output, layer.cross_attn.wo));
    y = add(y, feed_forward(layer.ff, layer_norm(y, layer.ln_ff.gamma, layer.ln_ff.beta)));
  }
  Tensor out = layer_norm(y, dec_final_.gamma, dec_final_.beta);
  return matmul(out, transpose(embedding_));
}

ForwardResult Transformer::forward(std::span<const TokenId> src, std::span<const TokenId> target,
                                   const PrefixActivations* prefix, bool capture) const {
  check_tokens(target, cfg_.max_tgt_len, "target");
  std::vector<TokenId> dec_inputs;
  dec_inputs.reserve(target.size());
  dec_inputs.push_back(kBos);
  dec_inputs.insert(dec_inputs.end(), target.begin(), target.end() - 1);
  ForwardResult r;
  auto* tr = capture ? &r.traces.sites : nullptr;
  Tensor memory = encode(src, prefix, tr ? &(*tr)[0] : nullptr);
  r.logits = decode(memory, dec_inputs, prefix, tr ? &(*tr)[1] : nullptr, tr ? &(*tr)[2] : nullptr);
  return r;
}

std::vector<TokenId> Transformer::greedy_decode(std::span<const TokenId> src,
                                                const PrefixActivations* prefix,
                                                std::size_t max_len, std::size_t min_len,
                                                TokenId eos) const {
  if (max_len < 1 || max_len < min_len) {
    fail(ErrorKind::Contract, "greedy_decode: need max_len >= 1 and max_len >= min_len");
  }
  if (max_len > cfg_.max_tgt_len) {
    fail(ErrorKind::Length, "greedy_decode: max_len " + std::to_string(max_len) +
                                " exceeds maximum target length " + std::to_string(cfg_.max_tgt_len));
  }
  NoGradGuard no_grad;
  Tensor memory = encode(src, prefix);
  std::vector<TokenId> dec_inputs{kBos};
  std::vector<TokenId> out;
  while (out.size() < max_len) {
    Tensor logits = decode(memory, dec_inputs, prefix);
    const std::size_t V = cfg_.vocab_size;
    const auto row = logits.data().subspan((dec_inputs.size() - 1) * V, V);
    const bool allow_eos = out.size() >= min_len;
    TokenId best = V;
    for (TokenId t = 0; t < V; ++t) {
      if (t == eos && !allow_eos) continue;
      if (best == V || row[t] > row[best]) best = t;
    }
    out.push_back(best);
    if (best == eos) break;
    dec_inputs.push_back(best);
  }
  return out;
}

std::vector<Tensor> Transformer::param_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

void Transformer::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (auto& p : params_) p.tensor.set_requires_grad(trainable);
}

Transformer Transformer::clone() const {
  Transformer copy;
  copy.cfg_ = cfg_;
  copy.trainable_ = trainable_;
  copy.build(nullptr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].tensor.data();
    auto dst = copy.params_[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

std::string Transformer::checksum() const {
  Sha256 h;
  for (const auto& p : params_) h.update(p.tensor.data());
  return h.hex_digest();
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_src_len", c.max_src_len},
          {"max_tgt_len", c.max_tgt_len}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_src_len = j.at("max_src_len").get<std::size_t>();
  c.max_tgt_len = j.at("max_tgt_len").get<std::size_t>();
  return c;
}

constexpr int kModelFormatVersion = 1;

}  // namespace

void Transformer::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = "pmerge-model";
  header["version"] = kModelFormatVersion;
  header["config"] = config_to_json(cfg_);
  std::vector<double> payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& p : params_) {
    index.push_back({{"name", p.name},
                     {"shape", p.tensor.shape()},
                     {"offset", payload.size()},
                     {"count", p.tensor.numel()}});
    auto d = p.tensor.data();
    payload.insert(payload.end(), d.begin(), d.end());
  }
  header["params"] = std::move(index);
  write_container(path, header, payload);
}

Transformer Transformer::load(const std::filesystem::path& path) {
  Container c = read_container(path);
  try {
    if (c.header.at("format") != "pmerge-model") {
      fail(ErrorKind::Load, path.string() + ": not a model checkpoint");
    }
    if (c.header.at("version").get<int>() != kModelFormatVersion) {
      fail(ErrorKind::Load, path.string() + ": unsupported model checkpoint version " +
                                c.header.at("version").dump());
    }
    Transformer m;
    m.cfg_ = config_from_json(c.header.at("config"));
    m.cfg_.validate();
    m.build(nullptr);
    const auto& index = c.header.at("params");
    if (index.size() != m.params_.size()) {
      fail(ErrorKind::Load, path.string() + ": parameter count mismatch");
    }
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto& p = m.params_[i];
      const auto& e = index[i];
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (e.at("name").get<std::string>() != p.name || count != p.tensor.numel() ||
          offset + count > c.payload.size()) {
        fail(ErrorKind::Load, path.string() + ": parameter entry " + std::to_string(i) +
                                  " does not match the model layout");
      }
      auto dst = p.tensor.mutable_data();
      std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(offset), count, dst.begin());
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, path.string() + ": malformed header: " + e.what());
  }
}

}  // namespace pmerge
