#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pmerge/tensor.hpp"

namespace pmerge {

using TokenId = std::size_t;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 200;
  std::size_t max_src_len = 64;
  std::size_t max_tgt_len = 32;

  void validate() const;
  std::size_t d_head() const { return d_model / n_heads; }
  /// Width of one prefix row: layers x 3 sites x (key, value) x d_model.
  std::size_t prefix_row_dim() const { return n_layers * 3 * 2 * d_model; }

  bool operator==(const ModelConfig&) const = default;
};

enum class AttentionSite : std::size_t { EncoderSelf = 0, DecoderSelf = 1, DecoderCross = 2 };

inline constexpr std::size_t kNumSites = 3;

std::string_view to_string(AttentionSite site);

/// Key/value blocks prepended at one attention site of one layer.
struct PrefixKV {
  Tensor key;    // [L_p x d_model]
  Tensor value;  // [L_p x d_model]
};

/// Per-site, per-layer prefix blocks. `length == 0` means no prefix.
struct PrefixActivations {
  std::size_t length = 0;
  std::array<std::vector<PrefixKV>, kNumSites> sites;

  const PrefixKV& at(AttentionSite site, std::size_t layer) const {
    return sites[static_cast<std::size_t>(site)][layer];
  }

  /// Slice gathered prefix rows [L_p x prefix_row_dim] into blocks. Column
  /// layout of a row: ((layer * 3 + site) * 2 + {0: key, 1: value}) * d_model.
  static PrefixActivations from_rows(const Tensor& rows, const ModelConfig& cfg);
};

/// Post-softmax weights of one attention call; columns are [prefix; content].
struct HeadTrace {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
};

struct AttentionTrace {
  std::size_t prefix_len = 0;
  std::vector<std::vector<HeadTrace>> layers;  // [layer][head]
};

struct ForwardTraces {
  std::array<AttentionTrace, kNumSites> sites;

  const AttentionTrace& at(AttentionSite site) const {
    return sites[static_cast<std::size_t>(site)];
  }
};

struct AttentionResult {
  Tensor output;  // [Tq x d_model]
  std::vector<HeadTrace> heads;
};

/// Multi-head attention over [prefix_k; keys] / [prefix_v; values]. Inputs are
/// already projected. With `causal`, query i sees content positions <= i and
/// every prefix position. A null prefix (or length 0) is vanilla attention.
AttentionResult attend_with_prefix(const Tensor& queries, const Tensor& keys,
                                   const Tensor& values, const PrefixKV* prefix,
                                   std::size_t n_heads, bool causal, bool capture = false);

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct ForwardResult {
  Tensor logits;  // [T x V]
  ForwardTraces traces;
};

/// Pre-norm encoder-decoder transformer with tied input/output embeddings and
/// sinusoidal positions on content tokens.
class Transformer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;

  Transformer(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Teacher-forced pass. `target` are the labels; the decoder reads
  /// [BOS, target[0..T-2]] and logits row t predicts target[t].
  ForwardResult forward(std::span<const TokenId> src, std::span<const TokenId> target,
                        const PrefixActivations* prefix, bool capture = false) const;

  /// Encoder states [S x d_model] for `src`.
  Tensor encode(std::span<const TokenId> src, const PrefixActivations* prefix,
                AttentionTrace* trace = nullptr) const;
  /// Logits [T x V] for decoder inputs given encoder states.
  Tensor decode(const Tensor& memory, std::span<const TokenId> dec_inputs,
                const PrefixActivations* prefix, AttentionTrace* self_trace = nullptr,
                AttentionTrace* cross_trace = nullptr) const;

  /// Argmax decoding. EOS is suppressed until `min_len` tokens exist; the
  /// returned sequence excludes EOS unless it was emitted.
  std::vector<TokenId> greedy_decode(std::span<const TokenId> src,
                                     const PrefixActivations* prefix, std::size_t max_len,
                                     std::size_t min_len, TokenId eos = kEos) const;

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<Tensor> param_tensors() const;

  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }

  /// Independent copy with its own parameter leaves.
  Transformer clone() const;

  /// SHA-256 over every parameter's bytes, in registration order.
  std::string checksum() const;

  void save(const std::filesystem::path& path) const;
  static Transformer load(const std::filesystem::path& path);

 private:
  struct AttentionWeights {
    Tensor wq, wk, wv, wo;
  };
  struct LayerNormWeights {
    Tensor gamma, beta;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    LayerNormWeights ln_attn;
    AttentionWeights attn;
    LayerNormWeights ln_ff;
    FeedForward ff;
  };
  struct DecoderLayer {
    LayerNormWeights ln_self;
    AttentionWeights self_attn;
    LayerNormWeights ln_cross;
    AttentionWeights cross_attn;
    LayerNormWeights ln_ff;
    FeedForward ff;
  };

  Transformer() = default;
  void build(std::mt19937_64* rng);
  Tensor new_param(const std::string& name, Shape shape, std::mt19937_64* rng, double std_dev,
                   double fill = 0.0);
  Tensor embed(std::span<const TokenId> ids) const;
  Tensor feed_forward(const FeedForward& ff, const Tensor& x) const;
  void check_tokens(std::span<const TokenId> ids, std::size_t max_len, const char* what) const;

  ModelConfig cfg_;
  bool trainable_ = true;
  std::vector<NamedParam> params_;
  Tensor embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNormWeights enc_final_;
  LayerNormWeights dec_final_;
};

/// Sinusoidal position encodings [len x d_model].
Tensor sinusoidal_positions(std::size_t len, std::size_t d_model);

}  // namespace pmerge
