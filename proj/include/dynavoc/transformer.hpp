#pragma once

// Pre-layer-norm causal transformer with learned absolute positions and GELU
// feed-forward blocks. The same stack serves as the language model backbone
// and, with a projection head on top, as the phrase encoder. Inputs arrive
// already embedded so phrase embeddings can be injected as atomic rows.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dynavoc/tensor.hpp"
#include "dynavoc/util.hpp"

namespace dynavoc {

struct ModelConfig {
  long d_model = 64;
  long n_layers = 2;
  long n_heads = 4;
  long d_ff = 256;
  long max_seq = 256;
  long vocab_size = 2304;

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq <= 0 ||
        vocab_size <= 0)
      throw std::invalid_argument("model config fields must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("d_model must be divisible by n_heads");
  }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor attn_qkv_w, attn_qkv_b;
  Tensor attn_proj_w, attn_proj_b;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_in_w, ffn_in_b;
  Tensor ffn_out_w, ffn_out_b;
};

struct TransformerWeights {
  ModelConfig config;
  Tensor token_embedding;     // input bank for static tokens [V x d]
  Tensor position_embedding;  // [max_seq x d]
  std::vector<LayerWeights> layers;
  Tensor final_norm_gain, final_norm_bias;
  Tensor output_embedding;  // output bank for static tokens [V x d], untied

  static TransformerWeights init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const long d = cfg.d_model;
    TransformerWeights w;
    w.config = cfg;
    w.token_embedding = Tensor::randn({cfg.vocab_size, d}, rng, 0.02, true);
    w.position_embedding = Tensor::randn({cfg.max_seq, d}, rng, 0.01, true);
    for (long l = 0; l < cfg.n_layers; ++l) {
      LayerWeights lw;
      lw.ln1_gain = Tensor::full({d}, 1.0, true);
      lw.ln1_bias = Tensor::zeros({d}, true);
      lw.attn_qkv_w = Tensor::randn({d, 3 * d}, rng, 0.02, true);
      lw.attn_qkv_b = Tensor::zeros({3 * d}, true);
      lw.attn_proj_w = Tensor::randn({d, d}, rng, 0.02, true);
      lw.attn_proj_b = Tensor::zeros({d}, true);
      lw.ln2_gain = Tensor::full({d}, 1.0, true);
      lw.ln2_bias = Tensor::zeros({d}, true);
      lw.ffn_in_w = Tensor::randn({d, cfg.d_ff}, rng, 0.02, true);
      lw.ffn_in_b = Tensor::zeros({cfg.d_ff}, true);
      lw.ffn_out_w = Tensor::randn({cfg.d_ff, d}, rng, 0.02, true);
      lw.ffn_out_b = Tensor::zeros({d}, true);
      w.layers.push_back(std::move(lw));
    }
    w.final_norm_gain = Tensor::full({d}, 1.0, true);
    w.final_norm_bias = Tensor::zeros({d}, true);
    w.output_embedding = Tensor::randn({cfg.vocab_size, d}, rng, 0.02, true);
    return w;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const LayerWeights& lw = layers[l];
      out.emplace_back(p + "ln1_gain", lw.ln1_gain);
      out.emplace_back(p + "ln1_bias", lw.ln1_bias);
      out.emplace_back(p + "attn_qkv_w", lw.attn_qkv_w);
      out.emplace_back(p + "attn_qkv_b", lw.attn_qkv_b);
      out.emplace_back(p + "attn_proj_w", lw.attn_proj_w);
      out.emplace_back(p + "attn_proj_b", lw.attn_proj_b);
      out.emplace_back(p + "ln2_gain", lw.ln2_gain);
      out.emplace_back(p + "ln2_bias", lw.ln2_bias);
      out.emplace_back(p + "ffn_in_w", lw.ffn_in_w);
      out.emplace_back(p + "ffn_in_b", lw.ffn_in_b);
      out.emplace_back(p + "ffn_out_w", lw.ffn_out_w);
      out.emplace_back(p + "ffn_out_b", lw.ffn_out_b);
    }
    out.emplace_back("final_norm_gain", final_norm_gain);
    out.emplace_back("final_norm_bias", final_norm_bias);
    out.emplace_back("output_embedding", output_embedding);
    return out;
  }

  // Detached deep copy (used for generation-negative snapshots).
  TransformerWeights detached_copy() const {
    TransformerWeights w;
    w.config = config;
    w.token_embedding = token_embedding.clone(false);
    w.position_embedding = position_embedding.clone(false);
    for (const LayerWeights& lw : layers) {
      LayerWeights c;
      c.ln1_gain = lw.ln1_gain.clone(false);
      c.ln1_bias = lw.ln1_bias.clone(false);
      c.attn_qkv_w = lw.attn_qkv_w.clone(false);
      c.attn_qkv_b = lw.attn_qkv_b.clone(false);
      c.attn_proj_w = lw.attn_proj_w.clone(false);
      c.attn_proj_b = lw.attn_proj_b.clone(false);
      c.ln2_gain = lw.ln2_gain.clone(false);
      c.ln2_bias = lw.ln2_bias.clone(false);
      c.ffn_in_w = lw.ffn_in_w.clone(false);
      c.ffn_in_b = lw.ffn_in_b.clone(false);
      c.ffn_out_w = lw.ffn_out_w.clone(false);
      c.ffn_out_b = lw.ffn_out_b.clone(false);
      w.layers.push_back(std::move(c));
    }
    w.final_norm_gain = final_norm_gain.clone(false);
    w.final_norm_bias = final_norm_bias.clone(false);
    w.output_embedding = output_embedding.clone(false);
    return w;
  }
};

// Row lookup plus positional embedding for a sequence of unit ids. The table
// may be the static token embedding or an expanded input bank, so ids up to
// table.rows()-1 (including phrase ids) are valid.
inline Tensor embed_units(const std::vector<TokenId>& ids, const Tensor& table,
                          const Tensor& position_embedding) {
  if (static_cast<long>(ids.size()) > position_embedding.rows())
    throw std::length_error("sequence exceeds max_seq positions");
  std::vector<long> rows(ids.begin(), ids.end());
  Tensor tok = gather_rows(table, rows);
  if (ids.empty()) return tok;
  std::vector<long> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<long>(i);
  return add(tok, gather_rows(position_embedding, positions));
}

inline Tensor embed_tokens(const std::vector<TokenId>& ids, const TransformerWeights& w) {
  return embed_units(ids, w.token_embedding, w.position_embedding);
}

// Causal forward pass over pre-embedded inputs [n x d] -> hidden states
// [n x d]; hidden[i] depends only on inputs[0..i].
inline Tensor forward_hidden(const Tensor& inputs, const TransformerWeights& w) {
  const ModelConfig& cfg = w.config;
  if (inputs.rank() != 2 || inputs.cols() != cfg.d_model)
    throw std::invalid_argument("forward_hidden: inputs must be [n x d_model]");
  if (inputs.rows() > cfg.max_seq)
    throw std::length_error("forward_hidden: sequence longer than max_seq");
  if (inputs.rows() == 0)
    throw std::invalid_argument("forward_hidden: empty sequence");

  const long head_dim = cfg.d_model / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor x = inputs;
  for (const LayerWeights& lw : w.layers) {
    Tensor normed = layer_norm_rows(x, lw.ln1_gain, lw.ln1_bias);
    Tensor qkv = add_row_broadcast(matmul(normed, lw.attn_qkv_w), lw.attn_qkv_b);
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (long h = 0; h < cfg.n_heads; ++h) {
      Tensor q = slice_cols(qkv, h * head_dim, head_dim);
      Tensor k = slice_cols(qkv, cfg.d_model + h * head_dim, head_dim);
      Tensor v = slice_cols(qkv, 2 * cfg.d_model + h * head_dim, head_dim);
      Tensor att = causal_softmax_rows(scale(matmul(q, transpose(k)), att_scale));
      heads.push_back(matmul(att, v));
    }
    Tensor ctx = cfg.n_heads == 1 ? heads.front() : concat_cols(heads);
    x = add(x, add_row_broadcast(matmul(ctx, lw.attn_proj_w), lw.attn_proj_b));

    Tensor normed2 = layer_norm_rows(x, lw.ln2_gain, lw.ln2_bias);
    Tensor inner = gelu(add_row_broadcast(matmul(normed2, lw.ffn_in_w), lw.ffn_in_b));
    x = add(x, add_row_broadcast(matmul(inner, lw.ffn_out_w), lw.ffn_out_b));
  }
  return layer_norm_rows(x, w.final_norm_gain, w.final_norm_bias);
}

}  // namespace dynavoc
