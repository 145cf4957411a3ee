#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crossvlt/context.hpp"

namespace crossvlt {

/// Token ids for a batch, (B*T) row-major, with the matching padding mask
/// (nonzero = [PAD]).
struct TokenBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;
  KeyPadding padding;
};

/// Token table lookup plus learned positional embedding.
template <class T>
Var<T> embed_tokens(const ForwardContext<T>& ctx, const TokenBatch& tokens) {
  const auto& c = ctx.cfg();
  if (tokens.length != c.max_tokens || static_cast<int>(tokens.ids.size()) != tokens.batch * tokens.length) {
    throw ShapeError("embed_tokens: expected " + std::to_string(c.max_tokens) + " tokens per sample");
  }
  const Var<T> words = ops::embedding(ctx.scope.param("language.embed.tokens"), tokens.ids);
  return ops::add_tiled(words, ctx.scope.param("language.embed.pos"));
}

/// Number of self-attention layers stage `stage` runs after its fusion slot.
inline int language_self_layers(const ModelConfig& c, int stage) {
  return stage == 1 ? c.lang_depths[0] : c.lang_depths[stage - 1] - 1;
}

/// One language stage. Stage 1 is a plain self-attention stack. Later stages
/// first run the language query fusion layer (when present):
///   F̂ = MHCA(L_prev, F_V) + L_prev,  F = FFN(F̂) + F̂
/// and then their remaining self-attention layers. Vision keys are never
/// masked; [PAD] keys are masked in self-attention.
template <class T>
Var<T> language_stage_forward(const ForwardContext<T>& ctx, int stage, Var<T> l_prev,
                              std::optional<Var<T>> vision_prev, const KeyPadding& padding) {
  const auto& c = ctx.cfg();
  if (l_prev.rows() != static_cast<Eigen::Index>(ctx.batch) * c.max_tokens || l_prev.cols() != c.lang_dim) {
    throw ShapeError("language stage " + std::to_string(stage) + ": input " +
                     ops::detail::dims(l_prev.rows(), l_prev.cols()));
  }
  const std::string p = stage_prefix("language", stage);
  Var<T> x = l_prev;
  if (c.language_fusion_enabled(stage)) {
    if (!vision_prev) {
      throw UsageError("language stage " + std::to_string(stage) + ": fusion layer needs vision features");
    }
    const AttentionSpec attn{p + ".fusion.attn", c.lang_dim, c.lang_heads, c.channels(stage)};
    const FFNSpec mlp{p + ".fusion.ffn", c.lang_dim, c.lang_dim * c.ffn_ratio};
    const Var<T> f_hat = ops::add(mhca(ctx.scope, attn, x, *vision_prev, ctx.batch), x);
    x = ops::add(ffn(ctx.scope, mlp, f_hat), f_hat);
  }
  const int first = stage == 1 ? 0 : 1;
  for (int j = first; j < c.lang_depths[stage - 1]; ++j) {
    x = post_norm_layer(ctx.scope, p + ".layer" + std::to_string(j), x, c.lang_heads, c.ffn_ratio,
                        ctx.batch, &padding);
  }
  return x;
}

/// Rows holding [CLS] (position 0 of each sample).
inline std::vector<Eigen::Index> cls_rows(int batch, int length) {
  std::vector<Eigen::Index> rows;
  for (int b = 0; b < batch; ++b) rows.push_back(static_cast<Eigen::Index>(b) * length);
  return rows;
}

}  // namespace crossvlt
