#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crossvlt/context.hpp"
#include "crossvlt/image.hpp"

namespace crossvlt {

/// Outputs of one vision stage. `fused_in` is M̂_i, `language_aware` is M_i,
/// `next` is F^i_V (invalid on the last stage).
template <class T>
struct VisionStageOutput {
  int stage = 0;
  int height = 0;
  int width = 0;
  Var<T> features;        // V_i
  Var<T> fused_in;        // M̂_i
  Var<T> language_aware;  // M_i
  Var<T> next;            // F^i_V
};

/// Flattens non-overlapping patches into rows, (B*H1*W1, 3*p*p). Patches are
/// visited row-major; within a patch the layout is (channel, dy, dx).
template <class T>
Matrix<T> patchify(const std::vector<const Image*>& images, int image_size, int patch) {
  const int grid = image_size / patch;
  const int per = grid * grid;
  Matrix<T> out(static_cast<Eigen::Index>(images.size()) * per, 3 * patch * patch);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != image_size || img.width != image_size) {
      throw ShapeError("patch_embed: image is " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + ", expected " + std::to_string(image_size));
    }
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx) {
        const auto r = static_cast<Eigen::Index>(b) * per + gy * grid + gx;
        int k = 0;
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < patch; ++dy)
            for (int dx = 0; dx < patch; ++dx) out(r, k++) = static_cast<T>(img.at(c, gy * patch + dy, gx * patch + dx));
      }
  }
  return out;
}

/// Patch projection plus learned 2-D positional embedding.
template <class T>
Var<T> patch_embed(const ForwardContext<T>& ctx, const std::vector<const Image*>& images) {
  const auto& c = ctx.cfg();
  const Var<T> patches = ctx.tape().constant(patchify<T>(images, c.image_size, c.patch_size));
  const Var<T> proj = affine(ctx.scope, "vision.patch_embed.proj", patches);
  return ops::add_tiled(proj, ctx.scope.param("vision.patch_embed.pos"));
}

/// Down(.): 2x2 patch merge, concatenate neighbours then affine 4*C_i -> C_{i+1}.
template <class T>
Var<T> patch_merge(const ForwardContext<T>& ctx, int stage, Var<T> x, int height, int width) {
  return affine(ctx.scope, stage_prefix("vision", stage) + ".down",
                ops::space_to_depth(x, ctx.batch, height, width));
}

/// One vision stage: self-attention blocks, then the vision query fusion
/// layer when enabled for this stage:
///   M̂ = MHCA(V, L) + V,  M = FFN(M̂) + V,
///   D = Down(M),  F̂ = MHCA(D, L) + D,  F = FFN(F̂) + D   (all but the last stage).
/// With fusion disabled M̂ = M = V and F = Down(V).
template <class T>
VisionStageOutput<T> vision_stage_forward(const ForwardContext<T>& ctx, int stage, Var<T> x_in,
                                          std::optional<Var<T>> language,
                                          const KeyPadding* lang_padding) {
  const auto& c = ctx.cfg();
  const int n = c.num_stages;
  const int res = c.stage_resolution(stage);
  const int ch = c.channels(stage);
  if (x_in.rows() != static_cast<Eigen::Index>(ctx.batch) * res * res || x_in.cols() != ch) {
    throw ShapeError("vision stage " + std::to_string(stage) + ": input " +
                     ops::detail::dims(x_in.rows(), x_in.cols()) + ", expected " +
                     ops::detail::dims(Eigen::Index(ctx.batch) * res * res, ch));
  }
  const std::string p = stage_prefix("vision", stage);
  VisionStageOutput<T> out;
  out.stage = stage;
  out.height = out.width = res;

  Var<T> v = x_in;
  for (int j = 0; j < c.vision_depths[stage - 1]; ++j) {
    v = pre_norm_layer(ctx.scope, p + ".block" + std::to_string(j), v, c.vision_heads[stage - 1],
                       c.ffn_ratio, ctx.batch);
  }
  out.features = v;

  if (!c.fusion_enabled(stage)) {
    out.fused_in = out.language_aware = v;
    if (stage < n) out.next = patch_merge(ctx, stage, v, res, res);
    return out;
  }
  if (!language) {
    throw UsageError("vision stage " + std::to_string(stage) + ": fusion enabled but no language features");
  }
  const int heads = c.vision_heads[stage - 1];
  const AttentionSpec attn1{p + ".fusion.attn1", ch, heads, c.lang_dim};
  const FFNSpec ffn1{p + ".fusion.ffn1", ch, ch * c.ffn_ratio};
  const Var<T> m_hat = ops::add(mhca(ctx.scope, attn1, v, *language, ctx.batch, lang_padding), v);
  const Var<T> m = ops::add(ffn(ctx.scope, ffn1, m_hat), v);
  out.fused_in = m_hat;
  out.language_aware = m;
  if (stage == n) return out;

  const int next_ch = c.channels(stage + 1);
  const AttentionSpec attn2{p + ".fusion.attn2", next_ch, heads, c.lang_dim};
  const FFNSpec ffn2{p + ".fusion.ffn2", next_ch, next_ch * c.ffn_ratio};
  const Var<T> d = patch_merge(ctx, stage, m, res, res);
  const Var<T> f_hat = ops::add(mhca(ctx.scope, attn2, d, *language, ctx.batch, lang_padding), d);
  out.next = ops::add(ffn(ctx.scope, ffn2, f_hat), d);
  return out;
}

}  // namespace crossvlt
