#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crossvlt/alignment.hpp"
#include "crossvlt/decoder.hpp"
#include "crossvlt/language_encoder.hpp"
#include "crossvlt/vision_encoder.hpp"

namespace crossvlt {

/// One batch of model inputs. `masks` may be empty for pure inference.
struct ModelInputs {
  std::vector<const Image*> images;
  TokenBatch tokens;
  std::vector<const Mask*> masks;

  int batch() const { return static_cast<int>(images.size()); }
};

template <class T>
struct ForwardOutput {
  Var<T> logits;                            // (B*S*S, 1)
  std::vector<VisionStageOutput<T>> vision;  // stage order
  std::vector<Var<T>> language;             // L_i, (B*T, D)
  std::vector<Var<T>> cls;                  // CLS_i, (B, D)
  std::vector<StageAlignment<T>> alignment;  // enabled stages only
  std::vector<Var<T>> auxiliary;            // per-stage side-head BCE (auxiliary mode)
  std::vector<PixelLabelMap> labels;        // per sample, when masks were given

  bool has_losses = false;
  bool align_empty = true;
  Var<T> task;
  Var<T> align;
  Var<T> total;
};

/// Full forward pass. Order per stage i: language stage i (its fusion layer
/// reads F^{i-1}_V), alignment on (V_i, CLS_i) ahead of the fusion layer,
/// vision stage i fused with L_i. The decoder consumes M̂_1..M̂_n. Losses are
/// built when masks are present.
template <class T>
ForwardOutput<T> forward_pipeline(const ForwardContext<T>& ctx, const ModelInputs& in) {
  const auto& c = ctx.cfg();
  const int n = c.num_stages;
  const int batch = in.batch();
  if (batch != ctx.batch || in.tokens.batch != batch) {
    throw ShapeError("forward_pipeline: batch sizes disagree");
  }
  ForwardOutput<T> out;

  const Var<T> embedded = embed_tokens(ctx, in.tokens);
  Var<T> x = patch_embed(ctx, in.images);
  Var<T> lang = embedded;
  for (int i = 1; i <= n; ++i) {
    std::optional<Var<T>> prev_vision;
    if (i > 1) prev_vision = out.vision.back().next;
    lang = language_stage_forward(ctx, i, lang, prev_vision, in.tokens.padding);
    out.language.push_back(lang);
    out.cls.push_back(ops::take_rows(lang, cls_rows(batch, in.tokens.length)));
    auto stage = vision_stage_forward(ctx, i, x, std::optional<Var<T>>(lang), &in.tokens.padding);
    x = stage.next;
    out.vision.push_back(stage);
  }

  std::vector<Var<T>> fused;
  for (const auto& s : out.vision) fused.push_back(s.fused_in);
  out.logits = decode(ctx, fused);

  if (in.masks.empty()) return out;
  if (static_cast<int>(in.masks.size()) != batch) throw ShapeError("forward_pipeline: mask count");
  out.has_losses = true;
  for (const Mask* m : in.masks) out.labels.push_back(downsample_labels(*m, stage_resolutions(c)));
  auto stage_labels = [&](int i) {
    std::vector<std::uint8_t> bits;
    for (const auto& l : out.labels) bits.insert(bits.end(), l[i - 1].bits.begin(), l[i - 1].bits.end());
    return bits;
  };

  out.task = task_loss(out.logits, stack_masks(in.masks));
  if (c.stage_loss == StageLoss::alignment) {
    for (int i = 1; i <= n; ++i) {
      if (!c.align_enabled(i)) continue;
      const auto proj = project_features(ctx, i, out.vision[i - 1].features, out.cls[i - 1]);
      out.alignment.push_back(stage_alignment_loss(
          i, proj, stage_labels(i), ctx.scope.param(stage_prefix("align", i) + ".log_tau"), batch));
    }
    const auto total = total_alignment_loss(ctx.tape(), out.alignment, c.align_norm);
    out.align = total.value;
    out.align_empty = total.empty;
  } else {
    Var<T> acc{};
    int count = 0;
    for (int i = 1; i <= n; ++i) {
      if (!c.align_enabled(i)) continue;
      const Var<T> logits = affine(ctx.scope, stage_prefix("aux", i) + ".head", out.vision[i - 1].features);
      const Var<T> loss = ops::mean(ops::bce_pixel_losses(logits, stage_labels(i)));
      out.auxiliary.push_back(loss);
      acc = acc.valid() ? ops::add(acc, loss) : loss;
      ++count;
    }
    out.align_empty = count == 0;
    out.align = count == 0 ? ctx.tape().constant(Matrix<T>::Zero(1, 1))
                           : ops::scale(acc, static_cast<T>(1.0 / count));
  }
  out.total = total_loss(out.task, out.align, c.lambda_align);
  return out;
}

}  // namespace crossvlt
