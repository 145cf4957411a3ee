#pragma once

#include <string>
#include <vector>

#include "crossvlt/context.hpp"
#include "crossvlt/image.hpp"

namespace crossvlt {

namespace detail {

template <class T>
Var<T> conv_bn_relu(const ForwardContext<T>& ctx, const std::string& conv, const std::string& bn,
                    Var<T> x, int res) {
  const auto& s = ctx.scope;
  const Var<T> y = ops::conv3x3(x, s.param(conv + ".weight"), ctx.batch, res, res);
  ops::BatchStats<T> stats;
  const Var<T> z = ops::batch_norm(y, s.param(bn + ".gain"), s.param(bn + ".bias"), ctx.training,
                                   s.params->at(bn + ".running_mean"), s.params->at(bn + ".running_var"),
                                   ctx.training ? &stats : nullptr);
  if (ctx.training && ctx.batch_stats) (*ctx.batch_stats)[bn] = std::move(stats);
  return ops::relu(z);
}

}  // namespace detail

/// Segmentation decoder. Starts from M̂ of the last stage; each block
/// upsamples x2 (bilinear), concatenates the next-higher-resolution M̂ and
/// applies two (3x3 conv, batch norm, ReLU) units. A 1x1 convolution then
/// gives one logit per stage-1 token, upsampled x patch_size to image size.
/// `fused` holds M̂_1..M̂_n in stage order; returns (B*S*S, 1) logits.
template <class T>
Var<T> decode(const ForwardContext<T>& ctx, const std::vector<Var<T>>& fused) {
  const auto& c = ctx.cfg();
  const int n = c.num_stages;
  if (static_cast<int>(fused.size()) != n) {
    throw ShapeError("decode: expected " + std::to_string(n) + " skip features, got " +
                     std::to_string(fused.size()));
  }
  for (int i = 1; i <= n; ++i) {
    const auto& f = fused[i - 1];
    if (!f.valid()) throw ShapeError("decode: missing skip feature for stage " + std::to_string(i));
    if (f.rows() != Eigen::Index(ctx.batch) * c.stage_tokens(i) || f.cols() != c.channels(i)) {
      throw ShapeError("decode: stage " + std::to_string(i) + " features have shape " +
                       ops::detail::dims(f.rows(), f.cols()));
    }
  }
  Var<T> x = fused[n - 1];
  int res = c.stage_resolution(n);
  for (int b = 1; b < n; ++b) {
    const std::string p = "decoder.block" + std::to_string(b);
    x = ops::upsample_bilinear(x, ctx.batch, res, res, 2);
    res *= 2;
    x = ops::concat_cols(x, fused[n - b - 1]);
    x = detail::conv_bn_relu(ctx, p + ".conv1", p + ".bn1", x, res);
    x = detail::conv_bn_relu(ctx, p + ".conv2", p + ".bn2", x, res);
  }
  const Var<T> logits = affine(ctx.scope, "decoder.head", x);
  return ops::upsample_bilinear(logits, ctx.batch, res, res, c.patch_size);
}

/// Stacks ground-truth masks into one target vector matching decode() rows.
inline std::vector<std::uint8_t> stack_masks(const std::vector<const Mask*>& masks) {
  std::vector<std::uint8_t> out;
  for (const Mask* m : masks) out.insert(out.end(), m->bits.begin(), m->bits.end());
  return out;
}

/// Mean binary cross-entropy over all pixels, probabilities clamped to
/// [1e-7, 1 - 1e-7].
template <class T>
Var<T> task_loss(Var<T> logits, const std::vector<std::uint8_t>& targets) {
  if (logits.value().size() != static_cast<Eigen::Index>(targets.size())) {
    throw ShapeError("task_loss: " + std::to_string(logits.value().size()) + " logits vs " +
                     std::to_string(targets.size()) + " targets");
  }
  return ops::mean(ops::bce_pixel_losses(logits, targets));
}

/// L_task + lambda * L_align.
template <class T>
Var<T> total_loss(Var<T> task, Var<T> align, double lambda) {
  if (!(lambda >= 0)) throw ConfigError("total_loss: lambda must be >= 0");
  return ops::add(task, ops::scale(align, static_cast<T>(lambda)));
}

inline double total_loss(double task, double align, double lambda) { return task + lambda * align; }

inline double sigmoid(double x) { return ops::detail::sigmoid(x); }

/// p > threshold -> 1, with p = sigmoid(logit). No post-processing.
template <class Derived>
Mask predict_mask(const Eigen::MatrixBase<Derived>& logits, int height, int width, double threshold = 0.5) {
  if (logits.size() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("predict_mask: logit count does not match mask size");
  }
  Mask m(height, width);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    m.bits[static_cast<std::size_t>(i)] = sigmoid(static_cast<double>(logits(i))) > threshold ? 1 : 0;
  }
  return m;
}

}  // namespace crossvlt
