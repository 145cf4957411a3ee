#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "crossvlt/context.hpp"
#include "crossvlt/image.hpp"

namespace crossvlt {

/// Per-stage relevant/irrelevant pixel labels, index stage-1. A set bit is
/// a relevant pixel (Z+); everything else is irrelevant (Z-).
using PixelLabelMap = std::vector<Mask>;

/// Downsamples a full-resolution mask to each requested square resolution.
/// A cell is relevant iff at least half of its pixels are (ties relevant).
inline PixelLabelMap downsample_labels(const Mask& gt, const std::vector<int>& resolutions) {
  PixelLabelMap out;
  for (int res : resolutions) {
    if (res <= 0 || gt.height % res != 0 || gt.width % res != 0) {
      throw ShapeError("downsample_labels: resolution " + std::to_string(res) +
                       " does not divide " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    const int cy = gt.height / res, cx = gt.width / res;
    Mask m(res, res);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        int on = 0;
        for (int dy = 0; dy < cy; ++dy)
          for (int dx = 0; dx < cx; ++dx) on += gt.at(y * cy + dy, x * cx + dx) != 0;
        m.at(y, x) = 2 * on >= cy * cx ? 1 : 0;
      }
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<int> stage_resolutions(const ModelConfig& c) {
  std::vector<int> r;
  for (int i = 1; i <= c.num_stages; ++i) r.push_back(c.stage_resolution(i));
  return r;
}

template <class T>
struct AlignmentProjection {
  Var<T> vision;    // (B*H_i*W_i, D')
  Var<T> language;  // (B, D')
};

/// Plain affine projections of V_i and CLS_i into the shared D' space.
template <class T>
AlignmentProjection<T> project_features(const ForwardContext<T>& ctx, int stage, Var<T> vision,
                                        Var<T> cls) {
  const auto& c = ctx.cfg();
  if (!c.align_enabled(stage) || c.stage_loss != StageLoss::alignment) {
    throw UsageError("project_features: alignment not enabled at stage " + std::to_string(stage));
  }
  const std::string p = stage_prefix("align", stage);
  return {affine(ctx.scope, p + ".vision_proj", vision), affine(ctx.scope, p + ".lang_proj", cls)};
}

template <class T>
struct StageAlignment {
  int stage = 0;
  long pixels = 0;
  AlignmentProjection<T> projection;
  Var<T> pixel_losses;  // (B*H_i*W_i, 1)
  Var<T> loss;          // 1x1 mean over the stage's pixels
  Matrix<T> cosine;     // (B*H_i*W_i, 1)
};

/// Sigmoid text-to-pixel loss of one stage, averaged over its pixels.
template <class T>
StageAlignment<T> stage_alignment_loss(int stage, const AlignmentProjection<T>& proj,
                                       const std::vector<std::uint8_t>& labels, Var<T> log_tau,
                                       int batch) {
  StageAlignment<T> out;
  out.stage = stage;
  out.projection = proj;
  out.pixel_losses = ops::alignment_pixel_losses(proj.vision, proj.language, labels, log_tau, batch,
                                                 &out.cosine);
  out.loss = ops::mean(out.pixel_losses);
  out.pixels = static_cast<long>(labels.size());
  return out;
}

template <class T>
struct TotalAlignment {
  Var<T> value;
  /// No stage contributed; value is an exact zero constant.
  bool empty = true;
};

/// Combines stage losses: mean of stage means (per_stage_mean) or the mean
/// over every pixel of every stage (global_pixel_mean).
template <class T>
TotalAlignment<T> total_alignment_loss(Tape<T>& tape, const std::vector<StageAlignment<T>>& stages,
                                       AlignNorm norm) {
  TotalAlignment<T> out;
  if (stages.empty()) {
    out.value = tape.constant(Matrix<T>::Zero(1, 1));
    return out;
  }
  out.empty = false;
  long total_pixels = 0;
  for (const auto& s : stages) total_pixels += s.pixels;
  Var<T> acc{};
  for (const auto& s : stages) {
    const double w = norm == AlignNorm::per_stage_mean ? 1.0 / static_cast<double>(stages.size())
                                                       : static_cast<double>(s.pixels) / total_pixels;
    const Var<T> term = ops::scale(s.loss, static_cast<T>(w));
    acc = acc.valid() ? ops::add(acc, term) : term;
  }
  out.value = acc;
  return out;
}

/// One stage of one sample, ready for export.
struct EmbeddingRecord {
  std::string sample_id;
  int stage = 0;
  Matrix<double> vision;          // (H_i*W_i, D')
  Matrix<double> language;        // (1, D')
  std::vector<std::uint8_t> labels;  // H_i*W_i
};

/// Tab-separated dump: header `sample_id stage index label z0 .. z{D'-1}`,
/// then one row per pixel (index = pixel number, label relevant/irrelevant)
/// and one [CLS] row (index CLS, label language) per record.
inline void write_embeddings(std::ostream& os, const std::vector<EmbeddingRecord>& records, int dim) {
  os << "sample_id\tstage\tindex\tlabel";
  for (int k = 0; k < dim; ++k) os << "\tz" << k;
  os << '\n';
  os.precision(9);
  for (const auto& r : records) {
    if (r.vision.cols() != dim || r.language.cols() != dim ||
        r.vision.rows() != static_cast<Eigen::Index>(r.labels.size())) {
      throw ShapeError("write_embeddings: record shape mismatch for " + r.sample_id);
    }
    for (Eigen::Index j = 0; j < r.vision.rows(); ++j) {
      os << r.sample_id << '\t' << r.stage << '\t' << j << '\t'
         << (r.labels[j] ? "relevant" : "irrelevant");
      for (int k = 0; k < dim; ++k) os << '\t' << r.vision(j, k);
      os << '\n';
    }
    os << r.sample_id << '\t' << r.stage << "\tCLS\tlanguage";
    for (int k = 0; k < dim; ++k) os << '\t' << r.language(0, k);
    os << '\n';
  }
  if (!os) throw IoError("write_embeddings: stream failure");
}

}  // namespace crossvlt
