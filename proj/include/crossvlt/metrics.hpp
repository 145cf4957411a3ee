#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "crossvlt/errors.hpp"
#include "crossvlt/image.hpp"

namespace crossvlt {

inline const std::vector<double> kPrecisionThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

struct OverlapCounts {
  long intersection = 0;
  long union_ = 0;
};

inline OverlapCounts overlap(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("iou: mask shapes " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " and " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + " differ");
  }
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i] != 0, g = gt.bits[i] != 0;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

/// |pred ∩ gt| / |pred ∪ gt|; an empty union counts as a perfect match.
inline double iou(const Mask& pred, const Mask& gt) {
  const auto c = overlap(pred, gt);
  return c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.union_);
}

struct PRPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
};

struct EvalReport {
  double oiou = 0;
  double miou = 0;
  std::map<double, double> precision_at;
  std::vector<PRPoint> pr_curve;
  std::vector<double> sample_ious;
  long total_intersection = 0;
  long total_union = 0;

  bool operator==(const EvalReport& o) const {
    if (oiou != o.oiou || miou != o.miou || precision_at != o.precision_at || sample_ious != o.sample_ious ||
        pr_curve.size() != o.pr_curve.size()) {
      return false;
    }
    for (std::size_t i = 0; i < pr_curve.size(); ++i) {
      const auto &a = pr_curve[i], &b = o.pr_curve[i];
      if (a.threshold != b.threshold || a.precision != b.precision || a.recall != b.recall) return false;
    }
    return true;
  }
};

/// oIoU (total intersection / total union), mIoU (mean per-sample IoU) and
/// P@t (fraction of samples with IoU strictly above t).
inline EvalReport evaluate(const std::vector<Mask>& predictions, const std::vector<Mask>& gts) {
  if (predictions.empty()) throw UsageError("evaluate: no samples");
  if (predictions.size() != gts.size()) {
    throw ShapeError("evaluate: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(gts.size()) + " ground truths");
  }
  EvalReport r;
  double sum = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto c = overlap(predictions[i], gts[i]);
    r.total_intersection += c.intersection;
    r.total_union += c.union_;
    const double s = c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / c.union_;
    r.sample_ious.push_back(s);
    sum += s;
  }
  const auto n = static_cast<double>(predictions.size());
  r.miou = sum / n;
  r.oiou = r.total_union == 0 ? 1.0 : static_cast<double>(r.total_intersection) / r.total_union;
  for (double t : kPrecisionThresholds) {
    long hits = 0;
    for (double s : r.sample_ious) hits += s > t;
    r.precision_at[t] = static_cast<double>(hits) / n;
  }
  return r;
}

/// Pixel probabilities of one sample, row-major, same size as its mask.
using ProbabilityMap = std::vector<double>;

/// Pixel-level PR curve with counts pooled over all samples (micro average).
/// Threshold k/(n-1) for k = 0..n-1; a pixel is predicted positive when
/// p > threshold. Precision with no predicted positives is 1.
inline std::vector<PRPoint> pr_curve(const std::vector<ProbabilityMap>& probs, const std::vector<Mask>& gts,
                                     int num_thresholds = 101) {
  if (probs.size() != gts.size()) throw ShapeError("pr_curve: sample counts differ");
  if (num_thresholds < 2) throw UsageError("pr_curve: need at least 2 thresholds");
  const int n = num_thresholds;
  std::vector<long> pos_above(static_cast<std::size_t>(n), 0), neg_above(static_cast<std::size_t>(n), 0);
  long total_pos = 0;
  for (std::size_t s = 0; s < probs.size(); ++s) {
    if (probs[s].size() != gts[s].bits.size()) throw ShapeError("pr_curve: probability map size mismatch");
    for (std::size_t i = 0; i < probs[s].size(); ++i) {
      const double p = probs[s][i];
      if (!(p >= 0.0 && p <= 1.0)) throw NumericError("pr_curve: probability outside [0, 1]");
      const bool g = gts[s].bits[i] != 0;
      total_pos += g;
      // Count this pixel for every threshold index k with k/(n-1) < p.
      for (int k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) / (n - 1);
        if (!(p > t)) break;
        (g ? pos_above : neg_above)[static_cast<std::size_t>(k)]++;
      }
    }
  }
  std::vector<PRPoint> out;
  for (int k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / (n - 1);
    const long tp = pos_above[static_cast<std::size_t>(k)];
    const long fp = neg_above[static_cast<std::size_t>(k)];
    PRPoint pt;
    pt.threshold = t;
    pt.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.recall = total_pos == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(total_pos);
    out.push_back(pt);
  }
  return out;
}

/// Area under the PR curve by the trapezoid rule over recall.
inline double pr_auc(const std::vector<PRPoint>& curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const auto &a = curve[i - 1], &b = curve[i];
    area += std::abs(a.recall - b.recall) * (a.precision + b.precision) / 2.0;
  }
  return area;
}

inline std::string threshold_label(double t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << t;
  return os.str();
}

/// Human-readable report.
inline void write_report_text(std::ostream& os, const EvalReport& r) {
  os << std::fixed << std::setprecision(2);
  os << "samples  " << r.sample_ious.size() << '\n';
  os << "oIoU     " << 100.0 * r.oiou << '\n';
  os << "mIoU     " << 100.0 * r.miou << '\n';
  for (const auto& [t, p] : r.precision_at) os << "P@" << threshold_label(t) << "    " << 100.0 * p << '\n';
  if (!r.pr_curve.empty()) {
    os << "PR-AUC   " << std::setprecision(4) << pr_auc(r.pr_curve) << "  (pixel-level, pooled over samples)\n";
  }
  os.unsetf(std::ios::floatfield);
}

/// Machine-readable `key=value` lines, full precision.
inline void write_report_kv(std::ostream& os, const EvalReport& r) {
  os << std::setprecision(17);
  os << "samples=" << r.sample_ious.size() << '\n';
  os << "oIoU=" << r.oiou << '\n';
  os << "mIoU=" << r.miou << '\n';
  os << "intersection=" << r.total_intersection << '\n';
  os << "union=" << r.total_union << '\n';
  for (const auto& [t, p] : r.precision_at) os << "P@" << threshold_label(t) << '=' << p << '\n';
  if (!r.pr_curve.empty()) os << "pr_auc=" << pr_auc(r.pr_curve) << '\n';
  for (std::size_t i = 0; i < r.sample_ious.size(); ++i) os << "iou." << i << '=' << r.sample_ious[i] << '\n';
}

inline void write_pr_csv(std::ostream& os, const std::vector<PRPoint>& curve) {
  os << "threshold,precision,recall\n" << std::setprecision(10);
  for (const auto& p : curve) os << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
}

}  // namespace crossvlt
