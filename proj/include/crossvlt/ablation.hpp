#pragma once

#include <algorithm>
#include <functional>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crossvlt/train.hpp"

namespace crossvlt {

/// One configuration of the ablation grid.
struct AblationCell {
  std::string group;
  std::string name;
  ModelConfig config;
};

namespace detail {

inline std::set<int> stage_range(int from, int n) {
  std::set<int> s;
  for (int i = from; i <= n; ++i) s.insert(i);
  return s;
}

inline std::string stage_label(const std::set<int>& s) {
  std::string out = "[";
  for (int v : s) out += (out.size() > 1 ? "," : "") + std::to_string(v);
  return out + "]";
}

inline AblationCell make_cell(const ModelConfig& base, std::string group, std::string name, std::set<int> fusion,
                              std::set<int> align, FusionDirection dir = FusionDirection::bidirectional,
                              StageLoss loss = StageLoss::alignment) {
  ModelConfig c = base;
  c.fusion_stages = std::move(fusion);
  c.align_stages = std::move(align);
  c.fusion_direction = dir;
  c.stage_loss = loss;
  return {std::move(group), std::move(name), c};
}

}  // namespace detail

inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> names{"main",    "fusion-stages", "align-stages", "joint-stages",
                                              "direction", "stage-loss",  "directional",  "all"};
  return names;
}

/// Named grids. Stage subsets grow from the last stage: [n], [n-1,n], ...
///   main          no align / align / fusion / both; without early fusion the
///                 model fuses at the last stage only
///   fusion-stages early fusion on growing subsets, no alignment
///   align-stages  alignment on growing subsets, last-stage fusion only
///   joint-stages  fusion and alignment together on growing subsets
///   direction     {Uni, Bi} x {without, with} alignment
///   stage-loss    auxiliary side-head loss vs alignment loss
///   directional   Full, Bi w/o align, Uni w/o align, last-stage baseline
///   all           union of the above, duplicates removed
inline std::vector<AblationCell> ablation_grid(const std::string& preset, const ModelConfig& base = {}) {
  using detail::make_cell;
  using detail::stage_label;
  using detail::stage_range;
  const int n = base.num_stages;
  const auto all = stage_range(1, n);
  const std::set<int> last{n};
  const std::set<int> none;
  std::vector<AblationCell> cells;
  if (preset == "main") {
    cells.push_back(make_cell(base, "main", "baseline", last, none));
    cells.push_back(make_cell(base, "main", "align", last, all));
    cells.push_back(make_cell(base, "main", "fusion", all, none));
    cells.push_back(make_cell(base, "main", "align+fusion", all, all));
  } else if (preset == "fusion-stages" || preset == "align-stages" || preset == "joint-stages") {
    for (int from = n; from >= 1; --from) {
      const auto s = stage_range(from, n);
      if (preset == "fusion-stages") cells.push_back(make_cell(base, preset, stage_label(s), s, none));
      else if (preset == "align-stages") cells.push_back(make_cell(base, preset, stage_label(s), last, s));
      else cells.push_back(make_cell(base, preset, stage_label(s), s, s));
    }
  } else if (preset == "direction") {
    cells.push_back(make_cell(base, preset, "Uni (w/o)", all, none, FusionDirection::vision_only));
    cells.push_back(make_cell(base, preset, "Uni (w/)", all, all, FusionDirection::vision_only));
    cells.push_back(make_cell(base, preset, "Bi (w/o)", all, none));
    cells.push_back(make_cell(base, preset, "Bi (w/)", all, all));
  } else if (preset == "stage-loss") {
    cells.push_back(make_cell(base, preset, "auxiliary loss", all, all, FusionDirection::bidirectional,
                              StageLoss::auxiliary));
    cells.push_back(make_cell(base, preset, "alignment loss", all, all));
  } else if (preset == "directional") {
    cells.push_back(make_cell(base, preset, "Full", all, all));
    cells.push_back(make_cell(base, preset, "Bi w/o align", all, none));
    cells.push_back(make_cell(base, preset, "Uni w/o align", all, none, FusionDirection::vision_only));
    cells.push_back(make_cell(base, preset, "baseline", last, none));
  } else if (preset == "all") {
    for (const auto& p : ablation_presets()) {
      if (p == "all" || p == "directional") continue;
      for (auto& c : ablation_grid(p, base)) cells.push_back(std::move(c));
    }
  } else {
    throw UsageError("unknown ablation preset '" + preset + "'");
  }
  return cells;
}

struct SeedResult {
  std::uint64_t seed = 0;
  EvalReport report;
};

struct AblationRow {
  AblationCell cell;
  std::vector<SeedResult> results;
  /// Empty on success; otherwise why the cell failed.
  std::string error;

  bool ok() const { return error.empty() && !results.empty(); }

  template <class F>
  std::vector<double> collect(F f) const {
    std::vector<double> v;
    for (const auto& r : results) v.push_back(f(r.report));
    return v;
  }
};

struct Summary {
  double mean = 0, min = 0, max = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  return s;
}

using AblationProgress = std::function<void(const AblationCell&, std::uint64_t seed, const EvalReport*,
                                            const std::string& error)>;

/// Trains every cell once per seed on the same split and evaluates on the
/// validation scenes. The seed sets model init and batch order. A failing
/// cell is recorded and the suite moves on.
inline std::vector<AblationRow> run_ablation_suite(const std::vector<AblationCell>& cells,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   const TrainConfig& train_cfg, const std::vector<Scene>& train_set,
                                                   const std::vector<Scene>& val_set, const Vocab& vocab = {},
                                                   const AblationProgress& progress = {}) {
  if (seeds.empty()) throw UsageError("run_ablation_suite: no seeds");
  std::vector<AblationRow> rows;
  for (const auto& cell : cells) {
    AblationRow row{cell, {}, {}};
    for (std::uint64_t seed : seeds) {
      try {
        ModelConfig mc = cell.config;
        mc.seed = seed;
        TrainConfig tc = train_cfg;
        tc.init_seed = seed;
        tc.shuffle_seed = seed;
        const auto result = train(mc, tc, train_set, vocab);
        SeedResult r{seed, evaluate_model(result.checkpoint.params, mc, val_set, vocab)};
        if (progress) progress(cell, seed, &r.report, {});
        row.results.push_back(std::move(r));
      } catch (const std::exception& e) {
        row.error = e.what();
        if (progress) progress(cell, seed, nullptr, row.error);
        break;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace detail {

inline double miou_of(const EvalReport& r) { return r.miou; }
inline double oiou_of(const EvalReport& r) { return r.oiou; }

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), ',', ';');
  return s;
}

}  // namespace detail

/// CSV, one row per cell; metrics in percent.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "group,cell,fusion_stages,align_stages,direction,stage_loss,seeds,status,"
        "mIoU_mean,mIoU_min,mIoU_max,oIoU_mean,oIoU_min,oIoU_max,P@0.5,P@0.7,P@0.9\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    const auto& c = r.cell.config;
    os << r.cell.group << ',' << r.cell.name << ',' << detail::join(c.fusion_stages, ';') << ','
       << detail::join(c.align_stages, ';') << ','
       << (c.fusion_direction == FusionDirection::bidirectional ? "bi" : "uni") << ','
       << (c.stage_loss == StageLoss::alignment ? "alignment" : "auxiliary") << ',' << r.results.size() << ',';
    if (!r.ok()) {
      os << "FAILED: " << detail::one_line(r.error) << ",,,,,,,,,\n";
      continue;
    }
    const auto mi = summarize(r.collect(detail::miou_of));
    const auto oi = summarize(r.collect(detail::oiou_of));
    os << "ok," << 100 * mi.mean << ',' << 100 * mi.min << ',' << 100 * mi.max << ',' << 100 * oi.mean << ','
       << 100 * oi.min << ',' << 100 * oi.max;
    for (double t : {0.5, 0.7, 0.9}) {
      os << ',' << 100 * summarize(r.collect([t](const EvalReport& e) { return e.precision_at.at(t); })).mean;
    }
    os << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

/// Aligned table grouped like the paper's ablations: mean [min, max] over
/// seeds, in percent.
inline void write_ablation_text(std::ostream& os, const std::vector<AblationRow>& rows) {
  auto cell_text = [](const Summary& s) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << 100 * s.mean << " [" << 100 * s.min << ", " << 100 * s.max << "]";
    return o.str();
  };
  std::size_t w = 16;
  for (const auto& r : rows) w = std::max(w, r.cell.name.size() + 2);
  std::string group;
  for (const auto& r : rows) {
    if (r.cell.group != group) {
      group = r.cell.group;
      os << '\n' << group << '\n';
      os << std::left << std::setw(static_cast<int>(w)) << "cell" << std::setw(26) << "mIoU" << std::setw(26)
         << "oIoU" << std::setw(9) << "P@0.5" << std::setw(9) << "P@0.7" << "P@0.9\n";
    }
    os << std::left << std::setw(static_cast<int>(w)) << r.cell.name;
    if (!r.ok()) {
      os << "FAILED: " << detail::one_line(r.error) << '\n';
      continue;
    }
    os << std::setw(26) << cell_text(summarize(r.collect(detail::miou_of))) << std::setw(26)
       << cell_text(summarize(r.collect(detail::oiou_of)));
    for (double t : {0.5, 0.7, 0.9}) {
      std::ostringstream o;
      o << std::fixed << std::setprecision(2)
        << 100 * summarize(r.collect([t](const EvalReport& e) { return e.precision_at.at(t); })).mean;
      os << std::setw(t < 0.85 ? 9 : 0) << o.str();
    }
    os << '\n';
  }
  os << std::right;
}

}  // namespace crossvlt
