// Runs the acceptance criteria; one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "oracles.hpp"

using namespace crossvlt;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// The learning criteria share one split: 320 scenes, 64 held out.
struct DeskData {
  std::vector<Scene> train, val;
};

const DeskData& desk_data() {
  static const DeskData d = [] {
    const auto scenes = generate_dataset(320, 7, ModelConfig{}.image_size);
    auto s = split_dataset(scenes, 0.2, 7);
    return DeskData{std::move(s.train), std::move(s.val)};
  }();
  return d;
}

constexpr double kDeskBudgetSeconds = 20 * 60;

Outcome attention_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> heads_d(1, 4), per_head(1, 4), n_d(1, 8);
    const int heads = heads_d(rng), dim = heads * per_head(rng), kv_dim = 1 + static_cast<int>(rng() % 12);
    const AttentionSpec spec{"attn", dim, heads, kv_dim};
    auto p = make_attention_params<double>(spec);
    oracle::randomize(p, rng, 0.5);
    Matrix<double> q(n_d(rng), dim), kv(n_d(rng), kv_dim);
    oracle::fill_normal(q, rng);
    oracle::fill_normal(kv, rng);
    KeyPadding pad(static_cast<std::size_t>(kv.rows()), 0);
    for (std::size_t k = 1; k < pad.size(); ++k) pad[k] = rng() % 4 == 0;
    worst = std::max(worst, (mhca(p, spec, q, kv, &pad) - oracle::naive_mhca(p, "attn", heads, q, kv, &pad))
                                .cwiseAbs()
                                .maxCoeff());
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-5 && secs < 10, fmt("200 instances, max |diff| %.3g (tol 1e-5), %.2fs (limit 10s)", worst, secs)};
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(102);
  double iso = 0;
  std::string where;
  for (int k = 0; k < 4; ++k) {
    auto c = k == 0   ? oracle::attention_case(rng)
             : k == 1 ? oracle::ffn_case(rng)
             : k == 2 ? oracle::alignment_case(rng)
                      : oracle::task_loss_case(rng);
    const auto r = oracle::run_isolated(c, rng);
    if (r.worst > iso) iso = r.worst, where = r.where;
  }
  double e2e = 0;
  int kinks = 0;
  for (const auto& [module, r] : oracle::end_to_end_gradient_check(103, 50)) {
    if (r.worst > e2e) e2e = r.worst;
    kinks += r.skipped_kinks;
  }
  const double secs = seconds_since(t0);
  return {iso <= 1e-5 && e2e <= 1e-4 && secs < 120,
          fmt("isolated max rel err %.3g (tol 1e-5), end-to-end %.3g (tol 1e-4), %d ReLU-kink entries skipped, "
              "%.1fs (limit 120s)",
              iso, e2e, kinks, secs) +
              (where.empty() ? "" : ", worst isolated at " + where)};
}

Outcome closed_form_losses() {
  Tape<double> t;
  Matrix<double> zv(4, 3), zl(1, 3), lt(1, 1);
  zv << 1, 0, 0, 0, 2, 0, 3, 0, 0, 0, -1, 0;
  zl << 0, 0, 5;
  lt << std::log(0.07);
  const double align =
      ops::mean(ops::alignment_pixel_losses(t.constant(zv), t.constant(zl), {1, 0, 1, 0}, t.constant(lt), 1))
          .value()(0, 0);
  const double task = task_loss(t.constant(Matrix<double>::Zero(16, 1)), std::vector<std::uint8_t>(16, 1)).value()(0, 0);
  const double ln2 = std::log(2.0);

  // Total loss is exactly task + lambda * align through the whole pipeline.
  bool affine = true;
  for (double lambda : {0.0, 0.1, 0.5, 2.0}) {
    auto c = oracle::micro_config();
    c.lambda_align = lambda;
    const auto p = init_params<double>(c, 9);
    std::mt19937_64 rng(9);
    const auto b = oracle::random_batch(c, 2, rng);
    Tape<double> tape(false);
    const ForwardContext<double> ctx{Scope<double>{&tape, &p}, &c, 2, false, nullptr};
    const auto out = forward_pipeline(ctx, b.inputs());
    const double expect = out.task.value()(0, 0) + lambda * out.align.value()(0, 0);
    affine = affine && out.total.value()(0, 0) == expect;
  }
  const bool pass = std::abs(align - ln2) <= 1e-6 && std::abs(task - ln2) <= 1e-6 && affine;
  return {pass, fmt("L_align(orthogonal) - ln2 = %.2g, L_task(0) - ln2 = %.2g, lambda-affine exact: %s", align - ln2,
                    task - ln2, affine ? "yes" : "no")};
}

Outcome residual_literalness() {
  const auto c = oracle::micro_config();
  auto p = init_params<double>(c, 3);
  std::mt19937_64 rng(3);
  oracle::randomize(p, rng, 0.3);
  oracle::silence_fusion(p);
  const auto b = oracle::random_batch(c, 2, rng);
  Tape<double> tape(false);
  const ForwardContext<double> ctx{Scope<double>{&tape, &p}, &c, 2, false, nullptr};
  const auto out = forward_pipeline(ctx, b.inputs());
  int bad = 0;
  for (int i = 0; i < c.num_stages; ++i) {
    const auto& v = out.vision[static_cast<std::size_t>(i)];
    bad += v.fused_in.value() != v.features.value();
    bad += v.language_aware.value() != v.features.value();
    if (i > 0) bad += out.language[static_cast<std::size_t>(i)].value() != out.language[static_cast<std::size_t>(i - 1)].value();
  }
  return {bad == 0, fmt("%d bit-level mismatches among M_hat = M = V and L_i = L_(i-1) checks", bad)};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(105);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Mask> preds, gts;
  for (int i = 0; i < 1000; ++i) {
    const int h = 1 + static_cast<int>(rng() % 16), w = 1 + static_cast<int>(rng() % 16);
    const double dp = u(rng), dg = u(rng);
    Mask p(h, w), g(h, w);
    for (auto& x : p.bits) x = u(rng) < dp;
    for (auto& x : g.bits) x = u(rng) < dg;
    preds.push_back(p);
    gts.push_back(g);
  }
  const auto r = evaluate(preds, gts);
  long I = 0, U = 0;
  double sum = 0;
  std::vector<double> ious;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto c = oracle::count(preds[i], gts[i]);
    const long un = c.tp + c.fp + c.fn;
    I += c.tp;
    U += un;
    ious.push_back(un == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(un));
    sum += ious.back();
  }
  bool exact = r.oiou == static_cast<double>(I) / static_cast<double>(U) && r.miou == sum / 1000.0 &&
               r.sample_ious == ious;
  for (double t : kPrecisionThresholds) {
    long hits = 0;
    for (double s : ious) hits += s > t;
    exact = exact && r.precision_at.at(t) == static_cast<double>(hits) / 1000.0;
  }
  Mask p1(1, 6), g1(1, 6), p2(1, 3), g2(1, 3);
  p1.bits = {1, 1, 1, 1, 0, 0};
  g1.bits = {0, 0, 1, 1, 1, 1};
  p2.bits = g2.bits = {1, 1, 1};
  const auto ex = evaluate({p1, p2}, {g1, g2});
  const bool example = std::abs(ex.oiou - 5.0 / 9.0) < 1e-15 && std::abs(ex.miou - 2.0 / 3.0) < 1e-15;
  return {exact && example, fmt("1000 pairs exact: %s; example oIoU %.6f (5/9) mIoU %.6f (2/3)",
                                exact ? "yes" : "no", ex.oiou, ex.miou)};
}

Outcome desk_learning() {
  const auto& d = desk_data();
  const ModelConfig mc;
  const TrainConfig tc;
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(mc, tc, d.train);
  const double secs = seconds_since(t0);
  const auto tr = evaluate_model(result.checkpoint.params, mc, d.train);
  const auto va = evaluate_model(result.checkpoint.params, mc, d.val);
  const bool pass = tr.miou >= 0.90 && va.miou >= 0.70 && secs <= kDeskBudgetSeconds && tc.epochs <= 30;
  return {pass, fmt("%zu train / %zu val, %d epochs: train mIoU %.4f (>= 0.90), val mIoU %.4f (>= 0.70), %.0fs "
                    "(limit 1200s)",
                    d.train.size(), d.val.size(), tc.epochs, tr.miou, va.miou, secs)};
}

Outcome directional_ablation() {
  const auto& d = desk_data();
  const auto cells = ablation_grid("directional");
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_ablation_suite(cells, {0, 1, 2}, TrainConfig{}, d.train, d.val, {},
                                       [](const AblationCell& c, std::uint64_t seed, const EvalReport* r,
                                          const std::string& err) {
                                         std::cerr << "  " << c.name << " seed " << seed << ": "
                                                   << (r ? fmt("val mIoU %.4f", r->miou) : "failed: " + err) << '\n';
                                       });
  const double secs = seconds_since(t0);
  std::map<std::string, double> mean;
  for (const auto& r : rows) {
    if (!r.ok()) return {false, "cell " + r.cell.name + " failed: " + r.error};
    mean[r.cell.name] = summarize(r.collect(detail::miou_of)).mean;
  }
  const double full = mean["Full"], bi = mean["Bi w/o align"], uni = mean["Uni w/o align"], base = mean["baseline"];
  const bool order = full >= bi && bi >= uni;
  const bool margin = full - base >= 0.02;
  const bool fast = secs <= 4 * kDeskBudgetSeconds;
  return {order && margin && fast,
          fmt("mean val mIoU Full %.4f, Bi w/o %.4f, Uni w/o %.4f, baseline %.4f; ", full, bi, uni, base) +
              "ordering " + (order ? "holds" : "violated") + ", Full-baseline " + fmt("%+.2f pts", 100 * (full - base)) +
              " (>= +2), " + fmt("%.0fs (limit 4800s)", secs)};
}

Outcome determinism_and_persistence() {
  const auto scenes = generate_dataset(24, 8, ModelConfig{}.image_size);
  TrainConfig tc;
  tc.epochs = 2;
  const ModelConfig mc;
  auto digest = [&] {
    std::string text;
    for (const auto& e : train(mc, tc, scenes).log) text += format_epoch_log(e) + '\n';
    return fnv1a(text);
  };
  const auto a = digest(), b = digest();
  const auto r = train(mc, tc, scenes);
  const auto path = (std::filesystem::temp_directory_path() / "crossvlt_acceptance.ckpt").string();
  save_checkpoint(path, r.checkpoint);
  const auto back = load_checkpoint(path, &mc);
  std::filesystem::remove(path);
  const bool params = back.params == r.checkpoint.params;
  const bool eval = evaluate_model(back.params, back.model, scenes) == evaluate_model(r.checkpoint.params, mc, scenes);
  std::ostringstream os;
  os << "epoch-log digests " << std::hex << a << " / " << b << std::dec << (a == b ? " equal" : " differ")
     << "; checkpoint params " << (params ? "identical" : "differ") << ", EvalReport "
     << (eval ? "identical" : "differs");
  return {a == b && params && eval, os.str()};
}

Outcome shape_chain() {
  int configs = 0;
  std::string first;
  for (int size : {32, 64, 128}) {
    for (const auto& c : oracle::shape_chain_configs(size)) {
      ++configs;
      const auto bad = oracle::shape_chain_mismatches(c);
      if (!bad.empty() && first.empty()) first = std::to_string(size) + "px: " + bad.front();
    }
  }
  return {first.empty(), fmt("%d configs over sizes 32/64/128", configs) + (first.empty() ? "" : ", " + first)};
}

const std::map<int, std::pair<const char*, std::function<Outcome()>>>& criteria() {
  static const std::map<int, std::pair<const char*, std::function<Outcome()>>> m{
      {1, {"attention oracle", attention_oracle}},
      {2, {"gradient suite", gradient_suite}},
      {3, {"closed-form losses", closed_form_losses}},
      {4, {"residual literalness", residual_literalness}},
      {5, {"metric oracle", metric_oracle}},
      {6, {"desk-scale learning", desk_learning}},
      {7, {"directional ablation", directional_ablation}},
      {8, {"determinism and persistence", determinism_and_persistence}},
      {9, {"shape chain", shape_chain}},
  };
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runs acceptance criteria and prints one PASS/FAIL line each"};
  std::vector<int> which;
  app.add_option("--criterion,-c", which, "criterion numbers (default: all)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  if (which.empty()) {
    for (const auto& [k, v] : criteria()) which.push_back(k);
  }
  int failed = 0;
  for (int k : which) {
    const auto& [name, run] = criteria().at(k);
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << k << " [" << name << "] " << (o.pass ? "PASS" : "FAIL") << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
