#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

using namespace crossvlt;
namespace fs = std::filesystem;

namespace {

TrainConfig quick_train(int epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.base_lr = 1e-3;
  return t;
}

const std::vector<Scene>& tiny_scenes() {
  static const auto s = generate_dataset(12, 5, 32);
  return s;
}

std::string log_text(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) out += format_epoch_log(e) + "\n";
  return out;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("crossvlt_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Schedule, PolynomialDecay) {
  EXPECT_EQ(poly_lr(3e-4, 0, 100, 0.9), 3e-4);
  EXPECT_EQ(poly_lr(3e-4, 100, 100, 0.9), 0.0);
  EXPECT_EQ(poly_lr(3e-4, 150, 100, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(3e-4, 50, 100, 0.9), 1.6077e-4, 1e-8);
  double prev = 1.0;
  for (long t = 0; t <= 100; ++t) {
    const double lr = poly_lr(3e-4, t, 100, 0.9);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW(poly_lr(1.0, 0, 0, 0.9), UsageError);
}

TEST(Optimizer, DecayAppliesToWeightsOnly) {
  detail::ManifestBuilder m;
  m.linear("fc", 2, 3);
  ModelParams<double> p(m.out);
  p.at("fc.weight").setConstant(2.0);
  p.at("fc.bias").setConstant(2.0);
  AdamW opt(p.manifest(), AdamWConfig{0.9, 0.999, 1e-8, 0.1});
  opt.step(p, {}, 0.5);
  EXPECT_TRUE(p.at("fc.weight").isApproxToConstant(2.0 - 0.5 * 0.1 * 2.0, 1e-15));
  EXPECT_TRUE(p.at("fc.bias").isApproxToConstant(2.0, 0.0));

  // First step with a gradient moves each entry by lr * sign(g).
  ModelParams<double> q(m.out);
  AdamW plain(q.manifest(), AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  std::map<std::string, Matrix<double>> g;
  g["fc.bias"] = Matrix<double>::Constant(1, 3, -4.0);
  plain.step(q, g, 0.01);
  EXPECT_TRUE(q.at("fc.bias").isApproxToConstant(0.01, 1e-8));
  EXPECT_EQ(plain.steps(), 1);
}

TEST(TrainConfigKeys, RoundTripAndErrors) {
  TrainConfig t;
  t.epochs = 7;
  t.base_lr = 2.5e-4;
  t.augment_recolor = true;
  TrainConfig back;
  EXPECT_TRUE(apply_key_values(back, to_key_values(t)).empty());
  EXPECT_EQ(back, t);
  EXPECT_EQ(apply_key_values(back, {{"nonsense", "1"}}), std::vector<std::string>{"nonsense"});
  EXPECT_THROW(apply_key_values(back, {{"augment_mirror", "maybe"}}), ConfigError);
  t.batch_size = 0;
  EXPECT_THROW(require_valid(t), ConfigError);

  ModelConfig mc;
  TrainConfig tc;
  apply_config_file({{"lambda_align", "0.25"}, {"epochs", "3"}}, mc, tc);
  EXPECT_EQ(mc.lambda_align, 0.25);
  EXPECT_EQ(tc.epochs, 3);
  EXPECT_THROW(apply_config_file({{"bogus", "1"}}, mc, tc), ConfigError);
}

TEST(Training, EpochLogIsDeterministic) {
  const auto c = oracle::small_config();
  const auto a = train(c, quick_train(), tiny_scenes());
  const auto b = train(c, quick_train(), tiny_scenes());
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_EQ(log_text(a.log), log_text(b.log));
  EXPECT_EQ(a.checkpoint.params, b.checkpoint.params);
  EXPECT_EQ(a.log.back().step, 6);
  auto other = quick_train();
  other.shuffle_seed = 1;
  EXPECT_NE(log_text(train(c, other, tiny_scenes()).log), log_text(a.log));
}

TEST(Training, WritesEpochCsv) {
  const auto dir = scratch("epoch_csv");
  TrainOptions opt;
  opt.log_path = (dir / "log.csv").string();
  int calls = 0;
  opt.on_epoch = [&](const EpochLog& e, const Checkpoint& ck) {
    ++calls;
    EXPECT_EQ(ck.epoch, e.epoch);
  };
  train(oracle::small_config(), quick_train(), tiny_scenes(), {}, opt);
  EXPECT_EQ(calls, 2);
  std::ifstream is(opt.log_path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kEpochLogHeader);
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 2);
}

TEST(Training, TaskLossDropsOnTinySet) {
  const auto r = train(oracle::small_config(), quick_train(6), tiny_scenes());
  EXPECT_LT(r.log.back().task, r.log.front().task);
  for (const auto& e : r.log) EXPECT_TRUE(std::isfinite(e.total));
}

TEST(Training, NonFiniteLossAbortsWithDiagnostic) {
  const auto dir = scratch("nan_dump");
  auto t = quick_train();
  t.base_lr = 1e30;
  TrainOptions opt;
  opt.dump_path = (dir / "dump.txt").string();
  try {
    train(oracle::small_config(), t, tiny_scenes(), {}, opt);
    FAIL() << "training with lr 1e30 should diverge";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite value at epoch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("scene "), std::string::npos);
  }
  std::ifstream is(opt.dump_path);
  std::string first;
  std::getline(is, first);
  EXPECT_EQ(first.rfind("non-finite value", 0), 0u);
}

TEST(Training, RejectsMismatchedData) {
  auto c = oracle::small_config();
  c.image_size = 64;
  EXPECT_THROW(train(c, quick_train(), tiny_scenes()), ShapeError);
  EXPECT_THROW(train(oracle::small_config(), quick_train(), {}), DataError);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const auto dir = scratch("ckpt");
  const auto c = oracle::small_config();
  const auto r = train(c, quick_train(), tiny_scenes());
  const auto path = (dir / "model.ckpt").string();
  save_checkpoint(path, r.checkpoint);
  const auto back = load_checkpoint(path, &c);
  EXPECT_EQ(back.model, r.checkpoint.model);
  EXPECT_EQ(back.train, r.checkpoint.train);
  EXPECT_EQ(back.params, r.checkpoint.params);
  EXPECT_EQ(back.step, r.checkpoint.step);
  EXPECT_EQ(back.rng_state, r.checkpoint.rng_state);
  EXPECT_EQ(back.optimizer.steps(), r.checkpoint.optimizer.steps());
  EXPECT_EQ(back.optimizer.first_moments(), r.checkpoint.optimizer.first_moments());
  EXPECT_EQ(back.optimizer.second_moments(), r.checkpoint.optimizer.second_moments());
  EXPECT_TRUE(evaluate_model(back.params, back.model, tiny_scenes()) ==
              evaluate_model(r.checkpoint.params, c, tiny_scenes()));
}

TEST(Checkpoint, RefusesMismatchedModel) {
  const auto dir = scratch("ckpt_refuse");
  auto c = oracle::small_config();
  c.fusion_stages = {4};
  c.align_stages = {};
  const auto r = train(c, quick_train(1), tiny_scenes());
  const auto path = (dir / "baseline.ckpt").string();
  save_checkpoint(path, r.checkpoint);

  const auto full = oracle::small_config();
  try {
    load_checkpoint(path, &full);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("missing vision.stage1.fusion."), std::string::npos) << e.what();
  }
  auto wider = c;
  wider.lang_dim = 16;
  wider.lang_heads = 2;
  try {
    load_checkpoint(path, &wider);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("shape language.embed.tokens"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint((dir / "junk.ckpt").string()), CheckpointError);
  EXPECT_THROW(load_checkpoint((dir / "absent.ckpt").string()), IoError);
}

TEST(Ablation, DirectionalGrid) {
  const auto cells = ablation_grid("directional", oracle::small_config());
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].name, "Full");
  EXPECT_EQ(cells[0].config.fusion_stages, (std::set<int>{1, 2, 3, 4}));
  EXPECT_EQ(cells[0].config.align_stages, (std::set<int>{1, 2, 3, 4}));
  EXPECT_EQ(cells[1].config.fusion_direction, FusionDirection::bidirectional);
  EXPECT_TRUE(cells[1].config.align_stages.empty());
  EXPECT_EQ(cells[2].config.fusion_direction, FusionDirection::vision_only);
  EXPECT_EQ(cells[3].config.fusion_stages, (std::set<int>{4}));
  EXPECT_TRUE(cells[3].config.align_stages.empty());
  for (const auto& c : cells) EXPECT_EQ(c.config.image_size, 32);
  for (const auto& p : ablation_presets()) EXPECT_FALSE(ablation_grid(p).empty()) << p;
  EXPECT_THROW(ablation_grid("nope"), UsageError);
}

TEST(Ablation, IdenticalCellsAgreeAndFailuresAreRecorded) {
  auto cells = ablation_grid("directional", oracle::small_config());
  cells.resize(1);
  cells.push_back(cells[0]);
  cells[1].name = "Full again";
  auto broken = cells[0];
  broken.name = "broken";
  broken.config.vision_heads = {3, 3, 3, 3};
  cells.push_back(broken);
  const auto split = split_dataset(tiny_scenes(), 0.25, 0);
  int calls = 0;
  const auto rows = run_ablation_suite(cells, {0, 1}, quick_train(1), split.train, split.val, {},
                                       [&](const AblationCell&, std::uint64_t, const EvalReport*, const std::string&) {
                                         ++calls;
                                       });
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(calls, 5);
  ASSERT_TRUE(rows[0].ok());
  ASSERT_EQ(rows[0].results.size(), 2u);
  for (int s = 0; s < 2; ++s) EXPECT_TRUE(rows[0].results[s].report == rows[1].results[s].report);
  EXPECT_FALSE(rows[2].ok());
  EXPECT_NE(rows[2].error.find("vision_heads"), std::string::npos) << rows[2].error;

  std::ostringstream csv, text;
  write_ablation_csv(csv, rows);
  write_ablation_text(text, rows);
  EXPECT_NE(csv.str().find("broken,1;2;3;4"), std::string::npos) << csv.str();
  EXPECT_NE(csv.str().find("FAILED: "), std::string::npos);
  EXPECT_NE(text.str().find("Full again"), std::string::npos);

  const auto s = summarize({0.25, 0.5, 0.75});
  EXPECT_EQ(s.mean, 0.5);
  EXPECT_EQ(s.min, 0.25);
  EXPECT_EQ(s.max, 0.75);
}

TEST(Evaluation, TyposAndOutputs) {
  const auto c = oracle::small_config();
  const auto p = init_params<TrainScalar>(c, 0);
  EvalOutputs out;
  EvalOptions opt;
  opt.inject_typos = true;
  opt.batch_size = 5;
  const auto r = evaluate_model(p, c, tiny_scenes(), {}, opt, &out);
  ASSERT_EQ(out.predictions.size(), tiny_scenes().size());
  EXPECT_EQ(r.pr_curve.size(), 101u);
  int changed = 0;
  for (std::size_t i = 0; i < out.expressions.size(); ++i) changed += out.expressions[i] != tiny_scenes()[i].expression;
  EXPECT_EQ(changed, static_cast<int>(tiny_scenes().size()));
  const auto emb = collect_embeddings(p, c, tiny_scenes());
  EXPECT_EQ(emb.size(), tiny_scenes().size() * 4);
}
