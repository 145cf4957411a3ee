#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"

using namespace crossvlt;

namespace {

double softplus(double x) { return std::log1p(std::exp(x)); }

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) / ((a.norm() + ops::kCosineEps) * (b.norm() + ops::kCosineEps));
}

/// Alignment loss of one pixel from the closed form.
double pixel_loss(const Eigen::VectorXd& zv, const Eigen::VectorXd& zl, bool relevant, double tau) {
  const double s = cosine(zv, zl) / tau;
  return relevant ? softplus(-s) : softplus(s);
}

}  // namespace

TEST(Labels, MajorityDownsampleTiesRelevant) {
  Mask m(4, 4);
  m.at(0, 0) = 1;
  m.at(0, 1) = 1;  // top-left 2x2 cell: 2 of 4 -> relevant
  m.at(2, 3) = 1;  // bottom-right cell: 1 of 4 -> irrelevant
  const auto l = downsample_labels(m, {4, 2, 1});
  EXPECT_EQ(l[0], m);
  EXPECT_EQ(l[1].at(0, 0), 1);
  EXPECT_EQ(l[1].at(1, 1), 0);
  EXPECT_EQ(l[1].count(), 1);
  EXPECT_EQ(l[2].at(0, 0), 0);  // 3 of 16
  EXPECT_THROW(downsample_labels(m, {3}), ShapeError);
}

TEST(AlignmentLoss, OrthogonalFeaturesGiveLn2) {
  Tape<double> t;
  Matrix<double> zv(4, 3), zl(1, 3), lt(1, 1);
  zv << 1, 0, 0, 0, 2, 0, 3, 0, 0, 0, -1, 0;
  zl << 0, 0, 5;
  lt << std::log(0.07);
  const std::vector<std::uint8_t> labels{1, 0, 1, 0};
  const auto loss = ops::mean(ops::alignment_pixel_losses(t.constant(zv), t.constant(zl), labels, t.constant(lt), 1));
  EXPECT_NEAR(loss.value()(0, 0), std::log(2.0), 1e-6);
}

TEST(AlignmentLoss, ScalarOracle) {
  // cos = 0.5, tau = 1, relevant: softplus(-0.5) = 0.474077.
  Tape<double> t;
  Matrix<double> zv(1, 2), zl(1, 2), lt(1, 1);
  zv << 1, std::sqrt(3.0);
  zl << 1, 0;
  lt << 0.0;
  const auto l = ops::alignment_pixel_losses(t.constant(zv), t.constant(zl), {1}, t.constant(lt), 1);
  EXPECT_NEAR(l.value()(0, 0), 0.474077, 1e-6);
}

TEST(AlignmentLoss, RandomInstancesMatchClosedForm) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const int B = 2, N = 5, D = 4;
    Matrix<double> zv(B * N, D), zl(B, D), lt(1, 1);
    oracle::fill_normal(zv, rng);
    oracle::fill_normal(zl, rng);
    lt << std::log(0.2 + 0.1 * trial);
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < B * N; ++i) labels.push_back(static_cast<std::uint8_t>(rng() % 2));
    Tape<double> t;
    Matrix<double> cos;
    const auto l = ops::alignment_pixel_losses(t.constant(zv), t.constant(zl), labels, t.constant(lt), B, &cos);
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < N; ++j) {
        const int r = b * N + j;
        const double expect = pixel_loss(zv.row(r).transpose(), zl.row(b).transpose(), labels[r] != 0, std::exp(lt(0, 0)));
        EXPECT_NEAR(l.value()(r, 0), expect, 1e-12);
        EXPECT_NEAR(cos(r, 0), cosine(zv.row(r).transpose(), zl.row(b).transpose()), 1e-12);
      }
  }
}

TEST(AlignmentLoss, AlignedRelevantPixelsCostLess) {
  Tape<double> t;
  Matrix<double> zv(2, 2), zl(1, 2), lt(1, 1);
  zv << 1, 0, -1, 0;
  zl << 1, 0;
  lt << std::log(0.07);
  const auto good = ops::alignment_pixel_losses(t.constant(zv), t.constant(zl), {1, 0}, t.constant(lt), 1);
  const auto bad = ops::alignment_pixel_losses(t.constant(zv), t.constant(zl), {0, 1}, t.constant(lt), 1);
  EXPECT_LT(good.value().sum(), 1e-5);
  EXPECT_GT(bad.value().sum(), 20.0);
}

TEST(AlignmentLoss, StageNormalisation) {
  Tape<double> t;
  StageAlignment<double> a, b;
  a.pixels = 4;
  a.loss = t.constant(Matrix<double>::Constant(1, 1, 1.0));
  b.pixels = 1;
  b.loss = t.constant(Matrix<double>::Constant(1, 1, 3.0));
  EXPECT_NEAR(total_alignment_loss(t, {a, b}, AlignNorm::per_stage_mean).value.value()(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(total_alignment_loss(t, {a, b}, AlignNorm::global_pixel_mean).value.value()(0, 0), 7.0 / 5.0, 1e-15);
  const auto none = total_alignment_loss(t, {}, AlignNorm::per_stage_mean);
  EXPECT_TRUE(none.empty);
  EXPECT_EQ(none.value.value()(0, 0), 0.0);
}

TEST(TaskLoss, ZeroLogitsGiveLn2) {
  Tape<double> t;
  const auto logits = t.constant(Matrix<double>::Zero(6, 1));
  const auto l = task_loss(logits, {1, 0, 0, 1, 1, 0});
  EXPECT_NEAR(l.value()(0, 0), std::log(2.0), 1e-6);
}

TEST(TaskLoss, ClosedFormAndClamp) {
  Tape<double> t;
  Matrix<double> z(3, 1);
  z << 1.0, -2.0, 40.0;
  const auto l = ops::bce_pixel_losses(t.constant(z), {1, 1, 0});
  EXPECT_NEAR(l.value()(0, 0), softplus(-1.0), 1e-12);
  EXPECT_NEAR(l.value()(1, 0), softplus(2.0), 1e-12);
  EXPECT_NEAR(l.value()(2, 0), -std::log(1e-7), 1e-9);
}

TEST(TotalLoss, LambdaAffine) {
  Tape<double> t;
  const auto task = t.constant(Matrix<double>::Constant(1, 1, 0.8125));
  const auto align = t.constant(Matrix<double>::Constant(1, 1, 0.375));
  for (double lambda : {0.0, 0.1, 0.25, 1.0, 2.0}) {
    const double v = total_loss(task, align, lambda).value()(0, 0);
    EXPECT_EQ(v, 0.8125 + lambda * 0.375);
    EXPECT_EQ(v, total_loss(0.8125, 0.375, lambda));
  }
  EXPECT_THROW(total_loss(task, align, -1.0), ConfigError);
}

TEST(TotalLoss, ZeroLambdaContributesNoGradient) {
  auto c = oracle::micro_config();
  c.lambda_align = 0.0;
  const auto p = init_params<double>(c, 7);
  std::mt19937_64 rng(7);
  const auto b = oracle::random_batch(c, 2, rng);
  Tape<double> tape;
  std::map<std::string, ops::BatchStats<double>> stats;
  const ForwardContext<double> ctx{Scope<double>{&tape, &p}, &c, 2, true, &stats};
  const auto out = forward_pipeline(ctx, b.inputs());
  EXPECT_GT(out.align.value()(0, 0), 0.0);  // still logged
  tape.backward(out.total);
  const auto grads = tape.parameter_gradients();
  for (const auto& [path, g] : grads) {
    if (path.rfind("align.", 0) == 0) {
      EXPECT_TRUE(g.isZero()) << path;
    }
  }
}

TEST(Embeddings, ExportFormat) {
  EmbeddingRecord r;
  r.sample_id = "7";
  r.stage = 2;
  r.vision = Matrix<double>::Ones(2, 3);
  r.language = Matrix<double>::Zero(1, 3);
  r.labels = {1, 0};
  std::ostringstream os;
  write_embeddings(os, {r}, 3);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "sample_id\tstage\tindex\tlabel\tz0\tz1\tz2");
  std::getline(is, line);
  EXPECT_EQ(line, "7\t2\t0\trelevant\t1\t1\t1");
  std::getline(is, line);
  EXPECT_EQ(line, "7\t2\t1\tirrelevant\t1\t1\t1");
  std::getline(is, line);
  EXPECT_EQ(line, "7\t2\tCLS\tlanguage\t0\t0\t0");
  std::ostringstream bad;
  EXPECT_THROW(write_embeddings(bad, {r}, 4), ShapeError);
}
