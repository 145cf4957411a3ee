#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <sstream>

#include "oracles.hpp"

using namespace crossvlt;

namespace {

/// Independent reading of the expression grammar:
///   [size] color shape [(left|right|above|below) of color shape]
/// Returns the indices of all objects satisfying it.
std::vector<int> objects_satisfying(const std::string& expression, const std::vector<SceneObject>& objs) {
  std::istringstream is(expression);
  std::vector<std::string> w;
  for (std::string s; is >> s;) w.push_back(s);
  std::size_t k = 0;
  std::string size;
  if (w[k] == "small" || w[k] == "large") size = w[k++];
  const std::string color = w.at(k++), shape = w.at(k++);
  std::string rel, acolor, ashape;
  if (k < w.size()) {
    rel = w.at(k++);
    EXPECT_EQ(w.at(k++), "of");
    acolor = w.at(k++);
    ashape = w.at(k++);
  }
  EXPECT_EQ(k, w.size()) << expression;
  auto attrs = [](const SceneObject& o, const std::string& c, const std::string& s) {
    return c == to_string(o.color) && s == to_string(o.shape);
  };
  auto holds = [&](const SceneObject& a, const SceneObject& b) {
    if (rel == "left") return b.cx - a.cx > 4.0;
    if (rel == "right") return a.cx - b.cx > 4.0;
    if (rel == "above") return b.cy - a.cy > 4.0;
    return a.cy - b.cy > 4.0;
  };
  std::vector<int> out;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const auto& o = objs[i];
    if (!attrs(o, color, shape)) continue;
    if (!size.empty() && size != to_string(o.size)) continue;
    if (!rel.empty()) {
      bool any = false;
      for (std::size_t j = 0; j < objs.size(); ++j) {
        if (j != i && attrs(objs[j], acolor, ashape) && holds(o, objs[j])) any = true;
      }
      if (!any) continue;
    }
    out.push_back(static_cast<int>(i));
  }
  return out;
}

}  // namespace

TEST(SynthData, DeterministicForSameSeed) {
  const auto a = generate_dataset(8, 7, 64);
  const auto b = generate_dataset(8, 7, 64);
  EXPECT_EQ(a, b);
  const auto c = generate_dataset(8, 8, 64);
  EXPECT_NE(a[0].expression + a[1].expression + a[2].expression, c[0].expression + c[1].expression + c[2].expression);
}

TEST(SynthData, ScenesAreIndependentOfCount) {
  const auto a = generate_dataset(4, 3, 64);
  const auto b = generate_dataset(9, 3, 64);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(SynthData, ExpressionSinglesOutTarget) {
  const auto scenes = generate_dataset(300, 11, 64);
  for (const auto& s : scenes) {
    const auto hits = objects_satisfying(s.expression, s.objects);
    ASSERT_EQ(hits.size(), 1u) << "scene " << s.id << ": " << s.expression;
    EXPECT_EQ(hits[0], s.target_index) << s.expression;
  }
}

TEST(SynthData, SceneInvariants) {
  const auto scenes = generate_dataset(200, 12, 64);
  for (const auto& s : scenes) {
    ASSERT_GE(s.objects.size(), 2u);
    EXPECT_GT(s.gt_mask.count(), 0);
    EXPECT_EQ(s.gt_mask, rasterize(s.target(), 64));
    const auto& t = s.target();
    bool shares = false;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      if (static_cast<int>(i) == s.target_index) continue;
      shares |= s.objects[i].color == t.color || s.objects[i].shape == t.shape;
    }
    EXPECT_TRUE(shares) << s.id;
    // Pairwise separation of at least 2 px (Chebyshev) between object masks.
    for (std::size_t i = 0; i < s.objects.size(); ++i)
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
        const auto a = rasterize(s.objects[i], 64), b = rasterize(s.objects[j], 64);
        for (int y = 0; y < 64; ++y)
          for (int x = 0; x < 64; ++x) {
            if (!a.at(y, x)) continue;
            for (int dy = -2; dy <= 2; ++dy)
              for (int dx = -2; dx <= 2; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy >= 0 && yy < 64 && xx >= 0 && xx < 64) {
                  ASSERT_FALSE(b.at(yy, xx)) << s.id;
                }
              }
          }
      }
  }
}

TEST(SynthData, StatisticsReproducible) {
  auto histogram = [](const std::vector<Scene>& v) {
    std::map<std::string, int> h;
    for (const auto& s : v) {
      for (const auto& o : s.objects) {
        h[std::string("shape.") + to_string(o.shape)]++;
        h[std::string("color.") + to_string(o.color)]++;
        h[std::string("size.") + to_string(o.size)]++;
      }
      h["objects." + std::to_string(s.objects.size())]++;
      h["words." + std::to_string(split_words(s.expression).size())]++;
    }
    return h;
  };
  const auto a = histogram(generate_dataset(64, 5, 64));
  EXPECT_EQ(a, histogram(generate_dataset(64, 5, 64)));
  EXPECT_GT(a.at("words.6"), 0);  // relational expressions occur
}

TEST(SynthData, CircleAreaWithinTenPercent) {
  for (double r = 5.0; r <= 20.0; r += 0.75) {
    SceneObject o{Shape::circle, Color::red, Size::small, 32.3, 31.8, r};
    const double area = static_cast<double>(rasterize(o, 64).count());
    EXPECT_NEAR(area / (std::numbers::pi * r * r), 1.0, 0.1) << r;
  }
}

TEST(SynthData, RelationsAntisymmetric) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 64);
  for (int i = 0; i < 2000; ++i) {
    SceneObject a, b;
    a.cx = u(rng), a.cy = u(rng), b.cx = u(rng), b.cy = u(rng);
    for (auto r : kRelations) EXPECT_FALSE(related(r, a, b) && related(r, b, a));
    EXPECT_EQ(related(Relation::left, a, b), related(Relation::right, b, a));
    EXPECT_EQ(related(Relation::above, a, b), related(Relation::below, b, a));
  }
  SceneObject a, b;
  a.cx = 10;
  b.cx = 13.9;
  EXPECT_FALSE(related(Relation::left, a, b));  // inside the dead zone
  b.cx = 14.1;
  EXPECT_TRUE(related(Relation::left, a, b));
}

TEST(SynthData, ImageShowsObjectColours) {
  const auto s = generate_scene(0, 1, 64);
  const auto col = rgb(s.target().color);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (s.gt_mask.at(y, x)) {
        EXPECT_FLOAT_EQ(s.image.at(0, y, x), col[0] / 255.0f);
      }
}

TEST(SynthData, MirrorAndRecolorKeepExpressionsTrue) {
  const auto scenes = generate_dataset(100, 13, 64);
  const std::array<Color, 4> perm{Color::blue, Color::yellow, Color::red, Color::green};
  for (const auto& s : scenes) {
    for (const auto& t : {mirror_scene(s), recolor_scene(s, perm)}) {
      const auto hits = objects_satisfying(t.expression, t.objects);
      ASSERT_EQ(hits.size(), 1u) << t.expression;
      EXPECT_EQ(hits[0], t.target_index);
      EXPECT_EQ(t.gt_mask.count(), s.gt_mask.count());
    }
    const auto m = mirror_scene(s);
    int differ = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) differ += m.gt_mask.at(y, x) != s.gt_mask.at(y, 63 - x);
    EXPECT_LE(differ, 2) << s.id;
  }
}

TEST(SynthData, GenerationBudgetExhausted) {
  GeneratorOptions opt;
  opt.small_min = opt.large_min = 30;
  opt.small_max = opt.large_max = 31;
  opt.attempts_per_scene = 5;
  EXPECT_THROW(generate_scene(0, 0, 64, opt), GenerationError);
  EXPECT_THROW(generate_dataset(0, 0, 64), UsageError);
}

TEST(Vocab, Bijective) {
  const Vocab v;
  EXPECT_EQ(v.size(), 16);
  EXPECT_EQ(v.word(v.pad_id()), "[PAD]");
  EXPECT_EQ(v.word(v.cls_id()), "[CLS]");
  for (int i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.word(i)), i);
  EXPECT_THROW(Vocab({"[PAD]", "[CLS]", "red", "red"}), DataError);
}

TEST(Tokenizer, Examples) {
  const Vocab v;
  const auto t = tokenize(v, "red circle", 5);
  EXPECT_EQ(t.ids, (std::vector<int>{v.cls_id(), v.id("red"), v.id("circle"), v.pad_id(), v.pad_id()}));
  EXPECT_EQ(t.padding, (KeyPadding{0, 0, 0, 1, 1}));
  EXPECT_THROW(tokenize(v, "", 5), DataError);
  EXPECT_THROW(tokenize(v, "   ", 5), DataError);
  EXPECT_THROW(tokenize(v, "red purple circle", 5), DataError);
  EXPECT_THROW(tokenize(v, "small red circle left of", 5), DataError);
}

TEST(Tokenizer, RoundTripAllGrammarStrings) {
  const Vocab v;
  int n = 0;
  for (const char* size : {"", "small ", "large "})
    for (auto c : kColors)
      for (auto s : kShapes) {
        const std::string base = std::string(size) + to_string(c) + " " + to_string(s);
        EXPECT_EQ(detokenize(v, tokenize(v, base, 12).ids), base);
        ++n;
        if (*size) continue;
        for (auto r : kRelations)
          for (auto ac : kColors)
            for (auto as : kShapes) {
              const std::string e = base + " " + to_string(r) + " of " + to_string(ac) + " " + to_string(as);
              EXPECT_EQ(detokenize(v, tokenize(v, e, 12).ids), e);
              ++n;
            }
      }
  EXPECT_EQ(n, 36 + 12 * 48);
}

TEST(Split, SizesAndDisjointness) {
  const auto scenes = generate_dataset(10, 1, 32);
  const auto s = split_dataset(scenes, 0.2, 4);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.val.size(), 2u);
  std::multiset<int> ids;
  for (const auto& x : s.train) ids.insert(x.id);
  for (const auto& x : s.val) ids.insert(x.id);
  EXPECT_EQ(ids, (std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
  const auto again = split_dataset(scenes, 0.2, 4);
  EXPECT_EQ(again.val, s.val);
  EXPECT_THROW(split_dataset(scenes, 0.01, 0), UsageError);
  EXPECT_THROW(split_dataset(scenes, 1.0, 0), UsageError);
}

TEST(Typos, ChangeExactlyOneWord) {
  const Vocab v;
  std::mt19937_64 rng(3);
  for (const auto& s : generate_dataset(30, 2, 32)) {
    const auto a = split_words(s.expression);
    const auto b = split_words(inject_typo(v, s.expression, rng));
    ASSERT_EQ(a.size(), b.size());
    int diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
    EXPECT_EQ(diff, 1);
  }
}

TEST(DatasetIO, WriteReadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "crossvlt_dataset_io";
  std::filesystem::remove_all(dir);
  const auto scenes = generate_dataset(6, 4, 32);
  write_dataset(dir.string(), scenes);
  EXPECT_TRUE(std::filesystem::exists(dir / "images" / "0003.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "masks" / "0005.png"));
  const auto back = read_dataset(dir.string());
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(back[i].expression, scenes[i].expression);
    EXPECT_EQ(back[i].objects, scenes[i].objects);
    EXPECT_EQ(back[i].target_index, scenes[i].target_index);
    EXPECT_EQ(back[i].gt_mask, scenes[i].gt_mask);
    for (std::size_t k = 0; k < scenes[i].image.pixels.size(); ++k) {
      EXPECT_NEAR(back[i].image.pixels[k], scenes[i].image.pixels[k], 0.5 / 255);
    }
  }
  EXPECT_EQ(read_vocab((dir / "vocab.txt").string()).words(), Vocab{}.words());
  std::filesystem::remove_all(dir);
}
