#pragma once

// Deterministic synthetic referring-expression scenes: coloured circles,
// squares and triangles on a dark background, each with a templated
// expression that identifies exactly one object.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crossvlt/errors.hpp"
#include "crossvlt/image.hpp"
#include "crossvlt/tensor.hpp"

namespace crossvlt {

enum class Shape { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class Size { small, large };
enum class Relation { left, right, above, below };

inline constexpr std::array<Shape, 3> kShapes{Shape::circle, Shape::square, Shape::triangle};
inline constexpr std::array<Color, 4> kColors{Color::red, Color::green, Color::blue, Color::yellow};
inline constexpr std::array<Relation, 4> kRelations{Relation::left, Relation::right, Relation::above,
                                                    Relation::below};

inline const char* to_string(Shape s) {
  switch (s) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    default: return "triangle";
  }
}
inline const char* to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    default: return "yellow";
  }
}
inline const char* to_string(Size s) { return s == Size::small ? "small" : "large"; }
inline const char* to_string(Relation r) {
  switch (r) {
    case Relation::left: return "left";
    case Relation::right: return "right";
    case Relation::above: return "above";
    default: return "below";
  }
}

/// 8-bit RGB of each colour; pixel values are exactly k/255 so PNG round
/// trips are lossless.
inline std::array<std::uint8_t, 3> rgb(Color c) {
  switch (c) {
    case Color::red: return {220, 40, 40};
    case Color::green: return {40, 190, 70};
    case Color::blue: return {50, 80, 230};
    default: return {225, 205, 45};
  }
}
inline constexpr std::uint8_t kBackground = 16;

struct SceneObject {
  Shape shape = Shape::circle;
  Color color = Color::red;
  Size size = Size::small;
  double cx = 0;
  double cy = 0;
  double radius = 0;

  bool operator==(const SceneObject&) const = default;
};

/// Pixel (x, y) is covered when its centre lies inside the shape. Squares
/// have half-side `radius`; triangles point up with apex radius above the
/// centre and a base of width 2*radius at radius below it.
inline bool covers(const SceneObject& o, int x, int y) {
  const double px = x + 0.5 - o.cx;
  const double py = y + 0.5 - o.cy;
  switch (o.shape) {
    case Shape::circle: return px * px + py * py <= o.radius * o.radius;
    case Shape::square: return std::abs(px) <= o.radius && std::abs(py) <= o.radius;
    default: {
      if (py < -o.radius || py > o.radius) return false;
      return std::abs(px) <= (py + o.radius) / 2.0;
    }
  }
}

inline Mask rasterize(const SceneObject& o, int size) {
  Mask m(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) m.at(y, x) = covers(o, x, y) ? 1 : 0;
  return m;
}

/// Relations compare centres with a dead zone; a pair closer than the dead
/// zone along the relevant axis stands in no relation.
inline constexpr double kRelationDeadZone = 4.0;

inline bool related(Relation r, const SceneObject& a, const SceneObject& b) {
  switch (r) {
    case Relation::left: return a.cx < b.cx - kRelationDeadZone;
    case Relation::right: return a.cx > b.cx + kRelationDeadZone;
    case Relation::above: return a.cy < b.cy - kRelationDeadZone;
    default: return a.cy > b.cy + kRelationDeadZone;
  }
}

struct Scene {
  int id = 0;
  Image image;
  std::vector<SceneObject> objects;
  int target_index = 0;
  std::string expression;
  Mask gt_mask;

  const SceneObject& target() const { return objects.at(static_cast<std::size_t>(target_index)); }
  bool operator==(const Scene&) const = default;
};

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer

inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kClsToken = "[CLS]";

/// Closed word list of the expression grammar. Ids are positions in
/// words(); [PAD] is 0 and [CLS] is 1.
class Vocab {
 public:
  Vocab() {
    words_ = {kPadToken, kClsToken, "small", "large"};
    for (auto c : kColors) words_.emplace_back(to_string(c));
    for (auto s : kShapes) words_.emplace_back(to_string(s));
    for (auto r : kRelations) words_.emplace_back(to_string(r));
    words_.emplace_back("of");
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<int>(i);
  }
  explicit Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!ids_.emplace(words_[i], static_cast<int>(i)).second) {
        throw DataError("duplicate vocabulary word '" + words_[i] + "'");
      }
    }
    if (id_or(kPadToken) != 0 || id_or(kClsToken) != 1) {
      throw DataError("vocabulary must start with [PAD], [CLS]");
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  int pad_id() const { return 0; }
  int cls_id() const { return 1; }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw DataError("unknown word '" + w + "'");
    return it->second;
  }
  bool contains(const std::string& w) const { return ids_.count(w) != 0; }

 private:
  int id_or(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? -1 : it->second;
  }
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

struct TokenSequence {
  std::vector<int> ids;
  KeyPadding padding;  // 1 at [PAD]
};

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

/// [CLS] + word ids + [PAD] fill to `max_tokens`.
inline TokenSequence tokenize(const Vocab& vocab, const std::string& expression, int max_tokens) {
  const auto words = split_words(expression);
  if (words.empty()) throw DataError("tokenize: empty expression");
  if (static_cast<int>(words.size()) > max_tokens - 1) {
    throw DataError("tokenize: " + std::to_string(words.size()) + " words exceed limit of " +
                    std::to_string(max_tokens - 1));
  }
  TokenSequence t;
  t.ids.assign(static_cast<std::size_t>(max_tokens), vocab.pad_id());
  t.padding.assign(static_cast<std::size_t>(max_tokens), 1);
  t.ids[0] = vocab.cls_id();
  t.padding[0] = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const int id = vocab.id(words[i]);
    if (id == vocab.pad_id() || id == vocab.cls_id()) throw DataError("tokenize: special token in text");
    t.ids[i + 1] = id;
    t.padding[i + 1] = 0;
  }
  return t;
}

inline std::string detokenize(const Vocab& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == vocab.pad_id() || id == vocab.cls_id()) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene generation

struct GeneratorOptions {
  int min_objects = 2;
  int max_objects = 3;
  /// Radius ranges in pixels at 64px; scaled linearly with image size.
  double small_min = 7.0, small_max = 9.0;
  double large_min = 11.5, large_max = 14.0;
  /// Probability of naming the size even when colour and shape suffice.
  double optional_size_rate = 0.25;
  int margin = 2;
  int attempts_per_scene = 2000;
};

namespace detail {

inline bool attr_match(const SceneObject& o, Color c, Shape s) { return o.color == c && o.shape == s; }

/// Number of objects matching `<c> <s> <rel> of <ac> <as>`.
inline int count_relational(const std::vector<SceneObject>& objs, Color c, Shape s, Relation r, Color ac,
                            Shape as, int* match) {
  int n = 0;
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (!attr_match(objs[i], c, s)) continue;
    bool ok = false;
    for (std::size_t j = 0; j < objs.size(); ++j) {
      if (j != i && attr_match(objs[j], ac, as) && related(r, objs[i], objs[j])) ok = true;
    }
    if (ok) {
      ++n;
      if (match) *match = static_cast<int>(i);
    }
  }
  return n;
}

/// Shortest template expression that singles out `t`, or empty if none does.
inline std::string describe(const std::vector<SceneObject>& objs, int t, std::mt19937_64& rng,
                            double optional_size_rate) {
  const SceneObject& target = objs[static_cast<std::size_t>(t)];
  int same_cs = 0, same_scs = 0;
  for (const auto& o : objs) {
    if (attr_match(o, target.color, target.shape)) {
      ++same_cs;
      if (o.size == target.size) ++same_scs;
    }
  }
  const std::string cs = std::string(to_string(target.color)) + " " + to_string(target.shape);
  if (same_cs == 1) {
    std::uniform_real_distribution<double> u(0, 1);
    if (u(rng) < optional_size_rate) return std::string(to_string(target.size)) + " " + cs;
    return cs;
  }
  if (same_scs == 1) return std::string(to_string(target.size)) + " " + cs;

  std::vector<std::pair<Relation, int>> options;
  for (auto r : kRelations)
    for (std::size_t a = 0; a < objs.size(); ++a)
      if (static_cast<int>(a) != t) options.emplace_back(r, static_cast<int>(a));
  std::shuffle(options.begin(), options.end(), rng);
  for (const auto& [r, a] : options) {
    const auto& anchor = objs[static_cast<std::size_t>(a)];
    if (!related(r, target, anchor)) continue;
    int match = -1;
    if (count_relational(objs, target.color, target.shape, r, anchor.color, anchor.shape, &match) == 1 &&
        match == t) {
      return cs + " " + to_string(r) + " of " + to_string(anchor.color) + " " + to_string(anchor.shape);
    }
  }
  return {};
}

inline Mask dilate(const Mask& m, int margin) {
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      for (int dy = -margin; dy <= margin; ++dy)
        for (int dx = -margin; dx <= margin; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < m.height && xx >= 0 && xx < m.width) out.at(yy, xx) = 1;
        }
    }
  return out;
}

inline bool overlaps(const Mask& a, const Mask& b) {
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    if (a.bits[i] && b.bits[i]) return true;
  }
  return false;
}

inline Image render(const std::vector<SceneObject>& objs, int size) {
  Image img(size, size);
  const float bg = kBackground / 255.0f;
  std::fill(img.pixels.begin(), img.pixels.end(), bg);
  for (const auto& o : objs) {
    const auto col = rgb(o.color);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (covers(o, x, y))
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[static_cast<std::size_t>(c)] / 255.0f;
  }
  return img;
}

}  // namespace detail

/// Generates scene `id` from its own RNG stream, so scenes can be produced
/// independently and in any order.
inline Scene generate_scene(int id, std::uint64_t seed, int image_size, const GeneratorOptions& opt = {}) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id)};
  std::mt19937_64 rng(seq);
  const double scale = image_size / 64.0;
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };

  for (int attempt = 0; attempt < opt.attempts_per_scene; ++attempt) {
    const int count = opt.min_objects + pick(opt.max_objects - opt.min_objects + 1);
    std::vector<SceneObject> attrs(static_cast<std::size_t>(count));
    for (auto& o : attrs) {
      o.shape = kShapes[static_cast<std::size_t>(pick(3))];
      o.color = kColors[static_cast<std::size_t>(pick(4))];
      o.size = pick(2) == 0 ? Size::small : Size::large;
    }
    // Object 1 shares the colour or the shape of the target (object 0).
    if (pick(2) == 0) attrs[1].color = attrs[0].color;
    else attrs[1].shape = attrs[0].shape;

    std::vector<SceneObject> placed;
    std::vector<Mask> halo;
    bool ok = true;
    for (auto o : attrs) {
      const double r = o.size == Size::small ? uni(opt.small_min, opt.small_max) * scale
                                             : uni(opt.large_min, opt.large_max) * scale;
      o.radius = r;
      bool fit = false;
      for (int tries = 0; tries < 50 && !fit; ++tries) {
        o.cx = uni(r + 1, image_size - r - 1);
        o.cy = uni(r + 1, image_size - r - 1);
        const Mask m = rasterize(o, image_size);
        fit = m.count() > 0;
        for (const auto& h : halo) fit = fit && !detail::overlaps(h, m);
        if (fit) {
          placed.push_back(o);
          halo.push_back(detail::dilate(m, opt.margin));
        }
      }
      if (!fit) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;

    const std::string expr = detail::describe(placed, 0, rng, opt.optional_size_rate);
    if (expr.empty()) continue;

    std::vector<int> order(placed.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Scene s;
    s.id = id;
    for (std::size_t k = 0; k < order.size(); ++k) {
      s.objects.push_back(placed[static_cast<std::size_t>(order[k])]);
      if (order[k] == 0) s.target_index = static_cast<int>(k);
    }
    s.expression = expr;
    s.image = detail::render(s.objects, image_size);
    s.gt_mask = rasterize(s.target(), image_size);
    return s;
  }
  throw GenerationError("scene " + std::to_string(id) + " (seed " + std::to_string(seed) + ", size " +
                        std::to_string(image_size) + "): no valid layout after " +
                        std::to_string(opt.attempts_per_scene) + " attempts");
}

inline std::vector<Scene> generate_dataset(int count, std::uint64_t seed, int image_size,
                                           const GeneratorOptions& opt = {}) {
  if (count < 1) throw UsageError("generate_dataset: count must be >= 1");
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(i, seed, image_size, opt));
  return out;
}

struct DatasetSplit {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

/// Deterministic shuffle-split; the validation side gets round(n * fraction).
inline DatasetSplit split_dataset(const std::vector<Scene>& scenes, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw UsageError("split_dataset: val_fraction must lie in (0, 1)");
  }
  const auto n = static_cast<long>(scenes.size());
  const long n_val = std::lround(static_cast<double>(n) * val_fraction);
  if (n_val <= 0 || n_val >= n) throw UsageError("split_dataset: a split would be empty");
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  DatasetSplit s;
  for (long i = 0; i < n; ++i) {
    (i < n_val ? s.val : s.train).push_back(scenes[order[static_cast<std::size_t>(i)]]);
  }
  return s;
}

/// Re-renders a scene from an edited object list; the expression is given.
inline Scene rerender(const Scene& src, std::vector<SceneObject> objects, std::string expression) {
  Scene s;
  s.id = src.id;
  s.objects = std::move(objects);
  s.target_index = src.target_index;
  s.expression = std::move(expression);
  s.image = detail::render(s.objects, src.image.width);
  s.gt_mask = rasterize(s.target(), src.image.width);
  return s;
}

inline std::string rewrite_words(const std::string& expression, const std::map<std::string, std::string>& subst) {
  std::string out;
  for (const auto& w : split_words(expression)) {
    auto it = subst.find(w);
    out += (out.empty() ? "" : " ") + (it == subst.end() ? w : it->second);
  }
  return out;
}

/// Left-right mirror image; "left" and "right" swap in the expression. All
/// three shapes are mirror-symmetric, so masks stay exact.
inline Scene mirror_scene(const Scene& src) {
  auto objs = src.objects;
  for (auto& o : objs) o.cx = src.image.width - o.cx;
  return rerender(src, std::move(objs), rewrite_words(src.expression, {{"left", "right"}, {"right", "left"}}));
}

/// Applies a colour permutation (colour k becomes perm[k]) to objects and
/// expression. A bijection on colours keeps the target unique.
inline Scene recolor_scene(const Scene& src, const std::array<Color, 4>& perm) {
  auto objs = src.objects;
  std::map<std::string, std::string> subst;
  for (std::size_t k = 0; k < kColors.size(); ++k) subst[to_string(kColors[k])] = to_string(perm[k]);
  for (auto& o : objs) o.color = perm[static_cast<std::size_t>(o.color)];
  return rerender(src, std::move(objs), rewrite_words(src.expression, subst));
}

/// Replaces one word of the expression by a different grammar word.
inline std::string inject_typo(const Vocab& vocab, const std::string& expression, std::mt19937_64& rng) {
  auto words = split_words(expression);
  if (words.empty()) return expression;
  const auto pos = std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng);
  std::string replacement;
  do {
    replacement = vocab.word(std::uniform_int_distribution<int>(2, vocab.size() - 1)(rng));
  } while (replacement == words[pos]);
  words[pos] = replacement;
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace crossvlt
