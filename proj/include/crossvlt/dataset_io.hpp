#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "crossvlt/png_io.hpp"
#include "crossvlt/synthdata.hpp"

namespace crossvlt {

namespace fs = std::filesystem;

inline std::string scene_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", id);
  return buf;
}

template <class E, std::size_t N>
E parse_enum(const std::string& s, const std::array<E, N>& all, const char* what) {
  for (E e : all) {
    if (s == to_string(e)) return e;
  }
  throw DataError(std::string("unknown ") + what + " '" + s + "'");
}

inline nlohmann::json scene_record(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"shape", to_string(o.shape)},
                    {"color", to_string(o.color)},
                    {"size", to_string(o.size)},
                    {"center", {o.cx, o.cy}},
                    {"radius", o.radius}});
  }
  return {{"id", s.id}, {"expression", s.expression}, {"objects", objs}, {"target_index", s.target_index}};
}

inline void write_vocab(const std::string& path, const Vocab& vocab) {
  std::ofstream os(path);
  for (const auto& w : vocab.words()) os << w << '\n';
  if (!os) throw IoError("cannot write " + path);
}

inline Vocab read_vocab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::string> words;
  std::string w;
  while (std::getline(is, w)) {
    if (!w.empty()) words.push_back(w);
  }
  return Vocab(std::move(words));
}

/// Writes images/NNNN.png, masks/NNNN.png, expressions.jsonl and vocab.txt.
inline void write_dataset(const std::string& dir, const std::vector<Scene>& scenes, const Vocab& vocab = {}) {
  const fs::path root(dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ofstream jl(root / "expressions.jsonl");
  if (!jl) throw IoError("cannot write " + (root / "expressions.jsonl").string());
  for (const auto& s : scenes) {
    const std::string stem = scene_stem(s.id) + ".png";
    write_png_rgb((root / "images" / stem).string(), s.image);
    write_png_mask((root / "masks" / stem).string(), s.gt_mask);
    jl << scene_record(s).dump() << '\n';
  }
  write_vocab((root / "vocab.txt").string(), vocab);
  if (!jl) throw IoError("write failure in " + dir);
}

/// Loads a dataset directory written by write_dataset().
inline std::vector<Scene> read_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream jl(root / "expressions.jsonl");
  if (!jl) throw IoError("no expressions.jsonl in " + dir);
  std::vector<Scene> out;
  std::string line;
  int lineno = 0;
  while (std::getline(jl, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Scene s;
      s.id = j.at("id").get<int>();
      s.expression = j.at("expression").get<std::string>();
      s.target_index = j.at("target_index").get<int>();
      for (const auto& o : j.at("objects")) {
        SceneObject so;
        so.shape = parse_enum(o.at("shape").get<std::string>(), kShapes, "shape");
        so.color = parse_enum(o.at("color").get<std::string>(), kColors, "color");
        so.size = o.at("size").get<std::string>() == "small" ? Size::small : Size::large;
        so.cx = o.at("center").at(0).get<double>();
        so.cy = o.at("center").at(1).get<double>();
        so.radius = o.at("radius").get<double>();
        s.objects.push_back(so);
      }
      if (s.target_index < 0 || s.target_index >= static_cast<int>(s.objects.size())) {
        throw DataError("target_index out of range");
      }
      const std::string stem = scene_stem(s.id) + ".png";
      s.image = read_png_rgb((root / "images" / stem).string());
      s.gt_mask = read_png_mask((root / "masks" / stem).string());
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(dir + "/expressions.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError("dataset " + dir + " is empty");
  return out;
}

}  // namespace crossvlt
