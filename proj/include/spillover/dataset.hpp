#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "spillover/common.hpp"
#include "spillover/dimension.hpp"

namespace spillover {

struct TripletExample {
  std::string id;
  BiasDimension dimension = BiasDimension::gender;
  std::string context;
  std::string stereotype;
  std::string anti_stereotype;
  std::string unrelated;

  bool operator==(const TripletExample&) const = default;
};

struct DatasetSplit {
  std::vector<TripletExample> train;
  std::vector<TripletExample> dev;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error("failed reading '" + path.string() + "'");
  return ss.str();
}

inline bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

// Unbiased draw in [0, bound) from a 64-bit engine; the standard
// distributions are implementation-defined, this is not.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

}  // namespace detail

// Parses the StereoSet dev-set layout and keeps the intersentence entries
// whose three gold labels are each present exactly once. Bad entries are
// dropped with a warning.
inline std::vector<TripletExample> parse_stereoset(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("malformed StereoSet JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("data") || !doc["data"].is_object() ||
      !doc["data"].contains("intersentence") || !doc["data"]["intersentence"].is_array())
    throw Error("StereoSet JSON lacks data.intersentence array");

  std::vector<TripletExample> out;
  std::size_t position = 0;
  for (const auto& entry : doc["data"]["intersentence"]) {
    ++position;
    const std::string where = "intersentence entry #" + std::to_string(position);
    if (!entry.is_object()) {
      warn(where + ": not an object, dropped");
      continue;
    }
    TripletExample ex;
    ex.id = entry.value("id", std::string{});
    if (ex.id.empty()) {
      warn(where + ": missing id, dropped");
      continue;
    }
    auto dim = try_parse_dimension(entry.value("bias_type", std::string{}));
    if (!dim) {
      warn(where + " (" + ex.id + "): unknown bias_type, dropped");
      continue;
    }
    ex.dimension = *dim;
    ex.context = entry.value("context", std::string{});

    bool seen_s = false, seen_a = false, seen_u = false, bad = false;
    const auto sentences = entry.value("sentences", nlohmann::json::array());
    for (const auto& s : sentences) {
      const std::string label = s.value("gold_label", std::string{});
      const std::string sentence = s.value("sentence", std::string{});
      auto take = [&](bool& seen, std::string& slot) {
        if (seen) bad = true;
        seen = true;
        slot = sentence;
      };
      if (label == "stereotype") take(seen_s, ex.stereotype);
      else if (label == "anti-stereotype") take(seen_a, ex.anti_stereotype);
      else if (label == "unrelated") take(seen_u, ex.unrelated);
      else bad = true;
    }
    if (bad || !seen_s || !seen_a || !seen_u) {
      warn(where + " (" + ex.id + "): duplicate, unknown or missing gold labels, dropped");
      continue;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<TripletExample> load_stereoset(const std::filesystem::path& path) {
  return parse_stereoset(detail::read_file(path));
}

// Drops examples with any empty (or whitespace-only) text field; order kept.
inline std::vector<TripletExample> filter_examples(std::vector<TripletExample> raw) {
  std::erase_if(raw, [](const TripletExample& e) {
    return detail::blank(e.context) || detail::blank(e.stereotype) || detail::blank(e.anti_stereotype) ||
           detail::blank(e.unrelated);
  });
  return raw;
}

inline PerDimension<std::size_t> counts_by_dimension(const std::vector<TripletExample>& examples) {
  PerDimension<std::size_t> counts;
  for (const auto& e : examples) ++counts[e.dimension];
  return counts;
}

inline std::vector<TripletExample> examples_for(const std::vector<TripletExample>& examples, BiasDimension dim) {
  std::vector<TripletExample> out;
  std::copy_if(examples.begin(), examples.end(), std::back_inserter(out),
               [dim](const TripletExample& e) { return e.dimension == dim; });
  return out;
}

// Seeded Fisher-Yates shuffle, then the first ceil(n/9) items become dev.
inline DatasetSplit split_for_editing(std::vector<TripletExample> examples, std::uint64_t seed) {
  if (examples.size() < 2) throw Error("split_for_editing needs at least 2 examples");
  const auto dim = examples.front().dimension;
  for (const auto& e : examples)
    if (e.dimension != dim) throw Error("split_for_editing: examples span more than one dimension");

  std::mt19937_64 rng(seed);
  for (std::size_t i = examples.size() - 1; i > 0; --i)
    std::swap(examples[i], examples[detail::bounded(rng, i + 1)]);

  const std::size_t n_dev = (examples.size() + 8) / 9;
  DatasetSplit split;
  split.dev.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_dev));
  split.train.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_dev), examples.end());
  return split;
}

// --- JSON-lines interchange -------------------------------------------------

inline nlohmann::json to_json(const TripletExample& e) {
  return {{"id", e.id},
          {"dimension", to_string(e.dimension)},
          {"context", e.context},
          {"stereotype", e.stereotype},
          {"anti_stereotype", e.anti_stereotype},
          {"unrelated", e.unrelated}};
}

inline TripletExample triplet_from_json(const nlohmann::json& j) {
  TripletExample e;
  e.id = j.at("id").get<std::string>();
  e.dimension = parse_dimension(j.at("dimension").get<std::string>());
  e.context = j.at("context").get<std::string>();
  e.stereotype = j.at("stereotype").get<std::string>();
  e.anti_stereotype = j.at("anti_stereotype").get<std::string>();
  e.unrelated = j.at("unrelated").get<std::string>();
  return e;
}

inline std::string write_jsonl(const std::vector<TripletExample>& examples) {
  std::string out;
  for (const auto& e : examples) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<TripletExample> parse_jsonl(const std::string& text) {
  std::vector<TripletExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    try {
      out.push_back(triplet_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error("triplet JSONL line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!ids.insert(out.back().id).second)
      throw Error("triplet JSONL line " + std::to_string(lineno) + ": duplicate id " + out.back().id);
  }
  return out;
}

// Loads either layout (".jsonl" selects the interchange format) and filters.
inline std::vector<TripletExample> load_dataset(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  if (path.extension() == ".jsonl") return filter_examples(parse_jsonl(text));
  return filter_examples(parse_stereoset(text));
}

}  // namespace spillover
