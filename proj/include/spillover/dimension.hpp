#pragma once

#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include "spillover/common.hpp"

namespace spillover {

// Declaration order is the iteration order everywhere.
enum class BiasDimension { gender = 0, profession = 1, race = 2, religion = 3 };

inline constexpr std::array<BiasDimension, 4> kAllDimensions = {
    BiasDimension::gender, BiasDimension::profession, BiasDimension::race, BiasDimension::religion};

inline constexpr std::size_t index_of(BiasDimension d) { return static_cast<std::size_t>(d); }

inline constexpr std::string_view to_string(BiasDimension d) {
  switch (d) {
    case BiasDimension::gender: return "gender";
    case BiasDimension::profession: return "profession";
    case BiasDimension::race: return "race";
    case BiasDimension::religion: return "religion";
  }
  return "unknown";
}

// Case-insensitive; returns nullopt for anything outside the four labels.
inline std::optional<BiasDimension> try_parse_dimension(std::string_view s) {
  std::string lower(s);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (auto d : kAllDimensions)
    if (lower == to_string(d)) return d;
  return std::nullopt;
}

inline BiasDimension parse_dimension(std::string_view s) {
  if (auto d = try_parse_dimension(s)) return *d;
  throw Error("unknown bias dimension '" + std::string(s) + "'");
}

// Dense per-dimension table, indexed in the fixed order.
template <typename T>
struct PerDimension {
  std::array<T, 4> values{};

  T& operator[](BiasDimension d) { return values[index_of(d)]; }
  const T& operator[](BiasDimension d) const { return values[index_of(d)]; }
  bool operator==(const PerDimension&) const = default;
};

}  // namespace spillover
