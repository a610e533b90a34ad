#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spillover/backend.hpp"
#include "spillover/common.hpp"
#include "spillover/dimension.hpp"
#include "spillover/linalg.hpp"

namespace spillover {

struct ContrastivePair {
  std::string pole_a;
  std::string pole_b;
  BiasDimension dimension = BiasDimension::gender;

  bool operator==(const ContrastivePair&) const = default;
};

struct BiasDirection {
  BiasDimension dimension = BiasDimension::gender;
  Vector v;
  std::size_t n_pairs = 0;
  Vector orientation_ref;  // uncentered mean difference; fixes the sign of v

  bool operator==(const BiasDirection&) const = default;
};

inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr double kPowerIterationTolerance = 1e-10;
inline constexpr int kPowerIterationMaxIterations = 10000;

inline Vector project_out(std::span<const double> h, std::span<const double> v, double alpha) {
  if (h.size() != v.size()) throw Error("project_out: dimension mismatch");
  if (std::fabs(norm2(v) - 1.0) > kUnitNormTolerance) throw Error("project_out: direction is not unit length");
  if (!all_finite(h)) throw Error("project_out: non-finite hidden state");
  const double c = alpha * dot(h, v);
  Vector out(h.begin(), h.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= c * v[i];
  return out;
}

namespace detail {

using DenseMatrix = std::vector<Vector>;  // row-major, square

inline Vector mat_vec(const DenseMatrix& a, const Vector& x) {
  Vector y(x.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = dot(a[i], x);
  return y;
}

inline DenseMatrix square_normalized(const DenseMatrix& a) {
  const std::size_t d = a.size();
  DenseMatrix out(d, Vector(d, 0.0));
  double fro = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double aik = a[i][k];
      for (std::size_t j = 0; j < d; ++j) out[i][j] += aik * a[k][j];
    }
  for (const auto& r : out) fro += dot(r, r);
  fro = std::sqrt(fro);
  if (fro > 0.0)
    for (auto& r : out)
      for (auto& x : r) x /= fro;
  return out;
}

// Top eigenvector of a symmetric PSD matrix by power iteration on a^8,
// starting from the normalized all-ones vector.
inline Vector dominant_eigenvector(const DenseMatrix& a) {
  const std::size_t d = a.size();
  DenseMatrix m = square_normalized(square_normalized(square_normalized(a)));

  auto run = [&](Vector v) -> std::optional<Vector> {
    double n = norm2(v);
    for (auto& x : v) x /= n;
    for (int it = 0; it < kPowerIterationMaxIterations; ++it) {
      Vector w = mat_vec(m, v);
      n = norm2(w);
      if (!(n > 1e-280)) return std::nullopt;
      for (auto& x : w) x /= n;
      double change = 0.0;
      for (std::size_t i = 0; i < d; ++i) change += (w[i] - v[i]) * (w[i] - v[i]);
      v = std::move(w);
      if (std::sqrt(change) < kPowerIterationTolerance) return v;
    }
    throw Error("power iteration did not converge");
  };

  // The all-ones start can be (nearly) orthogonal to the top eigenvector,
  // in which case iteration settles on a lesser one. A second start from
  // the heaviest column of the matrix guards against that; the larger
  // Rayleigh quotient wins.
  auto rayleigh = [&](const Vector& v) { return dot(v, mat_vec(a, v)); };
  std::size_t heaviest = 0;
  for (std::size_t i = 1; i < d; ++i)
    if (a[i][i] > a[heaviest][heaviest]) heaviest = i;
  std::optional<Vector> best = run(Vector(d, 1.0));
  if (auto alt = run(a[heaviest]); alt && (!best || rayleigh(*alt) > rayleigh(*best) * (1.0 + 1e-9))) best = alt;
  if (!best) throw Error("power iteration collapsed to zero");
  return *best;
}

}  // namespace detail

// First principal component of the (centered) difference vectors, unit
// length, oriented to agree with their uncentered mean.
inline Vector principal_direction(std::span<const Vector> diffs) {
  if (diffs.size() < 2) throw Error("principal_direction needs at least 2 vectors");
  const std::size_t d = diffs.front().size();
  if (d == 0) throw Error("principal_direction: zero-dimensional vectors");
  double max_abs = 0.0;
  for (const auto& x : diffs) {
    if (x.size() != d) throw Error("principal_direction: vectors differ in length");
    if (!all_finite(x)) throw Error("principal_direction: non-finite input");
    for (double e : x) max_abs = std::max(max_abs, std::fabs(e));
  }

  const double n = static_cast<double>(diffs.size());
  Vector mean(d, 0.0);
  for (const auto& x : diffs)
    for (std::size_t i = 0; i < d; ++i) mean[i] += x[i];
  for (auto& m : mean) m /= n;

  std::vector<Vector> centered;
  centered.reserve(diffs.size());
  double max_centered = 0.0;
  for (const auto& x : diffs) {
    Vector c(d);
    for (std::size_t i = 0; i < d; ++i) {
      c[i] = x[i] - mean[i];
      max_centered = std::max(max_centered, std::fabs(c[i]));
    }
    centered.push_back(std::move(c));
  }
  if (max_centered <= 1e-12 * std::max(1.0, max_abs)) throw Error("degenerate pair set");

  detail::DenseMatrix cov(d, Vector(d, 0.0));
  for (const auto& c : centered)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i][j] += c[i] * c[j];
  for (auto& r : cov)
    for (auto& x : r) x /= (n - 1.0);

  Vector v = detail::dominant_eigenvector(cov);
  const double nv = norm2(v);
  for (auto& x : v) x /= nv;

  double rms = 0.0;
  for (const auto& x : diffs) rms += dot(x, x);
  rms = std::sqrt(rms / n);
  const double agreement = dot(v, mean);
  bool flip = agreement < 0.0;
  if (std::fabs(agreement) <= 1e-12 * rms) {
    auto first = std::find_if(v.begin(), v.end(), [](double x) { return std::fabs(x) > 1e-12; });
    flip = first != v.end() && *first < 0.0;
  }
  if (flip)
    for (auto& x : v) x = -x;
  return v;
}

// Final-layer hidden states, mean-pooled over tokens, pole_a minus pole_b.
inline std::vector<Vector> difference_vectors(std::span<const ContrastivePair> pairs, Backend& backend) {
  if (pairs.size() < 2) throw Error("difference_vectors needs at least 2 pairs");
  const auto info = backend.info();
  if (!info.has(Capability::hidden_states)) throw CapabilityError(info.name + " does not expose hidden states");
  const std::size_t last = info.n_layers - 1;
  std::vector<Vector> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const Vector a = backend.hidden_states(p.pole_a).mean_pooled(last);
    const Vector b = backend.hidden_states(p.pole_b).mean_pooled(last);
    Vector diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    out.push_back(std::move(diff));
  }
  return out;
}

inline BiasDirection compute_bias_direction(BiasDimension dim, std::span<const ContrastivePair> all_pairs,
                                            Backend& backend) {
  std::vector<ContrastivePair> pairs;
  std::copy_if(all_pairs.begin(), all_pairs.end(), std::back_inserter(pairs),
               [dim](const ContrastivePair& p) { return p.dimension == dim; });
  const auto diffs = difference_vectors(pairs, backend);
  BiasDirection dir;
  dir.dimension = dim;
  dir.n_pairs = pairs.size();
  dir.v = principal_direction(diffs);
  dir.orientation_ref.assign(dir.v.size(), 0.0);
  for (const auto& x : diffs)
    for (std::size_t i = 0; i < x.size(); ++i) dir.orientation_ref[i] += x[i] / static_cast<double>(diffs.size());
  return dir;
}

inline nlohmann::json to_json(const BiasDirection& d) {
  return {{"dimension", to_string(d.dimension)}, {"vector", d.v}, {"n_pairs", d.n_pairs}};
}

inline BiasDirection bias_direction_from_json(const nlohmann::json& j) {
  BiasDirection d;
  d.dimension = parse_dimension(j.at("dimension").get<std::string>());
  d.v = j.at("vector").get<Vector>();
  d.n_pairs = j.at("n_pairs").get<std::size_t>();
  if (std::fabs(norm2(d.v) - 1.0) > kUnitNormTolerance) throw Error("bias direction is not unit length");
  return d;
}

}  // namespace spillover
