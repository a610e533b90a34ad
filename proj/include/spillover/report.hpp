#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spillover/pipeline.hpp"
#include "spillover/stats.hpp"

namespace spillover {

// --- ICAT delta matrix ----------------------------------------------------------------

struct SpilloverCell {
  BiasDimension target = BiasDimension::gender;
  BiasDimension eval = BiasDimension::gender;
  std::size_t n = 0;
  double mean_d_icat = 0.0;
  std::optional<stats::TTestResult> ttest;  // absent when n < 2 or the deltas are constant and nonzero
};

// A constant zero sample is reported as t = 0, p = 1 rather than omitted.
inline std::optional<stats::TTestResult> ttest_or_none(const std::vector<double>& xs, double alpha = 0.05) {
  if (xs.size() < 2) return std::nullopt;
  const double m = stats::mean(xs);
  if (stats::sample_sd(xs) == 0.0) {
    if (m != 0.0) return std::nullopt;
    return stats::TTestResult{0.0, xs.size(), 0.0, xs.size() - 1, 1.0, false};
  }
  return stats::one_sample_ttest(xs, alpha);
}

struct SpilloverMatrix {
  std::vector<SpilloverCell> cells;  // target-major, only (target, eval) pairs with observations

  const SpilloverCell* find(BiasDimension target, BiasDimension eval) const {
    for (const auto& c : cells)
      if (c.target == target && c.eval == eval) return &c;
    return nullptr;
  }
  bool complete() const { return cells.size() == kAllDimensions.size() * kAllDimensions.size(); }
};

inline SpilloverMatrix icat_delta_matrix(const ResultStore& store) {
  if (store.empty()) throw Error("result store has no records");
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> groups;
  for (const auto& r : store.records())
    groups[{index_of(r.spec.target), index_of(r.eval_dimension)}].push_back(r.deltas.d_icat);
  SpilloverMatrix m;
  for (auto& [key, xs] : groups) {
    // Sort so the mean does not depend on record order at the last bit.
    std::sort(xs.begin(), xs.end());
    SpilloverCell c;
    c.target = kAllDimensions[key.first];
    c.eval = kAllDimensions[key.second];
    c.n = xs.size();
    c.mean_d_icat = stats::mean(xs);
    c.ttest = ttest_or_none(xs);
    m.cells.push_back(c);
  }
  return m;
}

// --- significance rates --------------------------------------------------------------

struct SignificanceRates {
  double on_target_improved_pct = 0.0;
  double spillover_harmed_pct = 0.0;
  std::string granularity;  // "cell" (pooled over backends) or "experiment"
  bool significance_tested = false;
  std::size_t n_on_target = 0;
  std::size_t n_spillover = 0;
  std::size_t n_tests = 0;
};

// With two or more backends each (technique, target, eval) cell pools its
// deltas over backends and is t-tested. With one backend every experiment
// contributes a single observation, so only the sign can be counted.
inline SignificanceRates significance_rates(const ResultStore& store, double alpha = 0.05) {
  if (store.empty()) throw Error("result store has no records");
  std::set<std::string> backends;
  for (const auto& r : store.records()) backends.insert(r.spec.backend_id);

  SignificanceRates out;
  std::size_t on_hits = 0, off_hits = 0;
  if (backends.size() >= 2) {
    out.granularity = "cell";
    out.significance_tested = true;
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::vector<double>> cells;
    for (const auto& r : store.records())
      cells[{index_of(r.spec.technique), index_of(r.spec.target), index_of(r.eval_dimension)}].push_back(
          r.deltas.d_icat);
    for (auto& [key, xs] : cells) {
      const bool on = std::get<1>(key) == std::get<2>(key);
      (on ? out.n_on_target : out.n_spillover)++;
      const auto t = ttest_or_none(xs, alpha);
      if (t) ++out.n_tests;
      const bool sig = t && t->p_two_sided < alpha;
      if (on && sig && t->mean > 0) ++on_hits;
      if (!on && sig && t->mean < 0) ++off_hits;
    }
  } else {
    out.granularity = "experiment";
    for (const auto& r : store.records()) {
      const bool on = r.spec.target == r.eval_dimension;
      (on ? out.n_on_target : out.n_spillover)++;
      if (on && r.deltas.d_icat > 0) ++on_hits;
      if (!on && r.deltas.d_icat < 0) ++off_hits;
    }
  }
  if (out.n_on_target) out.on_target_improved_pct = 100.0 * static_cast<double>(on_hits) / static_cast<double>(out.n_on_target);
  if (out.n_spillover) out.spillover_harmed_pct = 100.0 * static_cast<double>(off_hits) / static_cast<double>(out.n_spillover);
  return out;
}

// --- scatter -----------------------------------------------------------------------

struct ScatterPoint {
  std::string backend_id;
  Technique technique = Technique::logit_steering;
  BiasDimension target = BiasDimension::gender;
  double x = 0.0;  // on-target d_ss
  double y = 0.0;  // mean off-target d_ss
};

inline std::vector<ScatterPoint> scatter_points(const ResultStore& store) {
  std::map<ExperimentKey, std::vector<AuditRecord>> by_exp;
  for (const auto& r : store.records()) by_exp[key_of(r.spec)].push_back(r);
  std::vector<ScatterPoint> out;
  for (const auto& [key, recs] : by_exp) {
    const auto& spec = recs.front().spec;
    const AuditRecord* on = nullptr;
    std::vector<double> off;
    for (const auto& r : recs) {
      if (r.eval_dimension == spec.target)
        on = &r;
      else
        off.push_back(r.deltas.d_ss);
    }
    if (!on || off.size() != kAllDimensions.size() - 1) {
      warn("skipping incomplete experiment " + spec.backend_id + "/" + std::string(to_string(spec.technique)) + "/" +
           std::string(to_string(spec.target)) + " in scatter");
      continue;
    }
    out.push_back({spec.backend_id, spec.technique, spec.target, on->deltas.d_ss, stats::mean(off)});
  }
  return out;
}

// --- top spillovers --------------------------------------------------------------

enum class SpilloverClass { beneficial, adverse };

inline std::string_view to_string(SpilloverClass c) { return c == SpilloverClass::beneficial ? "beneficial" : "adverse"; }

// Change in distance from parity: negative moves toward SS = 50.
inline double parity_distance_change(double baseline_ss, double intervened_ss) {
  return std::abs(intervened_ss - 50.0) - std::abs(baseline_ss - 50.0);
}

struct SpilloverHighlight {
  BiasDimension target = BiasDimension::gender;
  BiasDimension eval = BiasDimension::gender;
  std::string backend_id;
  Technique technique = Technique::logit_steering;
  double d_ss = 0.0;
  double d_lms = 0.0;
  double d_parity = 0.0;
  SpilloverClass classification = SpilloverClass::beneficial;
};

struct TopSpillovers {
  std::vector<SpilloverHighlight> beneficial;
  std::vector<SpilloverHighlight> adverse;
};

// Per off-target (target, eval) pair: the k most negative parity changes are
// beneficial, the k most positive adverse. Zero changes land in neither.
inline TopSpillovers top_spillovers(const ResultStore& store, std::size_t k) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<SpilloverHighlight>> groups;
  for (const auto& r : store.records()) {
    if (r.spec.target == r.eval_dimension) continue;
    SpilloverHighlight h;
    h.target = r.spec.target;
    h.eval = r.eval_dimension;
    h.backend_id = r.spec.backend_id;
    h.technique = r.spec.technique;
    h.d_ss = r.deltas.d_ss;
    h.d_lms = r.deltas.d_lms;
    h.d_parity = parity_distance_change(r.baseline.ss, r.intervened.ss);
    h.classification = h.d_parity < 0 ? SpilloverClass::beneficial : SpilloverClass::adverse;
    groups[{index_of(h.target), index_of(h.eval)}].push_back(h);
  }
  auto tie = [](const SpilloverHighlight& a, const SpilloverHighlight& b) {
    return std::tie(a.backend_id, a.technique) < std::tie(b.backend_id, b.technique);
  };
  TopSpillovers out;
  for (auto& [key, hs] : groups) {
    std::vector<SpilloverHighlight> good, bad;
    for (const auto& h : hs) {
      if (h.d_parity < 0) good.push_back(h);
      if (h.d_parity > 0) bad.push_back(h);
    }
    std::stable_sort(good.begin(), good.end(), [&](const auto& a, const auto& b) {
      return a.d_parity != b.d_parity ? a.d_parity < b.d_parity : tie(a, b);
    });
    std::stable_sort(bad.begin(), bad.end(), [&](const auto& a, const auto& b) {
      return a.d_parity != b.d_parity ? a.d_parity > b.d_parity : tie(a, b);
    });
    good.resize(std::min(k, good.size()));
    bad.resize(std::min(k, bad.size()));
    out.beneficial.insert(out.beneficial.end(), good.begin(), good.end());
    out.adverse.insert(out.adverse.end(), bad.begin(), bad.end());
  }
  return out;
}

// --- per-model aggregates -------------------------------------------------------

struct ModelAggregate {
  double mean_d_ss = 0.0;
  double mean_d_lms = 0.0;
  std::size_t n_records = 0;
};

inline std::map<std::string, ModelAggregate> aggregate_by_model(const ResultStore& store) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> acc;
  for (const auto& r : store.records()) {
    acc[r.spec.backend_id].first.push_back(r.deltas.d_ss);
    acc[r.spec.backend_id].second.push_back(r.deltas.d_lms);
  }
  std::map<std::string, ModelAggregate> out;
  for (auto& [id, v] : acc) {
    std::sort(v.first.begin(), v.first.end());
    std::sort(v.second.begin(), v.second.end());
    out[id] = {stats::mean(v.first), stats::mean(v.second), v.first.size()};
  }
  return out;
}

// --- emission ----------------------------------------------------------------------

namespace detail {

inline std::string num(double v, int precision = 10) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  std::string s = buf;
  return s == "-0" ? "0" : s;
}

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s[0] == '-') s.erase(0, 1);
  return s;
}

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// White at zero, blue for positive, red for negative.
inline std::string diverging_color(double v, double scale) {
  const double t = scale > 0 ? std::clamp(v / scale, -1.0, 1.0) : 0.0;
  auto mix = [](double a, double b, double f) { return static_cast<int>(std::lround(a + (b - a) * f)); };
  int r = 255, g = 255, b = 255;
  if (t > 0) {
    r = mix(255, 33, t);
    g = mix(255, 102, t);
    b = mix(255, 172, t);
  } else if (t < 0) {
    r = mix(255, 178, -t);
    g = mix(255, 24, -t);
    b = mix(255, 43, -t);
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

struct Svg {
  std::ostringstream s;
  Svg(int w, int h) {
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
      << ' ' << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"#ffffff\"/>\n";
  }
  void text(double x, double y, std::string_view t, std::string_view anchor = "middle", int size = 12) {
    s << "<text x=\"" << fixed(x, 1) << "\" y=\"" << fixed(y, 1) << "\" text-anchor=\"" << anchor << "\" font-size=\""
      << size << "\">" << xml_escape(t) << "</text>\n";
  }
  void rect(double x, double y, double w, double h, std::string_view fill, std::string_view title = {}) {
    s << "<rect x=\"" << fixed(x, 1) << "\" y=\"" << fixed(y, 1) << "\" width=\"" << fixed(w, 1) << "\" height=\""
      << fixed(h, 1) << "\" fill=\"" << fill << "\" stroke=\"#444444\" stroke-width=\"0.5\"";
    if (title.empty())
      s << "/>\n";
    else
      s << "><title>" << xml_escape(title) << "</title></rect>\n";
  }
  void line(double x1, double y1, double x2, double y2, std::string_view stroke = "#444444", double width = 1.0) {
    s << "<line x1=\"" << fixed(x1, 1) << "\" y1=\"" << fixed(y1, 1) << "\" x2=\"" << fixed(x2, 1) << "\" y2=\""
      << fixed(y2, 1) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << fixed(width, 1) << "\"/>\n";
  }
  void circle(double x, double y, double r, std::string_view fill, std::string_view title) {
    s << "<circle cx=\"" << fixed(x, 1) << "\" cy=\"" << fixed(y, 1) << "\" r=\"" << fixed(r, 1) << "\" fill=\""
      << fill << "\" fill-opacity=\"0.8\"><title>" << xml_escape(title) << "</title></circle>\n";
  }
  std::string finish() {
    s << "</svg>\n";
    return s.str();
  }
};

inline std::string technique_color(Technique t) {
  switch (t) {
    case Technique::logit_steering: return "#1b9e77";
    case Technique::activation_patching: return "#d95f02";
    case Technique::prompt_debiasing: return "#7570b3";
    case Technique::biasedit: return "#e7298a";
  }
  return "#000000";
}

// Symmetric axis limit with a little headroom; at least 1.
inline double axis_limit(double max_abs) {
  if (!(max_abs > 0)) return 1.0;
  const double mag = std::pow(10.0, std::floor(std::log10(max_abs)));
  for (double step : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (step * mag >= max_abs * 1.05) return step * mag;
  return 10.0 * mag;
}

}  // namespace detail

inline std::string heatmap_csv(const SpilloverMatrix& m) {
  std::string out = "target,eval,mean_d_icat,n,t,p\n";
  for (auto t : kAllDimensions)
    for (auto e : kAllDimensions) {
      out += std::string(to_string(t)) + "," + std::string(to_string(e)) + ",";
      if (const auto* c = m.find(t, e)) {
        out += detail::num(c->mean_d_icat) + "," + std::to_string(c->n) + ",";
        if (c->ttest) out += detail::num(c->ttest->t) + "," + detail::num(c->ttest->p_two_sided);
        else out += ",";
      } else {
        out += ",0,,";
      }
      out += "\n";
    }
  return out;
}

inline std::string heatmap_svg(const SpilloverMatrix& m) {
  const int cell = 90, left = 110, top = 70;
  detail::Svg svg(left + 4 * cell + 30, top + 4 * cell + 60);
  double scale = 0;
  for (const auto& c : m.cells) scale = std::max(scale, std::abs(c.mean_d_icat));
  svg.text(left + 2 * cell, 24, "Mean ICAT change by target (rows) and evaluation dimension (columns)", "middle", 13);
  for (std::size_t j = 0; j < 4; ++j)
    svg.text(left + (j + 0.5) * cell, top - 10, to_string(kAllDimensions[j]));
  for (std::size_t i = 0; i < 4; ++i) {
    const auto t = kAllDimensions[i];
    svg.text(left - 10, top + (i + 0.5) * cell + 4, to_string(t), "end");
    for (std::size_t j = 0; j < 4; ++j) {
      const auto e = kAllDimensions[j];
      const double x = left + j * cell, y = top + i * cell;
      const auto* c = m.find(t, e);
      if (!c) {
        svg.rect(x, y, cell, cell, "#eeeeee", "no data");
        svg.text(x + cell / 2.0, y + cell / 2.0 + 4, "n/a");
        continue;
      }
      std::string title = std::string(to_string(t)) + " -> " + std::string(to_string(e)) + ": mean " +
                          detail::num(c->mean_d_icat, 6) + ", n " + std::to_string(c->n);
      if (c->ttest) title += ", t " + detail::num(c->ttest->t, 4) + ", p " + detail::num(c->ttest->p_two_sided, 4);
      svg.rect(x, y, cell, cell, detail::diverging_color(c->mean_d_icat, scale), title);
      std::string label = detail::fixed(c->mean_d_icat, 2);
      if (c->ttest && c->ttest->significant_at_05) label += "*";
      svg.text(x + cell / 2.0, y + cell / 2.0, label, "middle", 14);
      svg.text(x + cell / 2.0, y + cell / 2.0 + 18, "n=" + std::to_string(c->n), "middle", 10);
    }
  }
  svg.text(left + 2 * cell, top + 4 * cell + 30, "* p < 0.05 (two-sided one-sample t-test)", "middle", 11);
  return svg.finish();
}

inline std::string scatter_csv(const std::vector<ScatterPoint>& pts) {
  std::string out = "backend,technique,target,on_target_d_ss,spillover_d_ss\n";
  for (const auto& p : pts)
    out += detail::csv_field(p.backend_id) + "," + std::string(to_string(p.technique)) + "," +
           std::string(to_string(p.target)) + "," + detail::num(p.x) + "," + detail::num(p.y) + "\n";
  return out;
}

inline std::string scatter_svg(const std::vector<ScatterPoint>& pts) {
  const int w = 560, h = 520, left = 70, right = 170, top = 50, bottom = 60;
  const double pw = w - left - right, ph = h - top - bottom;
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx = std::max(mx, std::abs(p.x));
    my = std::max(my, std::abs(p.y));
  }
  const double lx = detail::axis_limit(mx), ly = detail::axis_limit(my);
  auto X = [&](double v) { return left + (v + lx) / (2 * lx) * pw; };
  auto Y = [&](double v) { return top + (ly - v) / (2 * ly) * ph; };
  detail::Svg svg(w, h);
  svg.text(left + pw / 2, 24, "On-target vs. spillover change in SS", "middle", 13);
  svg.rect(left, top, pw, ph, "#fafafa");
  for (int k = -2; k <= 2; ++k) {
    const double vx = lx * k / 2.0, vy = ly * k / 2.0;
    svg.line(X(vx), top + ph, X(vx), top + ph + 5);
    svg.text(X(vx), top + ph + 18, detail::num(vx, 4), "middle", 10);
    svg.line(left - 5, Y(vy), left, Y(vy));
    svg.text(left - 8, Y(vy) + 4, detail::num(vy, 4), "end", 10);
  }
  svg.line(X(0), top, X(0), top + ph, "#999999");
  svg.line(left, Y(0), left + pw, Y(0), "#999999");
  svg.text(left + pw / 2, h - 15, "on-target d_SS");
  svg.s << "<text x=\"16\" y=\"" << detail::fixed(top + ph / 2, 1)
        << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << detail::fixed(top + ph / 2, 1)
        << ")\">mean off-target d_SS</text>\n";
  for (const auto& p : pts)
    svg.circle(X(p.x), Y(p.y), 5, detail::technique_color(p.technique),
               p.backend_id + " " + std::string(to_string(p.technique)) + " -> " + std::string(to_string(p.target)) +
                   " (" + detail::num(p.x, 4) + ", " + detail::num(p.y, 4) + ")");
  double ly0 = top + 10;
  for (auto t : kAllTechniques) {
    svg.circle(left + pw + 20, ly0, 5, detail::technique_color(t), std::string(to_string(t)));
    svg.text(left + pw + 30, ly0 + 4, to_string(t), "start", 11);
    ly0 += 20;
  }
  return svg.finish();
}

inline std::string spillovers_csv(const TopSpillovers& top) {
  std::string out = "classification,target,eval,backend,technique,d_parity,d_ss,d_lms\n";
  auto rows = [&](const std::vector<SpilloverHighlight>& hs) {
    for (const auto& h : hs)
      out += std::string(to_string(h.classification)) + "," + std::string(to_string(h.target)) + "," +
             std::string(to_string(h.eval)) + "," + detail::csv_field(h.backend_id) + "," +
             std::string(to_string(h.technique)) + "," + detail::num(h.d_parity) + "," + detail::num(h.d_ss) + "," +
             detail::num(h.d_lms) + "\n";
  };
  rows(top.beneficial);
  rows(top.adverse);
  return out;
}

inline std::string by_model_csv(const std::map<std::string, ModelAggregate>& agg) {
  std::string out = "backend,mean_d_ss,mean_d_lms,n_records\n";
  for (const auto& [id, a] : agg)
    out += detail::csv_field(id) + "," + detail::num(a.mean_d_ss) + "," + detail::num(a.mean_d_lms) + "," +
           std::to_string(a.n_records) + "\n";
  return out;
}

inline std::string by_model_svg(const std::map<std::string, ModelAggregate>& agg) {
  const int group = 110, left = 70, top = 50, ph = 300;
  const int w = left + static_cast<int>(agg.size()) * group + 40;
  detail::Svg svg(std::max(w, 360), top + ph + 90);
  double m = 0;
  for (const auto& [id, a] : agg) m = std::max({m, std::abs(a.mean_d_ss), std::abs(a.mean_d_lms)});
  const double lim = detail::axis_limit(m);
  auto Y = [&](double v) { return top + (lim - v) / (2 * lim) * ph; };
  svg.text(left + agg.size() * group / 2.0, 24, "Mean change per model (all techniques and dimensions)", "middle", 13);
  for (int k = -2; k <= 2; ++k) {
    const double v = lim * k / 2.0;
    svg.line(left - 5, Y(v), left, Y(v));
    svg.text(left - 8, Y(v) + 4, detail::num(v, 4), "end", 10);
  }
  svg.line(left, Y(0), left + agg.size() * group, Y(0), "#999999");
  std::size_t i = 0;
  for (const auto& [id, a] : agg) {
    const double x0 = left + i * group + 15;
    for (int b = 0; b < 2; ++b) {
      const double v = b == 0 ? a.mean_d_ss : a.mean_d_lms;
      const double x = x0 + b * 40, y = std::min(Y(v), Y(0)), hgt = std::abs(Y(v) - Y(0));
      svg.rect(x, y, 36, std::max(hgt, 0.5), b == 0 ? "#4c72b0" : "#dd8452",
               id + (b == 0 ? " mean d_SS " : " mean d_LMS ") + detail::num(v, 6));
      svg.text(x + 18, v >= 0 ? y - 4 : y + hgt + 12, detail::fixed(v, 2), "middle", 10);
    }
    svg.text(x0 + 38, top + ph + 20, id, "middle", 11);
    svg.text(x0 + 38, top + ph + 34, "n=" + std::to_string(a.n_records), "middle", 10);
    ++i;
  }
  svg.rect(left, top + ph + 50, 12, 12, "#4c72b0");
  svg.text(left + 18, top + ph + 60, "mean d_SS", "start", 11);
  svg.rect(left + 110, top + ph + 50, 12, 12, "#dd8452");
  svg.text(left + 128, top + ph + 60, "mean d_LMS", "start", 11);
  return svg.finish();
}

inline nlohmann::json summary_json(const ResultStore& store, const SpilloverMatrix& m, const SignificanceRates& rates) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : m.cells) {
    nlohmann::json j = {{"target", to_string(c.target)},
                        {"eval", to_string(c.eval)},
                        {"mean_d_icat", c.mean_d_icat},
                        {"n", c.n}};
    if (c.ttest) {
      j["t"] = c.ttest->t;
      j["df"] = c.ttest->df;
      j["p"] = c.ttest->p_two_sided;
      j["significant_at_05"] = c.ttest->significant_at_05;
    } else {
      j["t"] = nullptr;
      j["df"] = nullptr;
      j["p"] = nullptr;
      j["significant_at_05"] = nullptr;
    }
    cells.push_back(std::move(j));
  }
  std::set<ExperimentKey> experiments;
  for (const auto& r : store.records()) experiments.insert(key_of(r.spec));
  std::size_t n_tests = rates.n_tests;
  for (const auto& c : m.cells) n_tests += c.ttest ? 1 : 0;
  return {{"on_target_improved_pct", rates.on_target_improved_pct},
          {"spillover_harmed_pct", rates.spillover_harmed_pct},
          {"granularity", rates.granularity},
          {"significance_tested", rates.significance_tested},
          {"alpha", 0.05},
          {"multiple_comparison_correction", "none"},
          {"n_tests", n_tests},
          {"cells", cells},
          {"n_experiments", experiments.size()},
          {"n_evaluations", store.size()},
          {"experiment_status",
           {{"ok", store.count(ExperimentState::ok)},
            {"skipped", store.count(ExperimentState::skipped)},
            {"failed", store.count(ExperimentState::failed)}}},
          {"dataset_sha256", store.header.dataset_sha256}};
}

inline constexpr std::size_t kTopSpilloversPerPair = 3;

inline std::set<std::string> parse_formats(const std::string& list) {
  std::set<std::string> out;
  std::istringstream in(list);
  for (std::string f; std::getline(in, f, ',');) {
    f.erase(0, f.find_first_not_of(' '));
    f.erase(f.find_last_not_of(' ') + 1);
    if (f.empty()) continue;
    if (f != "csv" && f != "json" && f != "svg") throw Error("unknown report format '" + f + "'");
    out.insert(f);
  }
  return out;
}

// Returns the files written, in a fixed order.
inline std::vector<std::filesystem::path> emit_report(const ResultStore& store, const std::filesystem::path& out_dir,
                                                      const std::set<std::string>& formats) {
  if (formats.empty()) throw Error("no report formats requested");
  for (const auto& f : formats)
    if (f != "csv" && f != "json" && f != "svg") throw Error("unknown report format '" + f + "'");
  const auto matrix = icat_delta_matrix(store);
  const auto points = scatter_points(store);
  const auto top = top_spillovers(store, kTopSpilloversPerPair);
  const auto models = aggregate_by_model(store);

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(out_dir / name, text);
    written.push_back(out_dir / name);
  };
  if (formats.count("csv")) {
    emit("heatmap_icat.csv", heatmap_csv(matrix));
    emit("scatter_ss.csv", scatter_csv(points));
    emit("spillovers_top.csv", spillovers_csv(top));
    emit("by_model.csv", by_model_csv(models));
  }
  if (formats.count("svg")) {
    emit("heatmap_icat.svg", heatmap_svg(matrix));
    emit("scatter_ss.svg", scatter_svg(points));
    emit("by_model.svg", by_model_svg(models));
  }
  if (formats.count("json")) emit("summary.json", summary_json(store, matrix, significance_rates(store)).dump(2) + "\n");
  return written;
}

}  // namespace spillover
