// Acceptance checks, one line per criterion. Usage: acceptance [--only N] [--skip N]...

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "spillover/bridge_client.hpp"
#include "spillover/report.hpp"
#include "support.hpp"

using namespace spillover;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

Vector random_unit(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n;
  Vector v(d);
  for (auto& x : v) x = n(rng);
  const double s = norm2(v);
  for (auto& x : v) x /= s;
  return v;
}

Vector random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 3.0);
  Vector v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

Outcome dataset_fidelity() {
  fs::path path;
  if (const char* env = std::getenv("STEREOSET_DEV_JSON"); env && *env)
    path = env;
  else
    path = data_file("stereoset/dev.json");
  if (!fs::exists(path))
    return {false, "StereoSet dev.json not found (set STEREOSET_DEV_JSON or place it at " + path.string() + ")"};
  const auto t0 = Clock::now();
  const auto examples = filter_examples(load_stereoset(path));
  const auto c = counts_by_dimension(examples);
  const double dt = seconds_since(t0);
  const bool counts_ok = c[BiasDimension::gender] == 242 && c[BiasDimension::profession] == 827 &&
                         c[BiasDimension::race] == 976 && c[BiasDimension::religion] == 78;
  return {counts_ok && dt < 5.0, "counts " + std::to_string(c[BiasDimension::gender]) + "/" +
                                     std::to_string(c[BiasDimension::profession]) + "/" +
                                     std::to_string(c[BiasDimension::race]) + "/" +
                                     std::to_string(c[BiasDimension::religion]) + " in " + fmt(dt) + " s"};
}

Outcome icat_axioms() {
  bool ok = icat(100, 50) == 100.0 && icat(50, 50) == 50.0;
  for (double l : {0.0, 1.0, 33.3, 50.0, 99.9, 100.0}) ok = ok && icat(l, 0) == 0.0 && icat(l, 100) == 0.0;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double l = u(rng), s = u(rng);
    worst = std::max(worst, std::fabs(icat(l, s) - icat(l, 100.0 - s)));
  }
  return {ok && worst <= 1e-9, "exact axioms " + std::string(ok ? "hold" : "violated") + ", symmetry max error " + fmt(worst)};
}

Outcome projection_suite() {
  std::mt19937_64 rng(3);
  const auto t0 = Clock::now();
  double worst_orth = 0, worst_idem = 0;
  bool identity = true;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 2 + rng() % 127;
    const auto v = random_unit(rng, d);
    const auto h = random_vec(rng, d);
    const auto once = project_out(h, v, 1.0);
    const auto twice = project_out(once, v, 1.0);
    worst_orth = std::max(worst_orth, std::fabs(dot(once, v)));
    for (std::size_t k = 0; k < d; ++k) worst_idem = std::max(worst_idem, std::fabs(once[k] - twice[k]));
    identity = identity && project_out(h, v, 0.0) == h;
  }
  const double dt = seconds_since(t0);
  return {worst_orth <= 1e-9 && worst_idem <= 1e-9 && identity && dt < 1.0,
          "max |h'.v| " + fmt(worst_orth) + ", idempotence " + fmt(worst_idem) + ", alpha=0 identity " +
              (identity ? "exact" : "broken") + ", " + fmt(dt) + " s"};
}

Outcome pca_oracle() {
  std::mt19937_64 rng(4);
  double worst = 0;
  int sets = 0, degenerate = 0;
  while (sets < 100) {
    const std::size_t n = 2 + rng() % 49, d = 2 + rng() % 63;
    std::vector<Vector> xs;
    for (std::size_t k = 0; k < n; ++k) xs.push_back(random_vec(rng, d));
    // The top eigenvector is only defined up to rotation without a gap.
    if (oracle::top_eigengap(xs) < 1e-3) {
      ++degenerate;
      continue;
    }
    const auto ours = principal_direction(xs);
    auto ref = oracle::top_principal_direction(xs);
    if (dot(ours, ref) < 0)
      for (auto& x : ref) x = -x;
    for (std::size_t k = 0; k < d; ++k) worst = std::max(worst, std::fabs(ours[k] - ref[k]));
    ++sets;
  }
  return {worst <= 1e-6, "100 sets, max coordinate error " + fmt(worst) + " (" + std::to_string(degenerate) +
                             " near-degenerate sets redrawn)"};
}

Outcome gradient_check() {
  // Full-coordinate check on a width-8 reference model keeps this within budget.
  reference::ReferenceModel model(small_config(11));
  std::mt19937_64 rng(5);
  const auto t0 = Clock::now();
  oracle::FdReport total;
  for (int i = 0; i < 20; ++i) {
    const auto ex = random_example(rng, "fd-" + std::to_string(i));
    auto orig = model_scores(model, ex);
    orig.p_unrelated += 0.25;
    const auto r = oracle::fd_check(model, ex, orig, model.config().n_layers - 2, 1.0);
    total.checked += r.checked;
    total.failures += r.failures;
    total.worst_relative = std::max(total.worst_relative, r.worst_relative);
  }
  const double dt = seconds_since(t0);
  return {total.failures == 0 && total.checked > 0 && dt < 60.0,
          std::to_string(total.checked) + " coordinates, " + std::to_string(total.failures) +
              " above 1e-4, worst relative error " + fmt(total.worst_relative) + ", " + fmt(dt) + " s"};
}

Outcome biasedit_behavior() {
  ReferenceBackend backend(planted_model(), "planted");
  const auto examples = load_dataset(data_file("planted_examples.jsonl"));
  const auto split = split_for_editing(examples, 0);
  BiasEditConfig cfg;
  cfg.steps = 10;
  const auto r = train_biasedit(backend, split, cfg);
  bool decreasing = r.train_debias.size() == 11;
  for (std::size_t k = 1; decreasing && k < r.train_debias.size(); ++k)
    decreasing = r.train_debias[k] < r.train_debias[k - 1];

  std::vector<CompletionScores> before;
  for (const auto& ex : examples) before.push_back(score_triplet(backend, ex));
  const auto h = backend.apply_edit(r.delta);
  double moved = 0;
  for (std::size_t i = 0; i < examples.size(); ++i)
    moved = std::max(moved, std::fabs(score_triplet(backend, examples[i]).p_stereo - before[i].p_stereo));
  backend.revert(h);
  double worst = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto s = score_triplet(backend, examples[i]);
    worst = std::max({worst, std::fabs(s.p_stereo - before[i].p_stereo), std::fabs(s.p_anti - before[i].p_anti),
                      std::fabs(s.p_unrelated - before[i].p_unrelated)});
  }
  return {decreasing && worst <= 1e-9 && moved > 0,
          "debias loss " + fmt(r.train_debias.front()) + " -> " + fmt(r.train_debias.back()) +
              (decreasing ? " strictly decreasing" : " NOT strictly decreasing") + ", revert error " + fmt(worst)};
}

Outcome equivalences() {
  ReferenceBackend backend(fixture_config());
  const auto examples = fixture_examples();
  const auto info = backend.info();
  const auto prompts = default_prompts();
  double worst_steer = 0;
  bool alpha_zero = true, empty_prompt = true;
  for (auto d : kAllDimensions) {
    const auto dir = compute_bias_direction(d, default_pairs(), backend);
    const auto steer = build_logit_steering(dir, info);
    const ActivationPatch patch{dir, {info.n_layers - 2}, steer.alpha};
    for (const auto& ex : examples) {
      const auto base = score_triplet(backend, ex);
      const auto a = score_triplet(backend, ex, steer), b = score_triplet(backend, ex, patch);
      worst_steer = std::max({worst_steer, std::fabs(a.p_stereo - b.p_stereo), std::fabs(a.p_anti - b.p_anti),
                              std::fabs(a.p_unrelated - b.p_unrelated)});
      alpha_zero = alpha_zero && score_triplet(backend, ex, build_logit_steering(dir, info, 0.0)) == base &&
                   score_triplet(backend, ex, build_activation_patching(dir, info, 0.0)) == base;
      empty_prompt = empty_prompt && score_triplet(backend, ex, PromptDebias{""}) == base;
    }
  }
  return {worst_steer < 1e-12 && alpha_zero && empty_prompt,
          "patch{penultimate} vs steer max diff " + fmt(worst_steer) + ", alpha=0 " +
              (alpha_zero ? "bit-equal" : "differs") + ", empty prompt " + (empty_prompt ? "bit-equal" : "differs")};
}

Outcome t_oracle() {
  const auto r = stats::one_sample_ttest(std::vector<double>{1, 2, 3});
  const bool t_ok = std::fabs(r.t - 3.4641) < 5e-5 && r.df == 2;
  bool p0 = true;
  for (double df : {1.0, 2.0, 5.0, 39.0, 100.0}) p0 = p0 && stats::student_t_two_sided_p(0.0, df) == 1.0;
  double worst = 0;
  for (double df : {1.0, 2.0, 5.0, 39.0, 100.0})
    for (double t = -6.0; t <= 6.0 + 1e-12; t += 0.1)
      worst = std::max(worst, std::fabs(stats::student_t_cdf(t, df) - oracle::t_cdf(t, df)));
  return {t_ok && p0 && worst <= 1e-8, "t=" + fmt(r.t) + " df=" + std::to_string(r.df) + ", p(0)=1 " +
                                           (p0 ? "exact" : "inexact") + ", CDF max error " + fmt(worst)};
}

Outcome grid_shape() {
  const auto t0 = Clock::now();
  const auto data = open_dataset(data_file("fixture.jsonl"));
  const auto models = data_file("models.txt");
  const auto sources = parse_models_file(detail::read_file(models), models.parent_path());
  const auto store = run_grid(sources, data, AuditConfig{});
  const auto matrix = icat_delta_matrix(store);
  const auto d1 = temp_dir("acceptance-report-1"), d2 = temp_dir("acceptance-report-2");
  const auto files = emit_report(store, d1, {"csv", "svg", "json"});
  emit_report(store_parse([&] {
                std::ostringstream s;
                store_write(store, s);
                return s.str();
              }()),
              d2, {"csv", "svg", "json"});
  bool same = true;
  for (const auto& f : files)
    if (f.extension() != ".json") same = same && detail::read_file(f) == detail::read_file(d2 / f.filename());
  const double dt = seconds_since(t0);
  const bool ok = store.count(ExperimentState::ok) == 16 && store.size() == 64 && matrix.complete() && same && dt < 300;
  return {ok, std::to_string(store.count(ExperimentState::ok)) + " experiments ok, " + std::to_string(store.size()) +
                  " records, matrix " + (matrix.complete() ? "4x4" : "incomplete") + ", CSV/SVG " +
                  (same ? "deterministic" : "differ") + ", " + fmt(dt) + " s"};
}

Outcome protocol_self_test() {
  ReferenceBackend local(reference::ModelConfig{});
  BridgeClient remote("'" + audit_binary() + "' bridge-serve --reference");
  std::mt19937_64 rng(10);
  double worst = 0;
  for (int i = 0; i < 50; ++i) {
    const auto ex = random_example(rng, "p" + std::to_string(i), kAllDimensions[i % 4]);
    for (const auto* completion : {&ex.stereotype, &ex.anti_stereotype, &ex.unrelated}) {
      const ScoreRequest req{ex.context, *completion, "", std::nullopt};
      worst = std::max(worst, std::fabs(local.score(req).mean_nll() - remote.score(req).mean_nll()));
    }
  }
  return {worst <= 1e-6, "50 triplets, max mean-NLL difference " + fmt(worst)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, skip;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if ((a == "--only" || a == "--skip") && i + 1 < argc)
      (a == "--only" ? only : skip).insert(std::atoi(argv[++i]));
    else {
      std::cerr << "usage: acceptance [--only N] [--skip N]...\n";
      return 2;
    }
  }
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, dataset_fidelity}, {2, icat_axioms},       {3, projection_suite}, {4, pca_oracle},
      {5, gradient_check},   {6, biasedit_behavior}, {7, equivalences},     {8, t_oracle},
      {9, grid_shape},       {10, protocol_self_test}};
  set_warning_sink([](const std::string&) {});
  int failures = 0;
  for (const auto& [n, check] : criteria) {
    if ((!only.empty() && !only.count(n)) || skip.count(n)) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures ? 1 : 0;
}
