#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "spillover/report.hpp"
#include "support.hpp"

using namespace spillover;
using namespace testing_support;

namespace {

// Every (technique, target, eval) with a deterministic pseudo-random d_icat.
ResultStore full_store(const std::vector<std::string>& backends, std::uint64_t seed) {
  ResultStore s;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-5, 5), ss(30, 70);
  for (const auto& b : backends)
    for (auto t : kAllTechniques)
      for (auto target : kAllDimensions)
        for (auto eval : kAllDimensions) s.upsert(synthetic_record(b, t, target, eval, ss(rng), ss(rng), u(rng)));
  return s;
}

std::string slurp(const std::filesystem::path& p) { return detail::read_file(p); }

}  // namespace

TEST(Matrix, CellMeanAndTTest) {
  ResultStore s;
  const std::vector<std::string> ids = {"a", "b", "c"};
  for (std::size_t i = 0; i < 3; ++i)
    s.upsert(synthetic_record(ids[i], Technique::biasedit, BiasDimension::gender, BiasDimension::race, 50, 50,
                              static_cast<double>(i + 1)));
  const auto m = icat_delta_matrix(s);
  ASSERT_EQ(m.cells.size(), 1u);
  const auto* c = m.find(BiasDimension::gender, BiasDimension::race);
  ASSERT_NE(c, nullptr);
  EXPECT_EQ(c->n, 3u);
  EXPECT_DOUBLE_EQ(c->mean_d_icat, 2.0);
  ASSERT_TRUE(c->ttest);
  EXPECT_NEAR(c->ttest->t, 3.4641016151, 1e-9);
  EXPECT_EQ(c->ttest->df, 2u);
  EXPECT_NEAR(c->ttest->p_two_sided, 2 * (1 - oracle::t_cdf(c->ttest->t, 2)), 1e-10);
  EXPECT_FALSE(m.complete());
  EXPECT_EQ(m.find(BiasDimension::race, BiasDimension::gender), nullptr);
}

TEST(Matrix, ZeroVarianceCells) {
  const auto zero = ttest_or_none({0.0, 0.0, 0.0});
  ASSERT_TRUE(zero);
  EXPECT_EQ(zero->t, 0.0);
  EXPECT_EQ(zero->p_two_sided, 1.0);
  EXPECT_FALSE(ttest_or_none({1.5, 1.5}));
  EXPECT_FALSE(ttest_or_none({1.0}));
}

TEST(Matrix, EmptyStoreIsAnError) {
  EXPECT_THROW(icat_delta_matrix(ResultStore{}), Error);
  EXPECT_THROW(significance_rates(ResultStore{}), Error);
}

TEST(MatrixProperty, InvariantToInsertionOrder) {
  const auto base = full_store({"a", "b", "c"}, 1);
  auto records = base.records();
  const auto ref = heatmap_csv(icat_delta_matrix(base));
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    std::shuffle(records.begin(), records.end(), rng);
    ResultStore s;
    for (const auto& r : records) s.upsert(r);
    EXPECT_EQ(heatmap_csv(icat_delta_matrix(s)), ref);
  }
}

TEST(Heatmap, AlwaysSixteenRows) {
  ResultStore s;
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::gender, 60, 55, 1.0));
  const auto csv = heatmap_csv(icat_delta_matrix(s));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "target,eval,mean_d_icat,n,t,p");
  const auto full = heatmap_csv(icat_delta_matrix(full_store({"a"}, 2)));
  EXPECT_EQ(std::count(full.begin(), full.end(), '\n'), 17);
}

TEST(Significance, SingleBackendCountsSigns) {
  ResultStore s;
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::gender, 60, 55, 2.0));
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 60, 55, -1.0));
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::religion, 60, 55, 1.0));
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::profession, 60, 55, 0.0));
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::race, BiasDimension::gender, 60, 55, 3.0));
  const auto r = significance_rates(s);
  EXPECT_EQ(r.granularity, "experiment");
  EXPECT_FALSE(r.significance_tested);
  EXPECT_EQ(r.n_on_target, 1u);
  EXPECT_EQ(r.n_spillover, 4u);
  EXPECT_DOUBLE_EQ(r.on_target_improved_pct, 100.0);
  EXPECT_DOUBLE_EQ(r.spillover_harmed_pct, 25.0);
}

TEST(Significance, PooledOverBackends) {
  ResultStore s;
  const std::vector<double> harm = {-1.0, -1.1, -0.9, -1.05, -0.95}, noise = {1, -1, 2, -2, 0.5};
  for (std::size_t i = 0; i < 5; ++i) {
    const auto id = "m" + std::to_string(i);
    s.upsert(synthetic_record(id, Technique::logit_steering, BiasDimension::gender, BiasDimension::race, 50, 50, harm[i]));
    s.upsert(synthetic_record(id, Technique::logit_steering, BiasDimension::gender, BiasDimension::religion, 50, 50, noise[i]));
    s.upsert(synthetic_record(id, Technique::logit_steering, BiasDimension::gender, BiasDimension::gender, 50, 50, -harm[i]));
  }
  const auto r = significance_rates(s);
  EXPECT_EQ(r.granularity, "cell");
  EXPECT_TRUE(r.significance_tested);
  EXPECT_EQ(r.n_on_target, 1u);
  EXPECT_EQ(r.n_spillover, 2u);
  EXPECT_EQ(r.n_tests, 3u);
  EXPECT_DOUBLE_EQ(r.on_target_improved_pct, 100.0);
  EXPECT_DOUBLE_EQ(r.spillover_harmed_pct, 50.0);
}

TEST(Scatter, OnTargetVersusMeanOffTarget) {
  ResultStore s;
  s.upsert(synthetic_record("a", Technique::prompt_debiasing, BiasDimension::gender, BiasDimension::gender, 60, 56));
  s.upsert(synthetic_record("a", Technique::prompt_debiasing, BiasDimension::gender, BiasDimension::race, 50, 53));
  s.upsert(synthetic_record("a", Technique::prompt_debiasing, BiasDimension::gender, BiasDimension::religion, 50, 51));
  s.upsert(synthetic_record("a", Technique::prompt_debiasing, BiasDimension::gender, BiasDimension::profession, 50, 52));
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::race, BiasDimension::race, 50, 40));
  WarningCapture warnings;
  const auto pts = scatter_points(s);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_DOUBLE_EQ(pts[0].x, -4.0);
  EXPECT_DOUBLE_EQ(pts[0].y, 2.0);
  EXPECT_EQ(pts[0].technique, Technique::prompt_debiasing);
  ASSERT_EQ(warnings.messages().size(), 1u);
  EXPECT_NE(warnings.messages()[0].find("a/biasedit/race"), std::string::npos);
}

TEST(TopSpillovers, ClassifiesByParityDistance) {
  EXPECT_DOUBLE_EQ(parity_distance_change(70, 55), -15.0);
  EXPECT_DOUBLE_EQ(parity_distance_change(55, 30), 15.0);
  EXPECT_DOUBLE_EQ(parity_distance_change(40, 60), 0.0);

  ResultStore s;
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 70, 55));
  s.upsert(synthetic_record("b", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 55, 30));
  s.upsert(synthetic_record("c", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 40, 60));
  s.upsert(synthetic_record("d", Technique::biasedit, BiasDimension::gender, BiasDimension::gender, 90, 50));
  const auto top = top_spillovers(s, 3);
  ASSERT_EQ(top.beneficial.size(), 1u);
  ASSERT_EQ(top.adverse.size(), 1u);
  EXPECT_EQ(top.beneficial[0].backend_id, "a");
  EXPECT_DOUBLE_EQ(top.beneficial[0].d_ss, -15.0);
  EXPECT_EQ(top.beneficial[0].classification, SpilloverClass::beneficial);
  EXPECT_EQ(top.adverse[0].backend_id, "b");
  EXPECT_DOUBLE_EQ(top.adverse[0].d_parity, 15.0);
  EXPECT_EQ(top.adverse[0].classification, SpilloverClass::adverse);
}

TEST(TopSpillovers, KeepsTopKPerPairWithStableTies) {
  ResultStore s;
  for (int i = 0; i < 6; ++i)
    s.upsert(synthetic_record("m" + std::to_string(i), Technique::logit_steering, BiasDimension::race,
                              BiasDimension::gender, 50, 60 + (i < 4 ? 5 : 2 * i)));
  const auto top = top_spillovers(s, 3);
  ASSERT_EQ(top.adverse.size(), 3u);
  EXPECT_EQ(top.adverse[0].backend_id, "m5");
  EXPECT_EQ(top.adverse[1].backend_id, "m4");
  EXPECT_EQ(top.adverse[2].backend_id, "m0");
  EXPECT_TRUE(top.beneficial.empty());
}

TEST(ByModel, MeanOverAllRecords) {
  ResultStore s;
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 60, 58, 0, 90, 88));
  s.upsert(synthetic_record("a", Technique::biasedit, BiasDimension::gender, BiasDimension::gender, 60, 56, 0, 90, 86));
  s.upsert(synthetic_record("b", Technique::biasedit, BiasDimension::gender, BiasDimension::gender, 60, 61));
  const auto agg = aggregate_by_model(s);
  ASSERT_EQ(agg.size(), 2u);
  EXPECT_DOUBLE_EQ(agg.at("a").mean_d_ss, -3.0);
  EXPECT_DOUBLE_EQ(agg.at("a").mean_d_lms, -3.0);
  EXPECT_EQ(agg.at("a").n_records, 2u);
  EXPECT_DOUBLE_EQ(agg.at("b").mean_d_ss, 1.0);
}

TEST(Emit, FormatsAndDeterminism) {
  const auto store = full_store({"a", "b"}, 3);
  EXPECT_THROW(emit_report(store, temp_dir("none"), {}), Error);
  EXPECT_THROW(parse_formats("csv,pdf"), Error);
  EXPECT_EQ(parse_formats(" csv , svg"), (std::set<std::string>{"csv", "svg"}));

  const auto d1 = temp_dir("emit1"), d2 = temp_dir("emit2");
  const auto files = emit_report(store, d1, {"csv", "svg", "json"});
  EXPECT_EQ(files.size(), 8u);
  emit_report(store, d2, {"csv", "svg", "json"});
  for (const auto& f : files) {
    EXPECT_EQ(slurp(f), slurp(d2 / f.filename())) << f;
    EXPECT_FALSE(slurp(f).empty());
  }
  EXPECT_EQ(emit_report(store, temp_dir("csvonly"), {"csv"}).size(), 4u);
}

TEST(Emit, SummaryJson) {
  auto store = full_store({"a", "b"}, 4);
  store.header.dataset_sha256 = "abc";
  const auto dir = temp_dir("summary");
  emit_report(store, dir, {"json"});
  const auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(j["granularity"], "cell");
  EXPECT_EQ(j["multiple_comparison_correction"], "none");
  EXPECT_EQ(j["alpha"], 0.05);
  EXPECT_EQ(j["cells"].size(), 16u);
  EXPECT_EQ(j["n_experiments"], 32);
  EXPECT_EQ(j["n_evaluations"], 128);
  EXPECT_EQ(j["dataset_sha256"], "abc");
  EXPECT_EQ(j["n_tests"], 64 + 16);
}

TEST(Emit, SvgIsWellFormedEnough) {
  const auto store = full_store({"a<&>"}, 6);
  const auto svg = heatmap_svg(icat_delta_matrix(store));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  const auto by_model = by_model_svg(aggregate_by_model(store));
  EXPECT_NE(by_model.find("a&lt;&amp;&gt;"), std::string::npos);
  EXPECT_EQ(by_model.find("a<&>"), std::string::npos);
}
