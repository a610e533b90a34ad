#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>

#include "spillover/pipeline.hpp"
#include "support.hpp"

using namespace spillover;
using namespace testing_support;

namespace {

reference::ModelConfig small_fixture_config() {
  auto c = small_config(0);
  c.max_seq_len = 512;
  return c;
}

BackendSource small_source(const std::string& id, std::uint64_t seed = 0) {
  return {id, [seed, id]() -> std::unique_ptr<Backend> {
            auto c = small_fixture_config();
            c.seed = seed;
            return std::make_unique<ReferenceBackend>(c, id);
          }};
}

AuditConfig quick_config() {
  AuditConfig c;
  c.biasedit.steps = 2;
  return c;
}

Dataset fixture_dataset() { return open_dataset(data_file("fixture.jsonl")); }

}  // namespace

TEST(Sha256, KnownDigest) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Baseline, CoversEveryDimension) {
  ReferenceBackend b(small_fixture_config());
  const auto data = fixture_dataset();
  const auto t = run_baseline(b, data.examples);
  for (auto d : kAllDimensions) {
    EXPECT_EQ(t[d].n, 3u);
    EXPECT_EQ(t[d].dimension, d);
    EXPECT_GE(t[d].icat, 0.0);
  }
  EXPECT_EQ(run_baseline(b, data.examples), t);
}

TEST(Baseline, InvariantToExampleOrder) {
  ReferenceBackend b(small_fixture_config());
  auto examples = fixture_examples();
  const auto t = run_baseline(b, examples);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 3; ++i) {
    std::shuffle(examples.begin(), examples.end(), rng);
    EXPECT_EQ(run_baseline(b, examples), t);
  }
}

TEST(Baseline, MissingDimensionIsAnError) {
  ReferenceBackend b(small_fixture_config());
  auto examples = fixture_examples();
  std::erase_if(examples, [](const TripletExample& e) { return e.dimension == BiasDimension::religion; });
  EXPECT_THROW(run_baseline(b, examples), Error);
}

TEST(Intervention, ZeroAlphaReproducesBaseline) {
  ReferenceBackend b(small_fixture_config());
  const auto examples = fixture_examples();
  auto cfg = quick_config();
  cfg.alpha = 0.0;
  const auto base = run_baseline(b, examples);
  EXPECT_EQ(run_intervention(b, examples, Technique::logit_steering, BiasDimension::gender, cfg, 0), base);
  EXPECT_EQ(run_intervention(b, examples, Technique::activation_patching, BiasDimension::race, cfg, 0), base);
}

TEST(Intervention, RecordsCarryDeltas) {
  ReferenceBackend b(small_fixture_config());
  const auto data = fixture_dataset();
  const auto cfg = quick_config();
  const auto base = run_baseline(b, data.examples);
  std::vector<AuditRecord> sink;
  const ExperimentSpec spec{"small", Technique::prompt_debiasing, BiasDimension::gender, 5, data.path};
  const auto st = run_experiment(b, data, spec, base, cfg, sink);
  ASSERT_EQ(st.state, ExperimentState::ok) << st.message;
  ASSERT_EQ(sink.size(), 4u);
  for (const auto& r : sink) {
    EXPECT_EQ(r.baseline, base[r.eval_dimension]);
    EXPECT_DOUBLE_EQ(r.deltas.d_icat, r.intervened.icat - r.baseline.icat);
    EXPECT_DOUBLE_EQ(r.deltas.d_ss, r.intervened.ss - r.baseline.ss);
  }
}

TEST(Intervention, BiasEditRevertsAfterEvaluation) {
  ReferenceBackend b(small_fixture_config());
  const auto data = fixture_dataset();
  const auto base = run_baseline(b, data.examples);
  std::vector<AuditRecord> sink;
  const auto st =
      run_experiment(b, data, {"small", Technique::biasedit, BiasDimension::race, 1, data.path}, base, quick_config(), sink);
  EXPECT_EQ(st.state, ExperimentState::ok) << st.message;
  EXPECT_EQ(run_baseline(b, data.examples), base);
}

TEST(Intervention, MissingCapabilityIsSkipped) {
  RestrictedBackend b(std::make_unique<ReferenceBackend>(small_fixture_config()), {Capability::hidden_states});
  const auto data = fixture_dataset();
  const auto base = run_baseline(b, data.examples);
  for (auto t : kAllTechniques) {
    std::vector<AuditRecord> sink;
    const auto st = run_experiment(b, data, {"r", t, BiasDimension::gender, 0, data.path}, base, quick_config(), sink);
    EXPECT_EQ(st.state, ExperimentState::skipped) << to_string(t);
    EXPECT_FALSE(st.message.empty());
    EXPECT_TRUE(sink.empty());
  }
}

TEST(Intervention, OtherErrorsFail) {
  ReferenceBackend b(small_fixture_config());
  const auto data = fixture_dataset();
  const auto base = run_baseline(b, data.examples);
  auto cfg = quick_config();
  cfg.pairs = pairs_for(cfg.pairs, BiasDimension::race);
  std::vector<AuditRecord> sink;
  const auto st = run_experiment(b, data, {"s", Technique::logit_steering, BiasDimension::gender, 0, data.path}, base, cfg, sink);
  EXPECT_EQ(st.state, ExperimentState::failed);
}

TEST(Seeds, DerivedPerExperiment) {
  const auto a = derive_seed(0, "m", Technique::biasedit, BiasDimension::gender);
  EXPECT_EQ(a, derive_seed(0, "m", Technique::biasedit, BiasDimension::gender));
  EXPECT_NE(a, derive_seed(1, "m", Technique::biasedit, BiasDimension::gender));
  EXPECT_NE(a, derive_seed(0, "n", Technique::biasedit, BiasDimension::gender));
  EXPECT_NE(a, derive_seed(0, "m", Technique::biasedit, BiasDimension::race));
  EXPECT_NE(a, derive_seed(0, "m", Technique::logit_steering, BiasDimension::gender));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(splitmix64(0), 0xe220a8397b1dcdafULL);
}

TEST(Grid, FullMatrixOnFixture) {
  const auto data = fixture_dataset();
  std::vector<std::string> progress;
  GridOptions opts;
  opts.progress = [&](const std::string& m) { progress.push_back(m); };
  const auto store = run_grid({small_source("small")}, data, quick_config(), opts);
  EXPECT_EQ(store.count(ExperimentState::ok), 16u);
  EXPECT_EQ(store.size(), 64u);
  EXPECT_EQ(store.replacements(), 0u);
  EXPECT_EQ(store.header.dataset_sha256, data.sha256);
  EXPECT_EQ(progress.size(), 17u);
  std::set<std::uint64_t> seeds;
  for (const auto& s : store.statuses()) seeds.insert(s.spec.seed);
  EXPECT_EQ(seeds.size(), 16u);
}

TEST(Grid, ParallelMatchesSerial) {
  const auto data = fixture_dataset();
  auto cfg = quick_config();
  cfg.techniques = {Technique::logit_steering, Technique::biasedit};
  cfg.targets = {BiasDimension::gender, BiasDimension::profession};
  const std::vector<BackendSource> sources = {small_source("a", 0), small_source("b", 3)};
  const auto serial = run_grid(sources, data, cfg);
  GridOptions two;
  two.jobs = 2;
  const auto parallel = run_grid(sources, data, cfg, two);
  EXPECT_EQ(serial.size(), 32u);
  EXPECT_EQ(serial.records(), parallel.records());
  EXPECT_EQ(serial.statuses(), parallel.statuses());
  EXPECT_EQ(serial.baselines, parallel.baselines);
}

TEST(Grid, MixedCapabilitiesSkipInsteadOfFailing) {
  const auto data = fixture_dataset();
  auto cfg = quick_config();
  cfg.targets = {BiasDimension::gender};
  BackendSource limited{"limited", [] {
                          return std::make_unique<RestrictedBackend>(
                              std::make_unique<ReferenceBackend>(small_fixture_config()),
                              std::set<Capability>{Capability::hidden_states, Capability::intervene});
                        }};
  const auto store = run_grid({limited}, data, cfg);
  EXPECT_EQ(store.count(ExperimentState::ok), 2u);
  EXPECT_EQ(store.count(ExperimentState::skipped), 2u);
  EXPECT_EQ(store.size(), 8u);
}

TEST(Grid, RejectsEmptyAxes) {
  const auto data = fixture_dataset();
  auto cfg = quick_config();
  cfg.techniques.clear();
  EXPECT_THROW(run_grid({small_source("s")}, data, cfg), Error);
  cfg = quick_config();
  cfg.targets.clear();
  EXPECT_THROW(run_grid({small_source("s")}, data, cfg), Error);
  EXPECT_THROW(run_grid({}, data, quick_config()), Error);
}

TEST(Grid, BaselineFailureMarksExperimentsFailed) {
  const auto data = fixture_dataset();
  auto cfg = quick_config();
  cfg.techniques = {Technique::logit_steering};
  cfg.targets = {BiasDimension::gender};
  BackendSource tiny{"tiny", [] {
                       auto c = small_config();
                       c.max_seq_len = 8;
                       return std::make_unique<ReferenceBackend>(c);
                     }};
  const auto store = run_grid({tiny}, data, cfg);
  EXPECT_EQ(store.count(ExperimentState::failed), 1u);
  EXPECT_TRUE(store.empty());
}

TEST(Store, RoundTrip) {
  const auto data = fixture_dataset();
  auto cfg = quick_config();
  cfg.techniques = {Technique::prompt_debiasing};
  cfg.targets = {BiasDimension::gender, BiasDimension::race};
  const auto store = run_grid({small_source("s")}, data, cfg);
  std::ostringstream out;
  store_write(store, out);
  EXPECT_EQ(store_parse(out.str()), store);
  const auto path = temp_dir("store") / "store.jsonl";
  store_write(store, path);
  EXPECT_EQ(store_read(path), store);
  std::ostringstream again;
  store_write(store_read(path), again);
  EXPECT_EQ(again.str(), out.str());
}

TEST(Store, DuplicateRecordsWarnAndReplace) {
  ResultStore store;
  const auto r = synthetic_record("m", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 60, 55);
  WarningCapture warnings;
  EXPECT_FALSE(store.upsert(r));
  EXPECT_TRUE(store.upsert(r));
  EXPECT_EQ(store.size(), 1u);
  EXPECT_EQ(store.replacements(), 1u);
  ASSERT_EQ(warnings.messages().size(), 1u);
  EXPECT_NE(warnings.messages()[0].find("m/biasedit/gender->race"), std::string::npos);
}

TEST(Store, ParseErrorsNameTheLine) {
  ResultStore store;
  store.upsert(synthetic_record("m", Technique::biasedit, BiasDimension::gender, BiasDimension::race, 60, 55));
  std::ostringstream out;
  store_write(store, out);
  const std::string good = out.str();
  try {
    store_parse(good + "{broken\n", "x.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("x.jsonl:3:", 0), 0u) << e.what();
  }
  auto bumped = good;
  bumped.replace(bumped.find("\"version\":1"), 11, "\"version\":2");
  EXPECT_THROW(store_parse(bumped), Error);
  EXPECT_THROW(store_parse(""), Error);
  EXPECT_THROW(store_parse(good.substr(good.find('\n') + 1)), Error);

  auto tampered = nlohmann::json::parse(good.substr(good.find('\n') + 1));
  tampered["deltas"]["d_icat"] = 99.0;
  EXPECT_THROW(store_parse(good.substr(0, good.find('\n') + 1) + tampered.dump() + "\n"), Error);
}

TEST(ModelsFile, ParsesIdsCommentsAndPaths) {
  const auto sources = parse_models_file(
      "# models\n"
      "\n"
      "main=ref:reference_model.json\n"
      "  ref:  \n",
      data_dir());
  ASSERT_EQ(sources.size(), 2u);
  EXPECT_EQ(sources[0].id, "main");
  EXPECT_EQ(sources[1].id, "ref:");
  EXPECT_EQ(sources[0].factory()->info().metadata.at("max_seq_len"), "512");
  EXPECT_THROW(parse_models_file("a=ref:\na=ref:\n"), Error);
  EXPECT_THROW(parse_models_file("# nothing\n"), Error);
  EXPECT_THROW(parse_models_file("x=gpt2\n"), Error);
  EXPECT_THROW(parse_models_file("bridge:\n"), Error);
}

TEST(Config, ResolutionOrder) {
  const auto dir = temp_dir("config");
  std::ofstream(dir / "a.json") << R"({"alpha": 0.5, "grid": {"targets": ["race"]}})";
  std::ofstream(dir / "b.json") << R"({"alpha": 0.25, "pairs": "pairs.json"})";
  std::ofstream(dir / "pairs.json") << R"([{"dimension": "race", "pole_a": "x y", "pole_b": "z w"}])";
  ::unsetenv(kConfigEnvVar);
  EXPECT_EQ(resolve_config(std::nullopt).alpha, kDefaultAlpha);
  ::setenv(kConfigEnvVar, (dir / "b.json").c_str(), 1);
  const auto from_env = resolve_config(std::nullopt);
  EXPECT_EQ(from_env.alpha, 0.25);
  ASSERT_EQ(from_env.pairs.size(), 1u);
  EXPECT_EQ(from_env.pairs[0].pole_a, "x y");
  const auto explicit_cfg = resolve_config(dir / "a.json");
  EXPECT_EQ(explicit_cfg.alpha, 0.5);
  EXPECT_EQ(explicit_cfg.targets, std::vector<BiasDimension>{BiasDimension::race});
  ::unsetenv(kConfigEnvVar);
}

TEST(Config, Validation) {
  using nlohmann::json;
  EXPECT_THROW(pairs_from_json(json::parse(R"([{"dimension":"gender","pole_a":"a","pole_b":"a"}])")), Error);
  EXPECT_THROW(pairs_from_json(json::parse(R"([{"dimension":"age","pole_a":"a","pole_b":"b"}])")), Error);
  EXPECT_THROW(prompts_from_json(json::parse(R"({"gender":"   "})")), Error);
  EXPECT_EQ(prompts_from_json(json::parse(R"({"gender":"Be fair."})"))[BiasDimension::gender], "Be fair. ");
  EXPECT_THROW(config_from_json(json::parse(R"({"biasedit":{"learning_rate":-1}})")), Error);
  EXPECT_THROW(config_from_json(json::parse(R"({"grid":{"techniques":["magic"]}})")), Error);
}

TEST(Config, RoundTripAndShippedFilesMatchDefaults) {
  AuditConfig c;
  c.alpha = 0.75;
  c.seed = 9;
  c.biasedit.target_layer = 3;
  c.biasedit.seed = 9;
  c.techniques = {Technique::biasedit};
  const auto back = config_from_json(config_to_json(c));
  EXPECT_EQ(back.alpha, 0.75);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.biasedit, c.biasedit);
  EXPECT_EQ(back.techniques, c.techniques);
  EXPECT_EQ(back.pairs, c.pairs);

  auto read = [](const std::string& name) { return nlohmann::json::parse(detail::read_file(data_file(name))); };
  EXPECT_EQ(read("config.json"), config_to_json(AuditConfig{}));
  EXPECT_EQ(pairs_from_json(read("pairs.json")), default_pairs());
  EXPECT_EQ(prompts_from_json(read("prompts.json")), default_prompts());
}

TEST(Config, DefaultPairsCoverEveryDimension) {
  const auto pairs = default_pairs();
  for (auto d : kAllDimensions) EXPECT_GE(pairs_for(pairs, d).size(), 8u) << to_string(d);
  for (const auto& p : pairs) EXPECT_NE(p.pole_a, p.pole_b);
}
