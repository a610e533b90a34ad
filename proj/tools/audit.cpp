#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "spillover/bridge_server.hpp"
#include "spillover/config.hpp"
#include "spillover/pipeline.hpp"
#include "spillover/report.hpp"

namespace fs = std::filesystem;
using namespace spillover;

namespace {

struct ConfigFlags {
  std::string config, pairs, prompts;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "Audit config file (default: $SPILLOVER_AUDIT_CONFIG or built-ins)");
    cmd->add_option("--pairs", pairs, "Contrastive pair list, overrides the config");
    cmd->add_option("--prompts", prompts, "Prompt templates, overrides the config");
  }

  AuditConfig resolve() const {
    auto cfg = resolve_config(config.empty() ? std::nullopt : std::optional<fs::path>(config));
    if (!pairs.empty()) cfg.pairs = pairs_from_json(nlohmann::json::parse(detail::read_file(pairs)));
    if (!prompts.empty()) cfg.prompts = prompts_from_json(nlohmann::json::parse(detail::read_file(prompts)));
    return cfg;
  }
};

// Existing store for the same dataset, or a fresh one.
ResultStore open_store(const fs::path& path, const Dataset& data) {
  if (!fs::exists(path)) {
    ResultStore s;
    s.header.dataset_sha256 = data.sha256;
    s.header.created = utc_timestamp();
    return s;
  }
  auto s = store_read(path);
  if (s.header.dataset_sha256 != data.sha256)
    throw Error("store '" + path.string() + "' was built from a different dataset (sha256 " +
                s.header.dataset_sha256 + ")");
  return s;
}

void progress_line(const std::string& msg) { std::cerr << msg << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bias-mitigation spillover audit"};
  app.set_version_flag("--version", std::string(SPILLOVER_VERSION));
  app.require_subcommand(1);

  std::string model, data_path, out, technique, target, models_file, store_path, formats = "csv,svg,json", id;
  std::string model_config;
  std::size_t jobs = 1;
  std::optional<std::uint64_t> seed;
  bool reference = false;

  auto* baseline = app.add_subcommand("baseline", "Score the dataset without intervention");
  baseline->add_option("--model", model, "ref:<config> or bridge:<command>")->required();
  baseline->add_option("--id", id, "Backend id recorded in the store (default: the model spec)");
  baseline->add_option("--data", data_path, "StereoSet dev.json or triplet .jsonl")->required();
  baseline->add_option("--out", out, "Result store (JSON lines)")->required();

  ConfigFlags run_cfg;
  auto* run = app.add_subcommand("run", "Run one technique for one target dimension");
  run->add_option("--model", model, "ref:<config> or bridge:<command>")->required();
  run->add_option("--id", id, "Backend id recorded in the store (default: the model spec)");
  run->add_option("--technique", technique, "logit_steering | activation_patching | prompt_debiasing | biasedit")
      ->required();
  run->add_option("--target", target, "gender | profession | race | religion")->required();
  run->add_option("--data", data_path)->required();
  run->add_option("--out", out)->required();
  run->add_option("--seed", seed, "Top-level seed");
  run_cfg.add_to(run);

  ConfigFlags grid_cfg;
  auto* grid = app.add_subcommand("grid", "Run every technique x target for every model");
  grid->add_option("--models", models_file, "One model spec per line, optionally id=spec")->required();
  grid->add_option("--data", data_path)->required();
  grid->add_option("--out", out)->required();
  grid->add_option("--jobs", jobs, "Concurrent experiments, each with its own backend handles")
      ->check(CLI::PositiveNumber);
  grid->add_option("--seed", seed, "Top-level seed");
  grid_cfg.add_to(grid);

  auto* serve_cmd = app.add_subcommand("bridge-serve", "Serve a model over the bridge protocol on stdio");
  serve_cmd->add_flag("--reference", reference, "Serve the built-in reference model")->required();
  serve_cmd->add_option("--model-config", model_config, "Reference model config (JSON)");

  auto* report = app.add_subcommand("report", "Aggregate a result store into CSV/SVG/JSON");
  report->add_option("--store", store_path)->required();
  report->add_option("--out", out, "Output directory")->required();
  report->add_option("--formats", formats, "Comma-separated subset of csv,svg,json");

  auto* dump = app.add_subcommand("config", "Print the effective audit config as JSON");
  ConfigFlags dump_cfg;
  dump_cfg.add_to(dump);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*baseline) {
      const auto data = open_dataset(data_path);
      auto backend = parse_model_spec(model)();
      const std::string backend_id = id.empty() ? model : id;
      auto store = open_store(out, data);
      store.baselines[backend_id] = run_baseline(*backend, data.examples);
      store_write(store, fs::path(out));
      for (auto d : kAllDimensions) {
        const auto& s = store.baselines[backend_id][d];
        std::cout << to_string(d) << " n=" << s.n << " lms=" << s.lms << " ss=" << s.ss << " icat=" << s.icat << '\n';
      }
      return 0;
    }

    if (*run) {
      auto cfg = run_cfg.resolve();
      if (seed) cfg.seed = *seed;
      const auto data = open_dataset(data_path);
      auto backend = parse_model_spec(model)();
      const std::string backend_id = id.empty() ? model : id;
      auto store = open_store(out, data);
      if (!store.baselines.count(backend_id)) store.baselines[backend_id] = run_baseline(*backend, data.examples);
      const auto t = parse_technique(technique);
      const auto d = parse_dimension(target);
      const ExperimentSpec spec{backend_id, t, d, derive_seed(cfg.seed, backend_id, t, d), data.path};
      std::vector<AuditRecord> records;
      auto status = run_experiment(*backend, data, spec, store.baselines[backend_id], cfg, records);
      for (auto& r : records) store.upsert(std::move(r));
      std::cout << "status: " << to_string(status.state) << (status.message.empty() ? "" : " (" + status.message + ")")
                << '\n';
      const auto state = status.state;
      store.set_status(std::move(status));
      store_write(store, fs::path(out));
      for (const auto& r : store.records())
        if (r.spec.backend_id == backend_id && r.spec.technique == t && r.spec.target == d)
          std::cout << to_string(r.eval_dimension) << " d_lms=" << r.deltas.d_lms << " d_ss=" << r.deltas.d_ss
                    << " d_icat=" << r.deltas.d_icat << '\n';
      return state == ExperimentState::failed ? 1 : 0;
    }

    if (*grid) {
      auto cfg = grid_cfg.resolve();
      if (seed) cfg.seed = *seed;
      const auto data = open_dataset(data_path);
      const fs::path models_path(models_file);
      const auto sources = parse_models_file(detail::read_file(models_path), models_path.parent_path());
      GridOptions opts;
      opts.jobs = jobs;
      opts.progress = progress_line;
      const auto store = run_grid(sources, data, cfg, opts);
      store_write(store, fs::path(out));
      std::cout << "experiments: ok=" << store.count(ExperimentState::ok)
                << " skipped=" << store.count(ExperimentState::skipped)
                << " failed=" << store.count(ExperimentState::failed) << " records=" << store.size() << '\n';
      return store.count(ExperimentState::failed) ? 1 : 0;
    }

    if (*serve_cmd) {
      ReferenceSpec spec;
      if (!model_config.empty()) {
        const fs::path p(model_config);
        spec = reference_spec_from_json(nlohmann::json::parse(detail::read_file(p)), p.parent_path());
      }
      auto backend = make_reference_backend(spec);
      std::ios::sync_with_stdio(false);
      protocol::serve(*backend, std::cin, std::cout);
      return 0;
    }

    if (*report) {
      const auto store = store_read(store_path);
      for (const auto& f : emit_report(store, out, parse_formats(formats))) std::cout << f.string() << '\n';
      return 0;
    }

    if (*dump) {
      std::cout << config_to_json(dump_cfg.resolve()).dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
