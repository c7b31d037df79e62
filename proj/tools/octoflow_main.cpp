#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "octoflow/config.hpp"
#include "octoflow/eval.hpp"
#include "octoflow/kernels.hpp"
#include "octoflow/model.hpp"
#include "octoflow/rng.hpp"
#include "octoflow/threading.hpp"
#include "octoflow/train.hpp"

namespace fs = std::filesystem;
using namespace octoflow;

namespace {

// Bad command-line values that CLI11 cannot catch itself (list syntax,
// malformed env seed). Distinct from data/runtime failures for exit codes.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

config::RunConfig load_config(const std::string& path) {
  return path.empty() ? config::RunConfig::defaults() : config::RunConfig::load(path);
}

// Seed precedence: explicit --seed, then OCTOFLOW_SEED, then the config key.
std::uint64_t effective_seed(bool seed_given, std::uint64_t cli_seed,
                             const config::RunConfig& cfg) {
  if (seed_given) return cli_seed;
  if (const char* env = std::getenv("OCTOFLOW_SEED")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw UsageError("OCTOFLOW_SEED must be a non-negative integer, got '" +
                       std::string(env) + "'");
    return v;
  }
  return static_cast<std::uint64_t>(cfg.integer("seed"));
}

std::vector<double> parse_real_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    std::string item = text.substr(pos, comma == std::string::npos ? comma : comma - pos);
    char* end = nullptr;
    double v = std::strtod(item.c_str(), &end);
    if (item.empty() || end != item.c_str() + item.size())
      throw UsageError(what + ": expected comma-separated numbers, got '" + text + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::vector<std::int64_t> parse_count_list(const std::string& text, const std::string& what) {
  std::vector<std::int64_t> out;
  for (double v : parse_real_list(text, what)) {
    if (v < 1.0 || v != static_cast<double>(static_cast<std::int64_t>(v)))
      throw UsageError(what + ": entries must be positive integers, got '" + text + "'");
    out.push_back(static_cast<std::int64_t>(v));
  }
  return out;
}

std::string dir_basename(const std::string& dir) {
  fs::path p(dir);
  std::string name = p.filename().string();
  if (name.empty()) name = p.parent_path().filename().string();
  return name.empty() ? std::string("case") : name;
}

void apply_kernel_choice(const std::string& choice) {
  if (choice == "auto")
    kernels::select(kernels::BackendKind::kAuto);
  else if (choice == "scalar")
    kernels::select(kernels::BackendKind::kScalar);
  else if (choice == "avx2")
    kernels::select(kernels::BackendKind::kAvx2);
  else
    throw UsageError("--kernels must be auto, scalar or avx2");
}

model::SurrogateModel load_model_with_sidecar(const std::string& ckpt_path,
                                              config::RunConfig& sidecar_out) {
  std::string sidecar_path = ckpt_path + ".cfg";
  if (!fs::exists(sidecar_path))
    throw std::runtime_error("model sidecar config missing: " + sidecar_path);
  sidecar_out = config::RunConfig::load(sidecar_path);
  model::SurrogateModel model(train::model_config_from(sidecar_out), 0);
  model.load(ckpt_path);
  return model;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, int cases,
                 bool seed_given, std::uint64_t cli_seed) {
  config::RunConfig cfg = load_config(config_path);
  std::uint64_t seed = effective_seed(seed_given, cli_seed, cfg);
  cfg.set_integer("seed", static_cast<std::int64_t>(seed));

  train::Dataset dataset = train::build_dataset(cases, cfg, seed);
  train::save_dataset(out_dir, dataset, cfg);
  for (std::size_t i = 0; i < dataset.cases.size(); ++i) {
    const train::CaseData& c = dataset.cases[i];
    std::printf("%s: points=%zu frames=%lld outlets=%zu split=%s\n", c.id.c_str(),
                c.cloud.size(), static_cast<long long>(c.record.n_frames()),
                c.tree.outlet_segments.size(),
                train::split_name(dataset.splits[i]).c_str());
  }
  std::printf("wrote %zu cases to %s\n", dataset.cases.size(), out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path, int max_epochs_override, bool seed_given,
              std::uint64_t cli_seed) {
  config::RunConfig cfg = load_config(config_path);
  std::uint64_t seed = effective_seed(seed_given, cli_seed, cfg);
  cfg.set_integer("seed", static_cast<std::int64_t>(seed));
  if (max_epochs_override >= 0) cfg.set_integer("max_epochs", max_epochs_override);

  train::Dataset dataset = train::load_dataset(data_dir);
  model::SurrogateModel model(train::model_config_from(cfg), derive_seed(seed, 1));
  train::Trainer trainer(model, train::TrainConfig::from_run_config(cfg));
  train::FitResult fit = trainer.fit(dataset);

  fs::path parent = fs::path(out_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  model.save(out_path);
  cfg.save(out_path + ".cfg");
  fs::path log_path = fs::path(out_path).parent_path() / "train_log.csv";
  train::write_train_log_csv(log_path.string(), fit.log);

  std::printf("trained %d epochs; best val MAE %.6g m/s at epoch %d\n",
              static_cast<int>(fit.log.size()), fit.best_val_mae, fit.best_epoch);
  std::printf("checkpoint: %s\nlog: %s\n", out_path.c_str(), log_path.string().c_str());
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& case_dir,
                const std::string& times_text, const std::string& out_path,
                bool debug_counters) {
  config::RunConfig sidecar;
  model::SurrogateModel model = load_model_with_sidecar(model_path, sidecar);
  train::CaseData data = train::load_case(case_dir, dir_basename(case_dir));
  std::vector<double> times = parse_real_list(times_text, "--times");

  model::reset_unet_forward_count();
  model::PredictResult pred =
      model::predict(model, data.cloud, data.waveform, data.cloud.points, times,
                     data.time_scale_ms(), train::octree_config_from(sidecar));

  // Uniform spacing goes in the header; irregular lists record dt = 0.
  double dt = 0.0;
  if (times.size() >= 2) {
    dt = times[1] - times[0];
    for (std::size_t i = 2; i < times.size(); ++i)
      if (std::abs(times[i] - times[i - 1] - dt) > 1e-9) {
        dt = 0.0;
        break;
      }
  }
  oracle::SimulationRecord record;
  record.n_points = pred.n_points;
  record.frame_dt_ms = dt;
  record.times_ms = times;
  record.velocities = std::move(pred.velocities);
  oracle::write_record(out_path, record);

  if (debug_counters)
    std::printf("unet_forward_count=%lld\n",
                static_cast<long long>(model::unet_forward_count()));
  std::printf("predicted %lld times x %lld points -> %s\n",
              static_cast<long long>(pred.n_times),
              static_cast<long long>(pred.n_points), out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& split_text, const std::string& out_path) {
  config::RunConfig sidecar;
  model::SurrogateModel model = load_model_with_sidecar(model_path, sidecar);
  oct::OctreeConfig oc = train::octree_config_from(sidecar);
  train::Dataset dataset = train::load_dataset(data_dir);
  train::Split split = train::split_from_name(split_text);
  std::vector<std::size_t> indices = dataset.indices_of(split);
  if (indices.empty())
    throw std::runtime_error("dataset has no cases in split '" + split_text + "'");

  std::FILE* f = std::fopen(out_path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open for writing: " + out_path);
  std::fprintf(f, "case,mae,std,median,q75,q90,r2\n");
  auto write_row = [f](const std::string& name, const eval::ErrorStats& s) {
    std::fprintf(f, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", name.c_str(), s.mean,
                 s.stddev, s.median, s.q75, s.q90, s.r_squared);
  };

  // Per-case stats on time-averaged fields at the record's own frame times;
  // the pooled row concatenates all cases' averaged components.
  std::vector<double> pooled_pred, pooled_target;
  for (std::size_t idx : indices) {
    const train::CaseData& c = dataset.cases[idx];
    model::PredictResult pred =
        model::predict(model, c.cloud, c.waveform, c.cloud.points, c.record.times_ms,
                       c.time_scale_ms(), oc);
    std::vector<double> pred_avg =
        eval::time_average_field(pred.velocities.data(), pred.n_times, pred.n_points);
    std::vector<double> target_avg = eval::time_average_field(
        c.record.velocities.data(), c.record.n_frames(), c.record.n_points);
    write_row(c.id, eval::compute_stats(pred_avg, target_avg));
    pooled_pred.insert(pooled_pred.end(), pred_avg.begin(), pred_avg.end());
    pooled_target.insert(pooled_target.end(), target_avg.begin(), target_avg.end());
  }
  eval::ErrorStats pooled = eval::compute_stats(pooled_pred, pooled_target);
  write_row("pooled", pooled);
  if (std::fclose(f) != 0) throw std::runtime_error("write failed: " + out_path);

  std::printf("evaluated %zu %s cases: pooled MAE %.6g m/s, R^2 %.6g\n", indices.size(),
              split_text.c_str(), pooled.mean, pooled.r_squared);
  std::printf("stats: %s\n", out_path.c_str());
  return 0;
}

int cmd_bench(const std::string& model_path, const std::string& case_dir,
              const std::string& out_path, const std::string& spatial_text,
              const std::string& temporal_text, int runs) {
  config::RunConfig sidecar;
  model::SurrogateModel model = load_model_with_sidecar(model_path, sidecar);
  train::CaseData data = train::load_case(case_dir, dir_basename(case_dir));
  std::vector<std::int64_t> spatial = parse_count_list(spatial_text, "--spatial-grid");
  std::vector<std::int64_t> temporal = parse_count_list(temporal_text, "--temporal-grid");

  eval::RuntimeReport report = eval::benchmark(
      model, data, train::octree_config_from(sidecar), spatial, temporal, runs);
  eval::write_benchmark_csv(out_path, report);

  std::printf("threads=%d kernels=%s runs=%d\n", report.threads, report.kernels.c_str(),
              report.net.n_runs);
  std::printf("net: %.3f +/- %.3f ms\n", report.net.mean_ms, report.net.std_ms);
  std::printf("spatial (per 1e6 points): %.3f +/- %.3f ms\n", report.spatial.mean_ms,
              report.spatial.std_ms);
  std::printf("temporal (per 1e2 times): %.3f +/- %.3f ms\n", report.temporal.mean_ms,
              report.temporal.std_ms);
  std::printf(
      "cost-model fit: net %.3f ms, spatial %.3f ms/1e6 pts, temporal %.3f ms/1e2 "
      "times, max rel residual %.4f\n",
      report.fit_net_ms, report.fit_spatial_ms_per_1e6, report.fit_temporal_ms_per_1e2,
      report.fit_max_rel_residual);
  std::printf("bench: %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"octoflow: octree neural operator for transient vessel flow"};
  app.require_subcommand(1);

  int threads = 1;
  std::string kernel_choice = "auto";
  bool debug_counters = false;
  app.add_option("--threads", threads, "worker threads (1 = deterministic)")
      ->check(CLI::PositiveNumber);
  app.add_option("--kernels", kernel_choice, "kernel backend: auto, scalar, avx2");
  app.add_flag("--debug-counters", debug_counters, "print instrumentation counters");

  std::string config_path, out_dir, data_dir, model_path, case_dir, out_path;
  std::string times_text, split_text = "test";
  std::string spatial_text = "10000,100000", temporal_text = "10,100";
  int cases = 16, max_epochs_override = -1, runs = 10;
  std::uint64_t cli_seed = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic oracle dataset");
  gen->fallthrough();
  gen->add_option("--config", config_path, "run configuration file");
  gen->add_option("--out-dir", out_dir, "output dataset directory")->required();
  gen->add_option("--cases", cases, "number of cases");
  CLI::Option* gen_seed = gen->add_option("--seed", cli_seed, "base RNG seed");

  CLI::App* tr = app.add_subcommand("train", "train the surrogate on a dataset");
  tr->fallthrough();
  tr->add_option("--config", config_path, "run configuration file");
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--out", out_path, "checkpoint output path")->required();
  tr->add_option("--max-epochs", max_epochs_override, "override config max_epochs");
  CLI::Option* tr_seed = tr->add_option("--seed", cli_seed, "base RNG seed");

  CLI::App* pr = app.add_subcommand("predict", "predict velocities for one case");
  pr->fallthrough();
  pr->add_option("--model", model_path, "checkpoint path")->required();
  pr->add_option("--case-dir", case_dir, "case directory")->required();
  pr->add_option("--times", times_text, "comma-separated times in ms")->required();
  pr->add_option("--out", out_path, "output velocity file")->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  ev->fallthrough();
  ev->add_option("--model", model_path, "checkpoint path")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split_text, "train, val or test");
  ev->add_option("--out", out_path, "stats CSV path")->required();

  CLI::App* be = app.add_subcommand("bench", "time the three prediction phases");
  be->fallthrough();
  be->add_option("--model", model_path, "checkpoint path")->required();
  be->add_option("--case-dir", case_dir, "case directory")->required();
  be->add_option("--out", out_path, "benchmark CSV path")->required();
  be->add_option("--spatial-grid", spatial_text, "comma-separated point counts");
  be->add_option("--temporal-grid", temporal_text, "comma-separated time counts");
  be->add_option("--runs", runs, "timed runs per phase (>= 10)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    ThreadPool::instance().resize(static_cast<std::size_t>(threads));
    apply_kernel_choice(kernel_choice);
    if (gen->parsed())
      return cmd_gen_data(config_path, out_dir, cases, gen_seed->count() > 0, cli_seed);
    if (tr->parsed())
      return cmd_train(config_path, data_dir, out_path, max_epochs_override,
                       tr_seed->count() > 0, cli_seed);
    if (pr->parsed())
      return cmd_predict(model_path, case_dir, times_text, out_path, debug_counters);
    if (ev->parsed()) return cmd_eval(model_path, data_dir, split_text, out_path);
    if (be->parsed())
      return cmd_bench(model_path, case_dir, out_path, spatial_text, temporal_text, runs);
    return kExitUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "octoflow: %s\n", e.what());
    return kExitUsage;
  } catch (const train::NumericError& e) {
    std::fprintf(stderr, "octoflow: numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "octoflow: %s\n", e.what());
    std::string msg = e.what();
    return msg.rfind("config:", 0) == 0 ? kExitUsage : kExitData;
  }
}
