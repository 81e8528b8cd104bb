#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "ncv/runner.hpp"

namespace ncv {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct SweepJob {
  std::string cell;       // "ratio=0.05" or "mask=12"
  double clean_ratio = 1.0;
  std::size_t mask_size = 0;  // 0: use the config value
  std::string model;          // cbm_linear | cbm_nonlinear | ncv
  std::uint64_t seed = 0;
  std::size_t cell_order = 0, model_order = 0, seed_order = 0;
};

struct SweepResult {
  bool ok = false;
  std::string error;
  double val_acc = 0.0, test_acc = 0.0, gap = 0.0;
  double val_soundness = std::nan(""), test_soundness = std::nan("");
};

std::string two_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::size_t sweep_parallelism(std::size_t jobs) {
  std::size_t limit = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NCV_THREADS")) {
    const long parsed = std::strtol(env, nullptr, 10);
    if (parsed > 0) limit = static_cast<std::size_t>(parsed);
  }
  return std::max<std::size_t>(1, std::min(limit, jobs));
}

SweepResult execute_job(const RunConfig& cfg, const SweepJob& job) {
  SweepResult res;
  const RuleSpec spec = rule_preset(cfg.dataset.preset);
  const DatasetBundle data =
      generate_synthetic(spec, {cfg.dataset.train, cfg.dataset.val, cfg.dataset.test},
                         job.clean_ratio, cfg.dataset.encoding, cfg.dataset.seed);
  if (job.model == "ncv") {
    GameConfig game = cfg.game;
    game.seed = job.seed;
    if (job.mask_size > 0) game.mask_size = job.mask_size;
    AgentBundle agents = make_agents(game, data);
    train(agents, data, game);
    res.val_acc = completeness(data.val, agents, game, data);
    res.test_acc = completeness(data.test, agents, game, data);
    res.val_soundness = soundness(data.val, agents, game, data);
    res.test_soundness = soundness(data.test, agents, game, data);
  } else if (job.model == "cbm_linear" || job.model == "cbm_nonlinear") {
    BaselineConfig base = cfg.baseline;
    base.kind =
        job.model == "cbm_linear" ? BaselineKind::linear : BaselineKind::nonlinear_mlp;
    base.seed = job.seed;
    const BaselineModel model = baseline_fit(data, base);
    res.val_acc = baseline_accuracy(model, data.val);
    res.test_acc = baseline_accuracy(model, data.test);
  } else {
    throw ConfigError("unknown sweep model '" + job.model +
                      "' (expected cbm_linear|cbm_nonlinear|ncv)");
  }
  res.gap = res.val_acc - res.test_acc;
  res.ok = true;
  return res;
}

struct CellStats {
  std::size_t n = 0;
  double val_sum = 0, val_sq = 0;
  double test_sum = 0, test_sq = 0;
  double vs_sum = 0, vs_sq = 0;
  double ts_sum = 0, ts_sq = 0;

  void add(const SweepResult& r) {
    n += 1;
    val_sum += r.val_acc;
    val_sq += r.val_acc * r.val_acc;
    test_sum += r.test_acc;
    test_sq += r.test_acc * r.test_acc;
    if (!std::isnan(r.val_soundness)) {
      vs_sum += r.val_soundness;
      vs_sq += r.val_soundness * r.val_soundness;
      ts_sum += r.test_soundness;
      ts_sq += r.test_soundness * r.test_soundness;
    }
  }
  static double mean_of(double sum, std::size_t n) {
    return n ? sum / static_cast<double>(n) : 0.0;
  }
  static double std_of(double sum, double sq, std::size_t n) {
    if (n < 2) return 0.0;
    const double m = sum / static_cast<double>(n);
    const double var = (sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1);
    return std::sqrt(std::max(0.0, var));
  }
};

std::string mean_pm_std(double sum, double sq, std::size_t n) {
  return two_decimals(100.0 * CellStats::mean_of(sum, n)) + " ± " +
         two_decimals(100.0 * CellStats::std_of(sum, sq, n));
}

}  // namespace

bool run_sweep(const RunConfig& cfg, const std::string& out_dir) {
  const bool mask_grid = cfg.sweep.kind == "mask_grid";
  if (!mask_grid && cfg.sweep.kind != "shortcut_grid") {
    throw ConfigError("sweep kind must be shortcut_grid or mask_grid, got '" + cfg.sweep.kind +
                      "'");
  }
  if (cfg.sweep.seeds.size() < 2) {
    throw ConfigError("a sweep needs at least 2 seeds for a std estimate");
  }
  rule_preset(cfg.dataset.preset);  // validate before any write

  std::vector<SweepJob> jobs;
  const auto add_cell_jobs = [&](const std::string& cell, double ratio, std::size_t mask,
                                 std::size_t cell_order) {
    for (std::size_t mi = 0; mi < cfg.sweep.models.size(); ++mi) {
      for (std::size_t si = 0; si < cfg.sweep.seeds.size(); ++si) {
        SweepJob job;
        job.cell = cell;
        job.clean_ratio = ratio;
        job.mask_size = mask;
        job.model = cfg.sweep.models[mi];
        job.seed = cfg.sweep.seeds[si];
        job.cell_order = cell_order;
        job.model_order = mi;
        job.seed_order = si;
        jobs.push_back(std::move(job));
      }
    }
  };
  if (mask_grid) {
    for (std::size_t i = 0; i < cfg.sweep.mask_sizes.size(); ++i) {
      add_cell_jobs("mask=" + std::to_string(cfg.sweep.mask_sizes[i]),
                    cfg.dataset.clean_ratio, cfg.sweep.mask_sizes[i], i);
    }
  } else {
    for (std::size_t i = 0; i < cfg.sweep.clean_ratios.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%g", cfg.sweep.clean_ratios[i] * 100.0);
      add_cell_jobs(std::string("ratio=") + buf + "%", cfg.sweep.clean_ratios[i], 0, i);
    }
  }

  fs::create_directories(fs::path(out_dir) / "runs");

  std::vector<SweepResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers = sweep_parallelism(jobs.size());
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        results[i] = execute_job(cfg, jobs[i]);
      } catch (const std::exception& e) {
        results[i].ok = false;
        results[i].error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  // per-seed records, written in deterministic job order
  bool all_ok = true;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const SweepJob& job = jobs[i];
    const SweepResult& res = results[i];
    json j;
    j["cell"] = job.cell;
    j["model"] = job.model;
    j["seed"] = job.seed;
    j["ok"] = res.ok;
    if (res.ok) {
      j["val_acc"] = res.val_acc;
      j["test_acc"] = res.test_acc;
      j["gap"] = res.gap;
      if (!std::isnan(res.val_soundness)) {
        j["val_soundness"] = res.val_soundness;
        j["test_soundness"] = res.test_soundness;
      }
    } else {
      j["error"] = res.error;
      all_ok = false;
    }
    std::string cell_tag = job.cell;
    for (char& c : cell_tag) {
      if (c == '=' || c == '%' || c == '.') c = '_';
    }
    const std::string path =
        (fs::path(out_dir) / "runs" /
         (cell_tag + "_" + job.model + "_seed" + std::to_string(job.seed) + ".json"))
            .string();
    std::ofstream os(path);
    os << j.dump(2) << '\n';
  }

  // aggregate by (cell, model) in configured order
  std::ofstream csv((fs::path(out_dir) / "sweep.csv").string());
  csv << "# seeds=" << cfg.sweep.seeds.size()
      << " (desk-scale default; the full-scale protocol uses 10-20 seeds)\n";
  if (mask_grid) {
    csv << "mask_size,model,val_completeness,val_soundness,test_completeness,test_soundness\n";
  } else {
    csv << "ratio,model,val_acc,test_acc,gap\n";
  }
  const std::size_t n_models = cfg.sweep.models.size();
  const std::size_t n_seeds = cfg.sweep.seeds.size();
  const std::size_t n_cells = jobs.size() / (n_models * n_seeds);
  for (std::size_t c = 0; c < n_cells; ++c) {
    for (std::size_t m = 0; m < n_models; ++m) {
      CellStats stats;
      std::string cell_name;
      for (std::size_t s = 0; s < n_seeds; ++s) {
        const std::size_t i = (c * n_models + m) * n_seeds + s;
        cell_name = jobs[i].cell;
        if (results[i].ok) stats.add(results[i]);
      }
      if (stats.n == 0) continue;  // whole cell failed; partial table is still useful
      const std::string label = cell_name.substr(cell_name.find('=') + 1);
      if (mask_grid) {
        csv << label << ',' << cfg.sweep.models[m] << ','
            << mean_pm_std(stats.val_sum, stats.val_sq, stats.n) << ','
            << mean_pm_std(stats.vs_sum, stats.vs_sq, stats.n) << ','
            << mean_pm_std(stats.test_sum, stats.test_sq, stats.n) << ','
            << mean_pm_std(stats.ts_sum, stats.ts_sq, stats.n) << '\n';
      } else {
        const double gap = 100.0 * (CellStats::mean_of(stats.val_sum, stats.n) -
                                    CellStats::mean_of(stats.test_sum, stats.n));
        csv << label << ',' << cfg.sweep.models[m] << ','
            << mean_pm_std(stats.val_sum, stats.val_sq, stats.n) << ','
            << mean_pm_std(stats.test_sum, stats.test_sq, stats.n) << ','
            << two_decimals(gap) << '\n';
      }
    }
  }
  csv.close();

  json manifest;
  manifest["config"] = json::parse(config_to_json_text(cfg));
  manifest["kind"] = cfg.sweep.kind;
  manifest["jobs"] = jobs.size();
  manifest["failed"] = [&] {
    std::size_t failed = 0;
    for (const auto& r : results) failed += r.ok ? 0 : 1;
    return failed;
  }();
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(
                    file_checksum((fs::path(out_dir) / "sweep.csv").string())));
  manifest["outputs"] = {{"sweep.csv", std::string(hex)}};
  std::ofstream mos((fs::path(out_dir) / "sweep_manifest.json").string());
  mos << manifest.dump(2) << '\n';
  return all_ok;
}

}  // namespace ncv
