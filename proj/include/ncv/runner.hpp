#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ncv/data.hpp"
#include "ncv/game.hpp"
#include "ncv/metrics.hpp"

namespace ncv {

struct DatasetConfig {
  std::string preset = "hans3-analog";
  std::size_t train = 3000;
  std::size_t val = 750;
  std::size_t test = 750;
  double clean_ratio = 1.0;
  EncodingKind encoding = EncodingKind::slot;
  std::uint64_t seed = 7;
};

struct SweepConfig {
  std::string kind = "shortcut_grid";  // shortcut_grid | mask_grid
  std::vector<double> clean_ratios = {0.0, 0.01, 0.05, 0.2};
  std::vector<std::size_t> mask_sizes = {4, 6, 12};
  std::vector<std::string> models = {"cbm_linear", "cbm_nonlinear", "ncv"};
  // desk-scale default: 5 seeds (the full-scale protocol uses 10-20)
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

struct RunConfig {
  DatasetConfig dataset;
  GameConfig game;
  BaselineConfig baseline;
  SweepConfig sweep;
};

// Preset defaults: hans3-analog | hans7-analog | xor2.
RunConfig default_config(const std::string& preset);

RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg, int indent = 2);

// Loads the file when given (otherwise the hans3-analog defaults; when an
// override sets dataset.preset the remaining defaults re-seed from that
// preset), then applies dot-path overrides like "game.gamma=0.25".
RunConfig resolve_config(const std::optional<std::string>& config_path,
                         const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed_override);

std::uint64_t file_checksum(const std::string& path);           // FNV-1a over bytes
std::uint64_t normalized_metrics_checksum(const std::string& path);  // wall clock zeroed

// ---------------------------------------------------------------------------
// verbs (throw ConfigError / RuntimeError / ContractError on failure)
// ---------------------------------------------------------------------------

// Writes <preset>.{train,val,test}.ncvd + sidecar + <preset>.mi.json under
// out_dir and returns the stem. The "-grid" presets (hans3-grid, hans7-grid)
// emit one bundle per clean ratio instead and return the directory.
std::string run_generate(const RunConfig& cfg, const std::string& out_dir);

struct TrainOutputs {
  std::string checkpoint_path;
  std::string log_path;
  std::string manifest_path;
  MetricsReport train_report;
  MetricsReport val_report;
};

TrainOutputs run_train(const RunConfig& cfg, const std::string& dataset_stem,
                       const std::string& out_dir);

// split: train | val | test | both. "both" evaluates val and test and fills
// the val-test gap on the returned (test) report.
MetricsReport run_eval(const std::string& checkpoint_path, const std::string& dataset_stem,
                       const std::string& split, bool exhaustive,
                       std::string* report_json_out = nullptr);

// JSON-lines certificates; unknown ids are listed in *unknown_out and skipped.
std::string run_explain(const std::string& checkpoint_path, const std::string& dataset_stem,
                        const std::string& split, const std::vector<std::uint64_t>& ids,
                        bool use_morgana, std::vector<std::uint64_t>* unknown_out = nullptr);

// Returns false when any grid cell failed (partial results are still
// written). Parallelism: min(jobs, NCV_THREADS or hardware concurrency).
bool run_sweep(const RunConfig& cfg, const std::string& out_dir);

}  // namespace ncv
