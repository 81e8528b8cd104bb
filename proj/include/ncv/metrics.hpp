#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ncv/data.hpp"
#include "ncv/game.hpp"

namespace ncv {

struct MetricsReport {
  double completeness = 0.0;
  std::optional<double> soundness;  // absent for baselines
  std::vector<double> per_class_accuracy;
  double rejection_rate = 0.0;
  std::optional<double> val_test_gap;
  std::optional<double> exhaustive_soundness;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;
  std::size_t samples = 0;

  std::string to_json(int indent = 2) const;
};

// Fraction of samples where the decision on Merlin's mask equals the label;
// rejection counts as failure. Throws on empty splits.
double completeness(const Split& split, const AgentBundle& agents, const GameConfig& cfg,
                    const DatasetBundle& data);

// Fraction of samples where the decision on Morgana's mask lands in
// {label, reject}.
double soundness(const Split& split, const AgentBundle& agents, const GameConfig& cfg,
                 const DatasetBundle& data);

// Worst case over every size-m mask: a sample counts as safe only if all
// C(unit_count, m) masks produce a decision in {label, reject}. Guarded to
// C(unit_count, m) <= 10^6.
double exhaustive_soundness(const Split& split, const AgentBundle& agents,
                            const GameConfig& cfg, const DatasetBundle& data, std::size_t m,
                            std::size_t unit_count);

double binomial_guard(std::size_t n, std::size_t k);  // C(n,k), capped to avoid overflow

double val_test_gap(const MetricsReport& val_report, const MetricsReport& test_report);

// Full report over one split; exhaustive adds the worst-case number when the
// instance is inside the combinatorial guard.
MetricsReport evaluate_metrics(const Split& split, const AgentBundle& agents,
                               const GameConfig& cfg, const DatasetBundle& data,
                               bool exhaustive = false);

// ---------------------------------------------------------------------------
// baselines: plain K-way classifiers over full encodings (no provers, no
// rejection class), sharing the same tensor/optimizer stack
// ---------------------------------------------------------------------------

enum class BaselineKind { linear, nonlinear_mlp };

struct BaselineConfig {
  BaselineKind kind = BaselineKind::nonlinear_mlp;
  std::size_t epochs = 30;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t hidden = 128;  // nonlinear only
  std::uint64_t seed = 1;
};

struct BaselineModel {
  BaselineKind kind = BaselineKind::linear;
  MlpSpec spec;      // nonlinear only
  ParamSet params;
  std::size_t input_width = 0;
  std::size_t klasses = 0;
};

BaselineModel baseline_fit(const DatasetBundle& data, const BaselineConfig& cfg);
double baseline_accuracy(const BaselineModel& model, const Split& split);
MetricsReport baseline_report(const BaselineModel& model, const Split& split,
                              std::uint64_t seed);

}  // namespace ncv
