#include "ncv/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "ncv/rng.hpp"

namespace ncv {

using nlohmann::json;

namespace {

constexpr double kExhaustiveGuard = 1e6;

void require_nonempty(const Split& split) {
  if (split.size() == 0) throw ContractError("metric requested over an empty split");
}

std::vector<double> softmax_row(std::span<const double> logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace

double binomial_guard(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  k = std::min(k, n - k);
  double c = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    c *= static_cast<double>(n - i) / static_cast<double>(i + 1);
    if (c > 1e15) return c;  // far beyond any guard we use
  }
  return c;
}

double completeness(const Split& split, const AgentBundle& agents, const GameConfig& cfg,
                    const DatasetBundle& data) {
  require_nonempty(split);
  const auto decisions = evaluate_split(split, agents, cfg, data, false);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (!decisions[i].reject && decisions[i].predicted == split.samples[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

double soundness(const Split& split, const AgentBundle& agents, const GameConfig& cfg,
                 const DatasetBundle& data) {
  require_nonempty(split);
  const auto decisions = evaluate_split(split, agents, cfg, data, true);
  std::size_t safe = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (decisions[i].reject || decisions[i].predicted == split.samples[i].label) ++safe;
  }
  return static_cast<double>(safe) / static_cast<double>(split.size());
}

double exhaustive_soundness(const Split& split, const AgentBundle& agents,
                            const GameConfig& cfg, const DatasetBundle& data, std::size_t m,
                            std::size_t unit_count) {
  require_nonempty(split);
  if (m > unit_count) {
    throw ContractError("mask size " + std::to_string(m) + " exceeds unit count " +
                        std::to_string(unit_count));
  }
  const double n_masks = binomial_guard(unit_count, m);
  if (n_masks > kExhaustiveGuard) {
    throw ContractError("C(" + std::to_string(unit_count) + "," + std::to_string(m) +
                        ") = " + std::to_string(n_masks) +
                        " masks exceed the 1e6 exhaustive guard; use a smaller instance");
  }
  const std::size_t block = unit_block_width(cfg, data);
  const std::size_t width = data.encoding_width();

  // enumerate all combinations once
  std::vector<std::vector<std::size_t>> masks;
  masks.reserve(static_cast<std::size_t>(n_masks));
  std::vector<std::size_t> comb(m);
  for (std::size_t i = 0; i < m; ++i) comb[i] = i;
  while (true) {
    masks.push_back(comb);
    std::size_t i = m;
    while (i > 0) {
      --i;
      if (comb[i] != i + unit_count - m) break;
      if (i == 0) {
        i = m;
        break;
      }
    }
    if (i == m) break;
    ++comb[i];
    for (std::size_t j = i + 1; j < m; ++j) comb[j] = comb[j - 1] + 1;
  }

  std::size_t safe_samples = 0;
  Tensor masked({masks.size(), width}, 0.0);
  for (std::size_t si = 0; si < split.size(); ++si) {
    const ConceptSample& s = split.samples[si];
    std::fill(masked.values.begin(), masked.values.end(), 0.0);
    for (std::size_t mi = 0; mi < masks.size(); ++mi) {
      double* row = masked.values.data() + mi * width;
      for (std::size_t unit : masks[mi]) {
        for (std::size_t c = 0; c < block; ++c) {
          row[unit * block + c] = s.encoding[unit * block + c];
        }
      }
    }
    const Tensor logits = verifier_logits(agents, masked, data);
    bool safe = true;
    const std::size_t w = logits.shape[1];
    for (std::size_t mi = 0; mi < masks.size() && safe; ++mi) {
      const auto p = softmax_row({logits.values.data() + mi * w, w});
      const std::size_t decision = argmax_lowest(p);
      if (decision != s.label && decision != data.klasses) safe = false;
    }
    if (safe) ++safe_samples;
  }
  return static_cast<double>(safe_samples) / static_cast<double>(split.size());
}

double val_test_gap(const MetricsReport& val_report, const MetricsReport& test_report) {
  return val_report.completeness - test_report.completeness;
}

MetricsReport evaluate_metrics(const Split& split, const AgentBundle& agents,
                               const GameConfig& cfg, const DatasetBundle& data,
                               bool exhaustive) {
  require_nonempty(split);
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport rep;
  rep.seed = cfg.seed;
  rep.samples = split.size();

  const auto merlin_view = evaluate_split(split, agents, cfg, data, false);
  const auto morgana_view = evaluate_split(split, agents, cfg, data, true);
  std::vector<std::size_t> class_total(data.klasses, 0), class_correct(data.klasses, 0);
  std::size_t correct = 0, safe = 0, rejected = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::size_t y = split.samples[i].label;
    class_total[y] += 1;
    if (merlin_view[i].reject) {
      ++rejected;
    } else if (merlin_view[i].predicted == y) {
      ++correct;
      class_correct[y] += 1;
    }
    if (morgana_view[i].reject || morgana_view[i].predicted == y) ++safe;
  }
  rep.completeness = static_cast<double>(correct) / static_cast<double>(split.size());
  rep.soundness = static_cast<double>(safe) / static_cast<double>(split.size());
  rep.rejection_rate = static_cast<double>(rejected) / static_cast<double>(split.size());
  rep.per_class_accuracy.resize(data.klasses, 0.0);
  for (std::size_t k = 0; k < data.klasses; ++k) {
    if (class_total[k] > 0) {
      rep.per_class_accuracy[k] =
          static_cast<double>(class_correct[k]) / static_cast<double>(class_total[k]);
    }
  }
  if (exhaustive) {
    rep.exhaustive_soundness = exhaustive_soundness(split, agents, cfg, data, cfg.mask_size,
                                                    unit_count(cfg, data));
  }
  rep.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::string MetricsReport::to_json(int indent) const {
  json j;
  j["completeness"] = completeness;
  j["soundness"] = soundness ? json(*soundness) : json(nullptr);
  j["per_class_accuracy"] = per_class_accuracy;
  j["rejection_rate"] = rejection_rate;
  j["val_test_gap"] = val_test_gap ? json(*val_test_gap) : json(nullptr);
  j["exhaustive_soundness"] =
      exhaustive_soundness ? json(*exhaustive_soundness) : json(nullptr);
  j["seed"] = seed;
  j["wall_clock_seconds"] = wall_clock_seconds;
  j["samples"] = samples;
  return j.dump(indent);
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

namespace {

Tensor baseline_logits(const BaselineModel& model, const Tensor& x) {
  if (model.kind == BaselineKind::nonlinear_mlp) {
    return mlp_forward_eval(model.spec, model.params, x);
  }
  Tape tape;
  NodeId enc = tape.constant(x);
  BoundParams p = bind_params(tape, model.params, false);
  return tape.value(tape.add_bias(tape.matmul(enc, p.id("out.w")), p.id("out.b")));
}

Tensor split_matrix(const Split& split, std::size_t width) {
  Tensor x({split.size(), width}, 0.0);
  for (std::size_t i = 0; i < split.size(); ++i) {
    std::copy(split.samples[i].encoding.begin(), split.samples[i].encoding.end(),
              x.values.begin() + i * width);
  }
  return x;
}

}  // namespace

BaselineModel baseline_fit(const DatasetBundle& data, const BaselineConfig& cfg) {
  if (data.train.size() == 0) throw ContractError("cannot fit a baseline on an empty split");
  BaselineModel model;
  model.kind = cfg.kind;
  model.input_width = data.encoding_width();
  model.klasses = data.klasses;
  if (cfg.kind == BaselineKind::nonlinear_mlp) {
    model.spec.input_width = model.input_width;
    model.spec.hidden_widths = {cfg.hidden, cfg.hidden};
    model.spec.output_width = data.klasses;
    model.spec.activation = Activation::relu;
    model.params = init_params(model.spec, derive_seed(cfg.seed, 'B'));
  } else {
    model.params.add("out.w", glorot_tensor(model.input_width, data.klasses,
                                            derive_seed(cfg.seed, 'B')));
    model.params.add("out.b", Tensor({data.klasses}, 0.0));
  }
  AdamState opt = make_adam_state(model.params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  const std::size_t n = data.train.size();
  const std::size_t width = model.input_width;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, 0xB5, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      Tensor x({len, width}, 0.0);
      std::vector<std::size_t> y(len);
      for (std::size_t r = 0; r < len; ++r) {
        const ConceptSample& s = data.train.samples[order[start + r]];
        std::copy(s.encoding.begin(), s.encoding.end(), x.values.begin() + r * width);
        y[r] = s.label;
      }
      Tape tape;
      NodeId enc = tape.constant(std::move(x));
      BoundParams p = bind_params(tape, model.params, true);
      NodeId logits = model.kind == BaselineKind::nonlinear_mlp
                          ? mlp_forward(tape, model.spec, p, enc, false, 0)
                          : tape.add_bias(tape.matmul(enc, p.id("out.w")), p.id("out.b"));
      NodeId loss = tape.softmax_cross_entropy(logits, y);
      if (!std::isfinite(tape.value(loss)[0])) {
        throw RuntimeError("non-finite baseline loss at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      adam_step(opt, model.params, collect_grads(tape, p));
    }
  }
  return model;
}

double baseline_accuracy(const BaselineModel& model, const Split& split) {
  require_nonempty(split);
  const Tensor logits = baseline_logits(model, split_matrix(split, model.input_width));
  const std::size_t w = logits.shape[1];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::size_t pred = argmax_lowest({logits.values.data() + i * w, w});
    if (pred == split.samples[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

MetricsReport baseline_report(const BaselineModel& model, const Split& split,
                              std::uint64_t seed) {
  require_nonempty(split);
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport rep;
  rep.seed = seed;
  rep.samples = split.size();
  const Tensor logits = baseline_logits(model, split_matrix(split, model.input_width));
  const std::size_t w = logits.shape[1];
  std::vector<std::size_t> class_total(model.klasses, 0), class_correct(model.klasses, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::size_t y = split.samples[i].label;
    class_total[y] += 1;
    const std::size_t pred = argmax_lowest({logits.values.data() + i * w, w});
    if (pred == y) {
      ++correct;
      class_correct[y] += 1;
    }
  }
  rep.completeness = static_cast<double>(correct) / static_cast<double>(split.size());
  rep.per_class_accuracy.resize(model.klasses, 0.0);
  for (std::size_t k = 0; k < model.klasses; ++k) {
    if (class_total[k] > 0) {
      rep.per_class_accuracy[k] =
          static_cast<double>(class_correct[k]) / static_cast<double>(class_total[k]);
    }
  }
  rep.rejection_rate = 0.0;  // baselines cannot abstain
  rep.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace ncv
