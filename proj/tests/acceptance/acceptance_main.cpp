// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// requested criterion fails. Criteria can be selected by number:
//   acceptance            runs everything
//   acceptance 7 8 10     runs the shared-training group only
//
// Training-heavy criteria run their seeds on a small worker pool; every run
// is seeded and deterministic, so reruns reproduce the same verdicts.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ncv/metrics.hpp"
#include "ncv/rng.hpp"
#include "ncv/runner.hpp"

using namespace ncv;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// harness
// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  std::function<bool(std::string&)> body;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename Job, typename Fn>
void parallel_for(const std::vector<Job>& jobs, Fn&& fn, std::size_t workers = 2) {
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      fn(i, jobs[i]);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, jobs.size()); ++w) pool.emplace_back(loop);
  for (auto& t : pool) t.join();
}

fs::path artifacts_dir() {
  const fs::path dir = fs::current_path() / "acceptance_artifacts";
  fs::create_directories(dir);
  return dir;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// the desk-scale operating point used for the hans3-analog trend criteria:
// preset defaults (mask 12, 50 epochs, lr 1e-3, weight decay 1e-4, gamma 0.5)
// with batch 256 and warmup 10, which the 3000-sample desk dataset needs for
// enough optimizer steps per epoch
RunConfig desk_hans3(std::uint64_t seed) {
  RunConfig cfg = default_config("hans3-analog");
  cfg.game.seed = seed;
  cfg.game.batch_size = 256;
  cfg.game.warmup_epochs = 10;
  return cfg;
}

DatasetBundle make_bundle(const RunConfig& cfg, double clean_ratio) {
  return generate_synthetic(rule_preset(cfg.dataset.preset),
                            {cfg.dataset.train, cfg.dataset.val, cfg.dataset.test},
                            clean_ratio, cfg.dataset.encoding, cfg.dataset.seed);
}

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness
// ---------------------------------------------------------------------------

bool criterion_gradients(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr double kStep = 1e-6;
  constexpr double kTol = 1e-5;
  double worst = 0.0;
  Rng rng(1001);

  auto check = [&](const ScalarFn& f, const Tensor& at) {
    worst = std::max(worst, grad_check(f, at, kStep));
  };

  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = nudge_off_kinks(random_tensor({3, 4}, rng), 1e-3);
    const Tensor w = random_tensor({4, 2}, rng);
    const Tensor v34 = random_tensor({3, 4}, rng);
    const Tensor m212 = random_tensor({2, 12}, rng);
    const Tensor gain4 = random_tensor({4}, rng);
    const Tensor shift4 = random_tensor({4}, rng);
    const Tensor q44 = random_tensor({4, 4}, rng);
    const Tensor k44 = random_tensor({4, 4}, rng);
    const Tensor v44 = random_tensor({4, 4}, rng);

    check([&](Tape& t, NodeId id) { return t.sum(id); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.matmul(id, t.constant(w))); }, x);
    check([&](Tape& t, NodeId id) {
      return t.mean(t.matmul(t.constant(v34), t.reshape(id, {4, 3})));
    }, x);
    check([&](Tape& t, NodeId id) { return t.sum(t.add(id, t.constant(v34))); }, x);
    check([&](Tape& t, NodeId id) { return t.sum(t.mul(id, t.constant(v34))); }, x);
    check([&](Tape& t, NodeId id) { return t.sum(t.mul(id, t.scale(id, 0.5))); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.relu(id)); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.gelu(id)); }, x);
    check([&](Tape& t, NodeId id) {
      return t.mean(t.add_bias(t.constant(m212), t.reshape(id, {12})));
    }, x);
    check([&](Tape& t, NodeId id) {
      return t.mean(t.layer_norm(id, t.constant(gain4), t.constant(shift4)));
    }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.dropout(id, 0.4, 99)); }, x);
    check([&](Tape& t, NodeId id) { return t.sum(t.concat_cols(id, t.constant(v34))); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.pool_slots(id, 3, PoolKind::mean)); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.broadcast_rows(id, 3)); }, x);
    check([&](Tape& t, NodeId id) { return t.softmax_cross_entropy(id, {1, 0, 3}); }, x);
    check([&](Tape& t, NodeId id) { return t.safe_mass_loss(id, {1, 0, 2}); }, x);
    check([&](Tape& t, NodeId id) {
      return t.mean(t.multihead_attention(id, t.constant(k44), t.constant(v44), 2, 2, 2));
    }, q44);
    check([&](Tape& t, NodeId id) {
      return t.mean(t.multihead_attention(t.constant(q44), id, t.constant(v44), 2, 2, 2));
    }, k44);
    check([&](Tape& t, NodeId id) {
      return t.mean(t.multihead_attention(t.constant(q44), t.constant(k44), id, 2, 2, 2));
    }, v44);
  }

  // agent forward passes, input side and parameter side
  MlpSpec mlp;
  mlp.input_width = 6;
  mlp.hidden_widths = {8, 8};
  mlp.output_width = 4;
  mlp.activation = Activation::gelu;
  SetEncoderSpec pool_spec;
  pool_spec.slot_width = 5;
  pool_spec.embed_width = 8;
  pool_spec.output_width = 3;
  SetEncoderSpec attn_spec = pool_spec;
  attn_spec.variant = SetVariant::attention_blocks;
  attn_spec.blocks = 2;
  attn_spec.heads = 2;

  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<std::size_t> targets = {1, 0};
    {
      const ParamSet ps = init_params(mlp, 500 + trial);
      const Tensor x = nudge_off_kinks(random_tensor({2, 6}, rng), 1e-3);
      check([&](Tape& t, NodeId id) {
        BoundParams b = bind_params(t, ps, false);
        return t.softmax_cross_entropy(mlp_forward(t, mlp, b, id, false, 0), targets);
      }, x);
      const std::size_t pi = trial % ps.items.size();
      check([&](Tape& t, NodeId id) {
        BoundParams b = bind_params(t, ps, false);
        b.ids[pi] = id;
        return t.softmax_cross_entropy(mlp_forward(t, mlp, b, t.constant(x), false, 0),
                                       targets);
      }, ps.items[pi].second);
    }
    for (const SetEncoderSpec& spec : {pool_spec, attn_spec}) {
      const ParamSet ps = init_params(spec, 900 + trial);
      const Tensor slots = nudge_off_kinks(random_tensor({2 * 3, spec.slot_width}, rng), 1e-3);
      check([&](Tape& t, NodeId id) {
        BoundParams b = bind_params(t, ps, false);
        return t.softmax_cross_entropy(set_forward(t, spec, b, id, 2, 3, false, 0), targets);
      }, slots);
      const std::size_t pi = trial % ps.items.size();
      check([&](Tape& t, NodeId id) {
        BoundParams b = bind_params(t, ps, false);
        b.ids[pi] = id;
        return t.softmax_cross_entropy(
            set_forward(t, spec, b, t.constant(slots), 2, 3, false, 0), targets);
      }, ps.items[pi].second);
    }
  }

  const double elapsed = seconds_since(t0);
  std::ostringstream os;
  os << "max relative error " << worst << " (tolerance 1e-5), " << elapsed << "s";
  detail = os.str();
  return worst < kTol && elapsed < 60.0;
}

// ---------------------------------------------------------------------------
// criterion 2: permutation invariance
// ---------------------------------------------------------------------------

std::uint64_t invariance_draw_seed(int draw, SetVariant variant) {
  return derive_seed(4242, static_cast<std::uint64_t>(draw),
                     variant == SetVariant::sum_pool_mlp ? 1 : 2);
}

bool criterion_invariance(std::string& detail) {
  double worst = 0.0;
  Rng rng(2002);
  for (SetVariant variant : {SetVariant::sum_pool_mlp, SetVariant::attention_blocks}) {
    SetEncoderSpec spec;
    spec.variant = variant;
    spec.slot_width = 6;
    spec.embed_width = 8;
    spec.blocks = 2;
    spec.heads = 2;
    spec.output_width = 4;
    for (int draw = 0; draw < 10; ++draw) {
      const ParamSet ps = init_params(spec, invariance_draw_seed(draw, variant));
      const std::size_t batch = 2, s = 6;
      const Tensor slots = random_tensor({batch, s, spec.slot_width}, rng);
      const Tensor base = set_forward_eval(spec, ps, slots);
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> perm(s);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = s; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        Tensor shuffled = slots;
        for (std::size_t bi = 0; bi < batch; ++bi)
          for (std::size_t si = 0; si < s; ++si)
            for (std::size_t c = 0; c < spec.slot_width; ++c)
              shuffled.values[(bi * s + si) * spec.slot_width + c] =
                  slots.values[(bi * s + perm[si]) * spec.slot_width + c];
        const Tensor out = set_forward_eval(spec, ps, shuffled);
        for (std::size_t i = 0; i < out.size(); ++i) {
          worst = std::max(worst, std::abs(out[i] - base[i]));
        }
      }
    }
  }
  std::ostringstream os;
  os << "max deviation " << worst << " over 100 permutations x 10 draws x 2 variants";
  detail = os.str();
  return worst < 1e-9;
}

// ---------------------------------------------------------------------------
// criterion 3: mask contracts
// ---------------------------------------------------------------------------

bool criterion_masks(std::string& detail) {
  Rng rng(3003);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    const std::size_t m = rng.below(n + 1);
    std::vector<double> scores(n);
    for (double& s : scores) s = rng.uniform(-2, 2);
    if (trial % 4 == 0) {
      for (std::size_t i = 0; i + 1 < n; i += 2) scores[i + 1] = scores[i];
    }
    const auto got = topk_indices(scores, m);
    if (got.size() != m) {
      detail = "cardinality violated";
      return false;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(m);
    std::sort(order.begin(), order.end());
    if (got != order) {
      detail = "sort-oracle mismatch at trial " + std::to_string(trial);
      return false;
    }
  }
  // constructed tie cases
  if (topk_indices(std::vector<double>{1.0, 1.0, 1.0, 1.0}, 2) !=
      std::vector<std::size_t>{0, 1}) {
    detail = "tie-break violated on all-equal scores";
    return false;
  }
  if (topk_indices(std::vector<double>{0.5, 0.9, 0.9, 0.1}, 1) !=
      std::vector<std::size_t>{1}) {
    detail = "tie-break violated on a leading pair";
    return false;
  }
  detail = "10000 random vectors match the sort oracle; tie cases break low";
  return true;
}

// ---------------------------------------------------------------------------
// criterion 4: loss endpoints
// ---------------------------------------------------------------------------

bool criterion_loss_endpoints(std::string& detail) {
  Rng rng(4004);
  for (int trial = 0; trial < 100; ++trial) {
    const double lm = rng.uniform(0, 4);
    const double lw = rng.uniform(0, 4);
    if (arthur_loss(lm, lw, 0.0) != lm || arthur_loss(lm, lw, 1.0) != lw) {
      detail = "scalar combination endpoints are not bitwise exact";
      return false;
    }
  }
  // tape-level: gamma 0 / gamma 1 combinations equal the individual losses
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({4, 4}, rng, -3.0, 3.0);
    const std::vector<std::size_t> y = {0, 2, 1, 0};
    Tape tape;
    NodeId id = tape.constant(logits);
    NodeId lm = merlin_loss(tape, id, y, 3);
    NodeId lw = morgana_safe_loss(tape, id, y, 3);
    const double vm = tape.value(lm)[0];
    const double vw = tape.value(lw)[0];
    NodeId at0 = tape.add(tape.scale(lm, 1.0), tape.scale(lw, 0.0));
    NodeId at1 = tape.add(tape.scale(lm, 0.0), tape.scale(lw, 1.0));
    if (tape.value(at0)[0] != vm || tape.value(at1)[0] != vw) {
      detail = "tape combination endpoints are not bitwise exact";
      return false;
    }
  }
  // safe mass: all probability on {y, reject} means (near-)zero loss
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double py = rng.uniform(0.05, 0.95);
    Tape tape;
    NodeId logits = tape.constant(
        Tensor({1, 3}, {std::log(py), -2000.0, std::log(1.0 - py)}));
    worst = std::max(worst, tape.value(morgana_safe_loss(tape, logits, {0}, 2))[0]);
  }
  std::ostringstream os;
  os << "endpoints bitwise; safe-mass loss at full safe mass <= " << worst;
  detail = os.str();
  return worst < 1e-9;
}

// ---------------------------------------------------------------------------
// criterion 5: exhaustive-adversary bound
// ---------------------------------------------------------------------------

bool criterion_exhaustive_bound(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  struct Row {
    double learned = 0, worst_case = 0;
    bool ok = false;
  };
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<Row> rows(seeds.size());
  parallel_for(seeds, [&](std::size_t i, std::uint64_t seed) {
    RunConfig cfg = default_config("xor2");
    cfg.dataset.train = 500;
    cfg.dataset.val = 100;
    cfg.dataset.test = 200;
    cfg.dataset.seed = 77;
    cfg.game.seed = seed;
    cfg.game.mask_size = 2;  // C(8,2) = 28 masks per sample
    cfg.game.epochs = 20;
    const DatasetBundle data = make_bundle(cfg, 1.0);
    AgentBundle agents = make_agents(cfg.game, data);
    train(agents, data, cfg.game);
    rows[i].learned = soundness(data.test, agents, cfg.game, data);
    rows[i].worst_case = exhaustive_soundness(data.test, agents, cfg.game, data, 2, 8);
    rows[i].ok = rows[i].learned >= rows[i].worst_case;
  });
  const double elapsed = seconds_since(t0);
  std::size_t held = 0;
  std::ostringstream os;
  os << "learned vs exhaustive:";
  for (const Row& r : rows) {
    held += r.ok ? 1 : 0;
    os << " " << r.learned << ">=" << r.worst_case;
  }
  os << " (" << elapsed << "s)";
  detail = os.str();
  return held == rows.size() && elapsed < 300.0;
}

// ---------------------------------------------------------------------------
// criterion 6: expressivity (xor)
// ---------------------------------------------------------------------------

bool criterion_expressivity(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig base = default_config("xor2");
  const DatasetBundle data = make_bundle(base, 1.0);

  BaselineConfig lin = base.baseline;
  lin.kind = BaselineKind::linear;
  lin.epochs = 40;
  lin.seed = 1;
  const double linear_acc = baseline_accuracy(baseline_fit(data, lin), data.test);

  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<double> comp(seeds.size(), 0.0);
  parallel_for(seeds, [&](std::size_t i, std::uint64_t seed) {
    RunConfig cfg = base;
    cfg.game.seed = seed;
    AgentBundle agents = make_agents(cfg.game, data);
    train(agents, data, cfg.game);
    comp[i] = completeness(data.test, agents, cfg.game, data);
  });
  std::size_t passed = 0;
  std::ostringstream os;
  os << "linear " << linear_acc << " (<=0.60 required); ncv completeness";
  for (double c : comp) {
    passed += c >= 0.95 ? 1 : 0;
    os << " " << c;
  }
  const double elapsed = seconds_since(t0);
  os << " (" << elapsed << "s)";
  detail = os.str();
  return linear_acc <= 0.60 && passed >= 4 && elapsed < 300.0;
}

// ---------------------------------------------------------------------------
// criteria 7, 8, 10: hans3-analog trend, mask monotonicity, gamma ablation
// ---------------------------------------------------------------------------

struct Hans3Runs {
  // keyed by (mask, gamma-is-zero): completeness/soundness per seed
  std::vector<double> comp_m4, comp_m6, comp_m12, sound_m12, sound_g0;
  double max_seed_seconds = 0;
  bool ready = false;
};

Hans3Runs g_hans3_runs;

void ensure_hans3_runs() {
  if (g_hans3_runs.ready) return;
  struct Job {
    std::size_t mask;
    double gamma;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    jobs.push_back({12, 0.5, seed});
    jobs.push_back({12, 0.0, seed});
    jobs.push_back({4, 0.5, seed});
    jobs.push_back({6, 0.5, seed});
  }
  const DatasetBundle data = make_bundle(desk_hans3(1), 1.0);
  struct Out {
    double comp = 0, sound = 0, seconds = 0;
  };
  std::vector<Out> outs(jobs.size());
  parallel_for(jobs, [&](std::size_t i, const Job& job) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg = desk_hans3(job.seed);
    cfg.game.mask_size = job.mask;
    cfg.game.gamma = job.gamma;
    AgentBundle agents = make_agents(cfg.game, data);
    train(agents, data, cfg.game);
    outs[i].comp = completeness(data.test, agents, cfg.game, data);
    outs[i].sound = soundness(data.test, agents, cfg.game, data);
    outs[i].seconds = seconds_since(t0);
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    const Out& out = outs[i];
    g_hans3_runs.max_seed_seconds = std::max(g_hans3_runs.max_seed_seconds, out.seconds);
    if (job.gamma == 0.0) {
      g_hans3_runs.sound_g0.push_back(out.sound);
    } else if (job.mask == 12) {
      g_hans3_runs.comp_m12.push_back(out.comp);
      g_hans3_runs.sound_m12.push_back(out.sound);
    } else if (job.mask == 6) {
      g_hans3_runs.comp_m6.push_back(out.comp);
    } else {
      g_hans3_runs.comp_m4.push_back(out.comp);
    }
  }
  g_hans3_runs.ready = true;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

bool criterion_hans3_trend(std::string& detail) {
  ensure_hans3_runs();
  std::size_t good = 0;
  for (std::size_t i = 0; i < g_hans3_runs.comp_m12.size(); ++i) {
    if (g_hans3_runs.comp_m12[i] >= 0.95 && g_hans3_runs.sound_m12[i] >= 0.99) ++good;
  }
  std::ostringstream os;
  os << good << "/5 seeds at completeness>=0.95 & soundness>=0.99 (comp";
  for (double c : g_hans3_runs.comp_m12) os << " " << c;
  os << "; sound";
  for (double s : g_hans3_runs.sound_m12) os << " " << s;
  os << "; slowest seed " << g_hans3_runs.max_seed_seconds << "s)";
  detail = os.str();
  return good >= 4 && g_hans3_runs.max_seed_seconds < 600.0;
}

bool criterion_mask_monotonicity(std::string& detail) {
  ensure_hans3_runs();
  const double c4 = mean_of(g_hans3_runs.comp_m4), s4 = std_of(g_hans3_runs.comp_m4);
  const double c6 = mean_of(g_hans3_runs.comp_m6), s6 = std_of(g_hans3_runs.comp_m6);
  const double c12 = mean_of(g_hans3_runs.comp_m12), s12 = std_of(g_hans3_runs.comp_m12);
  const double pool46 = std::sqrt(0.5 * (s4 * s4 + s6 * s6));
  const double pool612 = std::sqrt(0.5 * (s6 * s6 + s12 * s12));
  std::ostringstream os;
  os << "mean completeness m4=" << c4 << " m6=" << c6 << " m12=" << c12 << " (pooled std "
     << pool46 << ", " << pool612 << ")";
  detail = os.str();
  return c6 >= c4 - pool46 && c12 >= c6 - pool612;
}

bool criterion_gamma_ablation(std::string& detail) {
  ensure_hans3_runs();
  const double sound_g0 = mean_of(g_hans3_runs.sound_g0);
  const double sound_g05 = mean_of(g_hans3_runs.sound_m12);
  std::ostringstream os;
  os << "mean soundness gamma=0: " << sound_g0 << " vs gamma=0.5: " << sound_g05;
  detail = os.str();
  return sound_g0 < sound_g05;
}

// ---------------------------------------------------------------------------
// criterion 9: shortcut mitigation sweep
// ---------------------------------------------------------------------------

bool criterion_shortcut_sweep(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = desk_hans3(1);
  cfg.sweep.kind = "shortcut_grid";
  cfg.sweep.clean_ratios = {0.0, 0.01, 0.05, 0.2};
  cfg.sweep.models = {"cbm_linear", "cbm_nonlinear", "ncv"};
  cfg.sweep.seeds = {1, 2, 3, 4, 5};
  const fs::path out = artifacts_dir() / "c9_sweep";
  fs::remove_all(out);
  if (!run_sweep(cfg, out.string())) {
    detail = "sweep reported failed cells";
    return false;
  }

  // per-seed gaps from the runs directory
  struct Key {
    std::string cell, model;
  };
  auto gaps = [&](const std::string& cell, const std::string& model) {
    std::vector<double> out_gaps(5, std::nan(""));
    for (const auto& entry : fs::directory_iterator(out / "runs")) {
      std::ifstream is(entry.path());
      nlohmann::json j = nlohmann::json::parse(is);
      if (j["cell"] == cell && j["model"] == model && j["ok"].get<bool>()) {
        for (std::size_t s = 0; s < cfg.sweep.seeds.size(); ++s) {
          if (j["seed"].get<std::uint64_t>() == cfg.sweep.seeds[s]) {
            out_gaps[s] = j["gap"].get<double>();
          }
        }
      }
    }
    return out_gaps;
  };

  const auto ncv_gap0 = gaps("ratio=0%", "ncv");
  const auto ncv_gap20 = gaps("ratio=20%", "ncv");
  const double mean0 = mean_of(ncv_gap0);
  const double mean20 = mean_of(ncv_gap20);

  std::size_t win1 = 0, win5 = 0;
  const auto ncv1 = gaps("ratio=1%", "ncv"), non1 = gaps("ratio=1%", "cbm_nonlinear");
  const auto ncv5 = gaps("ratio=5%", "ncv"), non5 = gaps("ratio=5%", "cbm_nonlinear");
  for (std::size_t s = 0; s < 5; ++s) {
    if (ncv1[s] <= non1[s]) ++win1;
    if (ncv5[s] <= non5[s]) ++win5;
  }
  const double elapsed = seconds_since(t0);
  std::ostringstream os;
  os << "ncv mean gap 0%:" << mean0 << " vs 20%:" << mean20 << "; ncv<=nonlinear on " << win1
     << "/5 seeds at 1% and " << win5 << "/5 at 5% (" << elapsed << "s, table "
     << (out / "sweep.csv").string() << ")";
  detail = os.str();
  return mean20 < mean0 && win1 >= 3 && win5 >= 3 && elapsed < 3600.0;
}

// ---------------------------------------------------------------------------
// criterion 11: reproducibility
// ---------------------------------------------------------------------------

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

bool criterion_reproducibility(std::string& detail) {
  RunConfig cfg = desk_hans3(3);
  cfg.dataset.train = 400;
  cfg.dataset.val = 100;
  cfg.dataset.test = 100;
  cfg.game.epochs = 5;
  cfg.game.warmup_epochs = 2;
  cfg.game.batch_size = 128;

  const fs::path base = artifacts_dir() / "c11";
  fs::remove_all(base);
  const std::string data1 = run_generate(cfg, (base / "data1").string());
  const std::string data2 = run_generate(cfg, (base / "data2").string());
  for (const char* suffix : {".train.ncvd", ".val.ncvd", ".test.ncvd", ".json"}) {
    if (slurp(data1 + suffix) != slurp(data2 + suffix)) {
      detail = std::string("regenerated dataset differs at ") + suffix;
      return false;
    }
  }
  run_train(cfg, data1, (base / "run1").string());
  run_train(cfg, data1, (base / "run2").string());
  for (const char* name : {"checkpoint.ncvc", "train_log.csv", "manifest.json"}) {
    if (slurp((base / "run1" / name).string()) != slurp((base / "run2" / name).string())) {
      detail = std::string("rerun differs at ") + name;
      return false;
    }
  }
  for (const char* name : {"metrics_train.json", "metrics_val.json"}) {
    if (normalized_metrics_checksum((base / "run1" / name).string()) !=
        normalized_metrics_checksum((base / "run2" / name).string())) {
      detail = std::string("rerun metric JSONs differ beyond wall-clock at ") + name;
      return false;
    }
  }
  detail = "datasets, checkpoints, logs, manifests byte-identical; metrics identical "
           "after zeroing wall-clock fields";
  return true;
}

// ---------------------------------------------------------------------------
// criterion 12: format round-trips
// ---------------------------------------------------------------------------

bool criterion_round_trips(std::string& detail) {
  const fs::path base = artifacts_dir() / "c12";
  fs::remove_all(base);
  fs::create_directories(base);

  // encodings: save -> load -> save, byte-identical second output
  const DatasetBundle bundle = generate_synthetic(
      rule_preset("hans3-analog"), {20, 8, 8}, 0.4, EncodingKind::slot, 99);
  const std::string stem1 = (base / "a").string();
  const std::string stem2 = (base / "b").string();
  save_encodings(bundle, stem1);
  save_encodings(load_encodings(stem1), stem2);
  for (const char* suffix : {".train.ncvd", ".val.ncvd", ".test.ncvd"}) {
    if (slurp(stem1 + suffix) != slurp(stem2 + suffix)) {
      detail = std::string("encoding round-trip not byte-identical at ") + suffix;
      return false;
    }
  }

  // checkpoints: save -> load -> save
  RunConfig cfg = default_config("hans3-analog");
  cfg.dataset.train = 20;
  cfg.dataset.val = 8;
  cfg.dataset.test = 8;
  const AgentBundle agents = make_agents(cfg.game, bundle);
  const std::string ck1 = (base / "a.ncvc").string();
  const std::string ck2 = (base / "b.ncvc").string();
  save_agents(ck1, agents, config_to_json_text(cfg));
  const AgentBundle loaded = load_agents(ck1, cfg.game, bundle);
  save_agents(ck2, loaded, config_to_json_text(cfg));
  if (slurp(ck1) != slurp(ck2)) {
    detail = "checkpoint round-trip not byte-identical";
    return false;
  }

  // the documented three-sample fixture
  const std::string fixture = (base / "fixture3.ncvd").string();
  {
    std::ofstream os(fixture, std::ios::binary);
    auto put = [&os](const void* p, std::size_t n) {
      os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    };
    os.write("NCVD", 4);
    const std::uint16_t version = 1;
    put(&version, 2);
    const std::uint8_t kind = 0;
    put(&kind, 1);
    const std::uint32_t k = 2, c = 2;
    put(&k, 4);
    put(&c, 4);
    const std::uint64_t n = 3;
    put(&n, 8);
    const std::uint32_t labels[3] = {0, 1, 0};
    const std::uint8_t conf[3] = {0, 1, 0};
    const double payload[3][2] = {{1.5, -2.25}, {0.0, 0.5}, {42.0, -0.125}};
    for (int i = 0; i < 3; ++i) {
      put(&labels[i], 4);
      put(&conf[i], 1);
      put(payload[i], 16);
    }
  }
  const EncodingFile parsed = read_encoding_file(fixture);
  const bool fixture_ok =
      parsed.kind == EncodingKind::flat && parsed.klasses == 2 && parsed.flat_width == 2 &&
      parsed.samples.size() == 3 &&
      parsed.samples[0].encoding == std::vector<double>{1.5, -2.25} &&
      parsed.samples[0].label == 0 && !parsed.samples[0].confounded &&
      parsed.samples[1].encoding == std::vector<double>{0.0, 0.5} &&
      parsed.samples[1].label == 1 && parsed.samples[1].confounded &&
      parsed.samples[2].encoding == std::vector<double>{42.0, -0.125} &&
      parsed.samples[2].label == 0;
  if (!fixture_ok) {
    detail = "fixture did not parse to its documented values";
    return false;
  }
  detail = "encodings and checkpoints byte-stable; fixture parses to documented values";
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> criteria = {
      {1, "gradient correctness", criterion_gradients},
      {2, "permutation invariance", criterion_invariance},
      {3, "mask contracts", criterion_masks},
      {4, "loss endpoints", criterion_loss_endpoints},
      {5, "exhaustive-adversary bound", criterion_exhaustive_bound},
      {6, "expressivity (xor2)", criterion_expressivity},
      {7, "hans3-analog trend", criterion_hans3_trend},
      {8, "mask-size monotonicity", criterion_mask_monotonicity},
      {9, "shortcut mitigation sweep", criterion_shortcut_sweep},
      {10, "gamma ablation", criterion_gamma_ablation},
      {11, "reproducibility", criterion_reproducibility},
      {12, "format round-trips", criterion_round_trips},
  };

  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  bool all_pass = true;
  for (const Criterion& c : criteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end()) {
      continue;
    }
    std::string det;
    bool pass = false;
    try {
      pass = c.body(det);
    } catch (const std::exception& e) {
      det = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %d: %s — %s\n", pass ? "PASS" : "FAIL", c.id, c.name,
                det.c_str());
    std::fflush(stdout);
    all_pass = all_pass && pass;
  }
  return all_pass ? 0 : 1;
}
