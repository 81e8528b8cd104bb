#include "ncv/game.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ncv/rng.hpp"

namespace ncv {

using nlohmann::json;

// ---------------------------------------------------------------------------
// units and masks
// ---------------------------------------------------------------------------

std::size_t unit_count(const GameConfig& cfg, const DatasetBundle& data) {
  if (data.kind == EncodingKind::flat) {
    if (cfg.granularity == Granularity::slot_block) {
      throw ContractError("slot_block granularity needs a slot dataset");
    }
    return data.flat_width;
  }
  return cfg.granularity == Granularity::slot_block ? data.slot_count
                                                    : data.slot_count * data.slot_width;
}

std::size_t unit_block_width(const GameConfig& cfg, const DatasetBundle& data) {
  return (data.kind == EncodingKind::slot && cfg.granularity == Granularity::slot_block)
             ? data.slot_width
             : 1;
}

void validate_game_config(const GameConfig& cfg, const DatasetBundle& data) {
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0) {
    throw ConfigError("gamma must be in [0,1], got " + std::to_string(cfg.gamma));
  }
  if (cfg.encoding != data.kind) {
    throw ConfigError("config encoding kind does not match the dataset");
  }
  if (data.kind == EncodingKind::flat && cfg.selector != SelectorArch::mlp) {
    throw ConfigError("flat encodings use the mlp selector");
  }
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t units = unit_count(cfg, data);
  if (cfg.mask_size == 0 || cfg.mask_size > units) {
    throw ConfigError("mask size " + std::to_string(cfg.mask_size) +
                      " must be in [1," + std::to_string(units) + "]");
  }
  if (cfg.selector == SelectorArch::attention_blocks ||
      cfg.verifier_encoder == SelectorArch::attention_blocks) {
    if (cfg.attention_heads == 0 || cfg.prover_hidden % cfg.attention_heads != 0 ||
        cfg.verifier_hidden % cfg.attention_heads != 0) {
      throw ConfigError("hidden widths must be divisible by the attention head count");
    }
  }
}

MaskSelection topk_mask(std::span<const double> scores, std::size_t m,
                        Granularity granularity) {
  MaskSelection sel;
  sel.indices = topk_indices(scores, m);
  sel.granularity = granularity;
  sel.scores.assign(scores.begin(), scores.end());
  return sel;
}

std::vector<double> apply_mask(std::span<const double> encoding, const MaskSelection& mask,
                               std::size_t block_width) {
  if (block_width == 0 || encoding.size() % block_width != 0) {
    throw ContractError("mask block width " + std::to_string(block_width) +
                        " does not tile encoding width " + std::to_string(encoding.size()));
  }
  const std::size_t units = encoding.size() / block_width;
  std::vector<double> out(encoding.size(), 0.0);
  for (std::size_t unit : mask.indices) {
    if (unit >= units) {
      throw ContractError("mask selects unit " + std::to_string(unit) + " of " +
                          std::to_string(units) + "; granularity mismatch");
    }
    for (std::size_t c = 0; c < block_width; ++c) {
      out[unit * block_width + c] = encoding[unit * block_width + c];
    }
  }
  return out;
}

NodeId straight_through_select(Tape& tape, NodeId scores, NodeId encodings, std::size_t m,
                               std::size_t block_width, double l1_coeff) {
  return tape.hard_topk_select(scores, encodings, m, block_width, l1_coeff);
}

// ---------------------------------------------------------------------------
// agents
// ---------------------------------------------------------------------------

namespace {

AgentArch make_prover_arch(const GameConfig& cfg, const DatasetBundle& data) {
  const std::size_t units = unit_count(cfg, data);
  AgentArch arch;
  if (data.kind == EncodingKind::flat || cfg.selector == SelectorArch::mlp) {
    arch.kind = AgentArch::Kind::mlp;
    arch.mlp.input_width = data.encoding_width();
    arch.mlp.hidden_widths = {cfg.prover_hidden, cfg.prover_hidden};
    arch.mlp.output_width = units;
    arch.mlp.activation = Activation::relu;
    arch.mlp.dropout = cfg.dropout;
    return arch;
  }
  arch.kind = AgentArch::Kind::set;
  arch.set.variant = cfg.selector == SelectorArch::attention_blocks
                         ? SetVariant::attention_blocks
                         : SetVariant::sum_pool_mlp;
  arch.set.slot_width = data.slot_width;
  arch.set.embed_width = cfg.prover_hidden;
  arch.set.blocks = cfg.attention_blocks;
  arch.set.heads = cfg.attention_heads;
  arch.set.output_width = cfg.granularity == Granularity::slot_block ? 1 : data.slot_width;
  arch.set.pooling = cfg.pooling;
  arch.set.per_slot_output = true;
  arch.set.activation = Activation::relu;
  arch.set.dropout = cfg.dropout;
  return arch;
}

AgentArch make_verifier_arch(const GameConfig& cfg, const DatasetBundle& data) {
  AgentArch arch;
  if (data.kind == EncodingKind::flat || cfg.verifier_encoder == SelectorArch::mlp) {
    arch.kind = AgentArch::Kind::mlp;
    arch.mlp.input_width = data.encoding_width();
    arch.mlp.hidden_widths = {cfg.verifier_hidden, cfg.verifier_hidden};
    arch.mlp.output_width = data.klasses + 1;
    arch.mlp.activation = Activation::gelu;
    arch.mlp.dropout = cfg.dropout;
    return arch;
  }
  arch.kind = AgentArch::Kind::set;
  arch.set.variant = cfg.verifier_encoder == SelectorArch::attention_blocks
                         ? SetVariant::attention_blocks
                         : SetVariant::sum_pool_mlp;
  arch.set.slot_width = data.slot_width;
  arch.set.embed_width = cfg.verifier_hidden;
  arch.set.blocks = cfg.attention_blocks;
  arch.set.heads = cfg.attention_heads;
  arch.set.output_width = data.klasses + 1;
  arch.set.pooling = cfg.pooling;
  arch.set.per_slot_output = false;
  arch.set.activation = Activation::relu;
  arch.set.dropout = cfg.dropout;
  return arch;
}

ParamSet init_arch_params(const AgentArch& arch, std::uint64_t seed) {
  return arch.kind == AgentArch::Kind::mlp ? init_params(arch.mlp, seed)
                                           : init_params(arch.set, seed);
}

void describe_arch(std::ostringstream& os, const AgentArch& arch) {
  if (arch.kind == AgentArch::Kind::mlp) {
    os << "mlp(in=" << arch.mlp.input_width << ",hidden=";
    for (std::size_t i = 0; i < arch.mlp.hidden_widths.size(); ++i) {
      if (i) os << '|';
      os << arch.mlp.hidden_widths[i];
    }
    os << ",out=" << arch.mlp.output_width
       << ",act=" << (arch.mlp.activation == Activation::relu ? "relu" : "gelu")
       << ",drop=" << arch.mlp.dropout << ')';
  } else {
    os << "set(" << (arch.set.variant == SetVariant::sum_pool_mlp ? "sum_pool" : "attention")
       << ",b=" << arch.set.slot_width << ",e=" << arch.set.embed_width
       << ",blocks=" << arch.set.blocks << ",heads=" << arch.set.heads
       << ",out=" << arch.set.output_width
       << ",pool=" << (arch.set.pooling == PoolKind::sum ? "sum" : "mean")
       << ",per_slot=" << arch.set.per_slot_output << ",drop=" << arch.set.dropout << ')';
  }
}

}  // namespace

AgentBundle make_agents(const GameConfig& cfg, const DatasetBundle& data) {
  validate_game_config(cfg, data);
  AgentBundle b;
  b.seed = cfg.seed;
  b.merlin_arch = make_prover_arch(cfg, data);
  b.morgana_arch = make_prover_arch(cfg, data);
  b.arthur_arch = make_verifier_arch(cfg, data);
  b.merlin = init_arch_params(b.merlin_arch, derive_seed(cfg.seed, 'M'));
  b.morgana = init_arch_params(b.morgana_arch, derive_seed(cfg.seed, 'W'));
  b.arthur = init_arch_params(b.arthur_arch, derive_seed(cfg.seed, 'A'));
  const AdamConfig prover_opt{cfg.lr_provers, 0.9, 0.999, 1e-8, cfg.weight_decay_provers};
  const AdamConfig arthur_opt{cfg.lr_verifier, 0.9, 0.999, 1e-8, cfg.weight_decay_verifier};
  b.merlin_opt = make_adam_state(b.merlin, prover_opt);
  b.morgana_opt = make_adam_state(b.morgana, prover_opt);
  b.arthur_opt = make_adam_state(b.arthur, arthur_opt);
  return b;
}

std::uint64_t bundle_spec_hash(const AgentBundle& bundle) {
  std::ostringstream os;
  os << "merlin:";
  describe_arch(os, bundle.merlin_arch);
  os << ";morgana:";
  describe_arch(os, bundle.morgana_arch);
  os << ";arthur:";
  describe_arch(os, bundle.arthur_arch);
  const std::string s = os.str();
  return fnv1a64(s.data(), s.size());
}

void save_agents(const std::string& path, const AgentBundle& bundle,
                 const std::string& config_json) {
  CheckpointHeader h;
  h.version = 1;
  h.spec_hash = bundle_spec_hash(bundle);
  h.seed = bundle.seed;
  h.config_json = config_json;
  std::vector<std::pair<std::string, Tensor>> params;
  for (const auto& [name, t] : bundle.merlin.items) params.emplace_back("merlin/" + name, t);
  for (const auto& [name, t] : bundle.morgana.items) params.emplace_back("morgana/" + name, t);
  for (const auto& [name, t] : bundle.arthur.items) params.emplace_back("arthur/" + name, t);
  save_checkpoint(path, h, params);
}

AgentBundle load_agents(const std::string& path, const GameConfig& cfg,
                        const DatasetBundle& data, std::string* config_json_out) {
  auto [header, params] = load_checkpoint(path);
  AgentBundle bundle = make_agents(cfg, data);
  bundle.seed = header.seed;
  const std::uint64_t expected = bundle_spec_hash(bundle);
  if (header.spec_hash != expected) {
    std::ostringstream os;
    os << "checkpoint spec hash mismatch: file has " << std::hex << header.spec_hash
       << ", config builds " << expected;
    throw RuntimeError(os.str());
  }
  auto restore = [&params](const std::string& prefix, ParamSet& ps) {
    for (auto& [name, t] : ps.items) {
      bool found = false;
      for (auto& [pname, pt] : params) {
        if (pname == prefix + name) {
          if (pt.shape != t.shape) {
            throw RuntimeError("checkpoint parameter '" + pname + "' has shape " +
                               shape_str(pt.shape) + ", expected " + shape_str(t.shape));
          }
          t = pt;
          found = true;
          break;
        }
      }
      if (!found) throw RuntimeError("checkpoint is missing parameter '" + prefix + name + "'");
    }
  };
  restore("merlin/", bundle.merlin);
  restore("morgana/", bundle.morgana);
  restore("arthur/", bundle.arthur);
  if (config_json_out) *config_json_out = header.config_json;
  return bundle;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

NodeId merlin_loss(Tape& tape, NodeId arthur_logits, const std::vector<std::size_t>& targets,
                   std::size_t klasses) {
  const Tensor& logits = tape.value(arthur_logits);
  if (logits.rank() != 2 || logits.shape[1] != klasses + 1) {
    throw DimensionError("verifier logits must be [batch," + std::to_string(klasses + 1) +
                         "], got " + shape_str(logits.shape));
  }
  for (std::size_t y : targets) {
    if (y >= klasses) {
      throw ContractError("merlin_loss target " + std::to_string(y) +
                          " is not a data class (K=" + std::to_string(klasses) + ")");
    }
  }
  return tape.softmax_cross_entropy(arthur_logits, targets);
}

NodeId morgana_safe_loss(Tape& tape, NodeId arthur_logits,
                         const std::vector<std::size_t>& targets, std::size_t klasses) {
  const Tensor& logits = tape.value(arthur_logits);
  if (logits.rank() != 2 || logits.shape[1] != klasses + 1) {
    throw DimensionError("verifier logits must be [batch," + std::to_string(klasses + 1) +
                         "], got " + shape_str(logits.shape));
  }
  return tape.safe_mass_loss(arthur_logits, targets);
}

double arthur_loss(double l_merlin, double l_morgana, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) {
    throw ContractError("gamma must be in [0,1], got " + std::to_string(gamma));
  }
  return (1.0 - gamma) * l_merlin + gamma * l_morgana;
}

// ---------------------------------------------------------------------------
// forward helpers
// ---------------------------------------------------------------------------

namespace {

struct BatchData {
  Tensor enc;  // [n, W]
  std::vector<std::size_t> targets;
};

BatchData build_batch(const Split& split, std::span<const std::size_t> idx, std::size_t width) {
  BatchData b;
  b.enc = Tensor({idx.size(), width}, 0.0);
  b.targets.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const ConceptSample& s = split.samples[idx[r]];
    if (s.encoding.size() != width) {
      throw DimensionError("sample " + std::to_string(idx[r]) + " has width " +
                           std::to_string(s.encoding.size()) + ", dataset declares " +
                           std::to_string(width));
    }
    std::copy(s.encoding.begin(), s.encoding.end(), b.enc.values.begin() + r * width);
    b.targets.push_back(s.label);
  }
  return b;
}

NodeId agent_forward(Tape& tape, const AgentArch& arch, const BoundParams& params, NodeId enc,
                     std::size_t batch, const DatasetBundle& data, bool training,
                     std::uint64_t drop_seed) {
  if (arch.kind == AgentArch::Kind::mlp) {
    return mlp_forward(tape, arch.mlp, params, enc, training, drop_seed);
  }
  NodeId slots = tape.reshape(enc, {batch * data.slot_count, data.slot_width});
  NodeId out = set_forward(tape, arch.set, params, slots, batch, data.slot_count, training,
                           drop_seed);
  if (arch.set.per_slot_output) {
    return tape.reshape(out, {batch, data.slot_count * arch.set.output_width});
  }
  return out;
}

void require_finite(double v, const char* what, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    throw RuntimeError(std::string("non-finite ") + what + " at epoch " +
                       std::to_string(epoch) + ", batch " + std::to_string(batch));
  }
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

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

void warmup_epoch(AgentBundle& agents, const DatasetBundle& data, const GameConfig& cfg,
                  std::size_t epoch_index) {
  const std::size_t n = data.train.size();
  const std::size_t width = data.encoding_width();
  const auto order = shuffled_indices(n, derive_seed(cfg.seed, 0xE1, epoch_index));
  for (std::size_t start = 0, batch_i = 0; start < n; start += cfg.batch_size, ++batch_i) {
    const std::size_t len = std::min(cfg.batch_size, n - start);
    BatchData batch = build_batch(data.train, {order.data() + start, len}, width);
    Tape tape;
    NodeId enc = tape.constant(std::move(batch.enc));
    BoundParams arthur = bind_params(tape, agents.arthur, true);
    NodeId logits =
        agent_forward(tape, agents.arthur_arch, arthur, enc, len, data, true,
                      derive_seed(cfg.seed, 0xA0 + epoch_index, batch_i, 'w'));
    NodeId loss = tape.softmax_cross_entropy(logits, batch.targets);
    require_finite(tape.value(loss)[0], "warmup loss", epoch_index, batch_i);
    tape.backward(loss);
    adam_step(agents.arthur_opt, agents.arthur, collect_grads(tape, arthur));
  }
}

}  // namespace

EpochStats train_epoch(AgentBundle& agents, const DatasetBundle& data, const GameConfig& cfg,
                       std::size_t epoch_index) {
  validate_game_config(cfg, data);
  const std::size_t n = data.train.size();
  if (n == 0) throw ContractError("cannot train on an empty split");
  const std::size_t width = data.encoding_width();
  const std::size_t m = cfg.mask_size;
  const std::size_t block = unit_block_width(cfg, data);
  const auto order = shuffled_indices(n, derive_seed(cfg.seed, 0xE0, epoch_index));

  EpochStats st;
  st.epoch = epoch_index;
  std::size_t batches = 0;
  for (std::size_t start = 0, batch_i = 0; start < n; start += cfg.batch_size, ++batch_i) {
    const std::size_t len = std::min(cfg.batch_size, n - start);
    BatchData batch = build_batch(data.train, {order.data() + start, len}, width);
    const std::uint64_t dseed = derive_seed(cfg.seed, epoch_index, batch_i);

    // Phase 1a: Merlin descends CE against a frozen verifier.
    {
      Tape tape;
      NodeId enc = tape.constant(batch.enc);
      BoundParams merlin = bind_params(tape, agents.merlin, true);
      BoundParams arthur = bind_params(tape, agents.arthur, false);
      NodeId scores = agent_forward(tape, agents.merlin_arch, merlin, enc, len, data, true,
                                    derive_seed(dseed, 'M'));
      NodeId masked = tape.hard_topk_select(scores, enc, m, block, cfg.l1_penalty);
      NodeId logits = agent_forward(tape, agents.arthur_arch, arthur, masked, len, data,
                                    false, 0);
      NodeId loss = merlin_loss(tape, logits, batch.targets, data.klasses);
      require_finite(tape.value(loss)[0], "merlin loss (phase 1)", epoch_index, batch_i);
      tape.backward(loss);
      adam_step(agents.merlin_opt, agents.merlin, collect_grads(tape, merlin));
    }

    // Phase 1b: Morgana ascends the safe-mass loss against the same frozen
    // verifier snapshot.
    {
      Tape tape;
      NodeId enc = tape.constant(batch.enc);
      BoundParams morgana = bind_params(tape, agents.morgana, true);
      BoundParams arthur = bind_params(tape, agents.arthur, false);
      NodeId scores = agent_forward(tape, agents.morgana_arch, morgana, enc, len, data, true,
                                    derive_seed(dseed, 'W'));
      NodeId masked = tape.hard_topk_select(scores, enc, m, block, cfg.l1_penalty);
      NodeId logits = agent_forward(tape, agents.arthur_arch, arthur, masked, len, data,
                                    false, 0);
      NodeId loss = morgana_safe_loss(tape, logits, batch.targets, data.klasses);
      require_finite(tape.value(loss)[0], "morgana loss (phase 1)", epoch_index, batch_i);
      NodeId objective = tape.scale(loss, -1.0);  // gradient ascent on the loss
      tape.backward(objective);
      adam_step(agents.morgana_opt, agents.morgana, collect_grads(tape, morgana));
    }

    // Phase 2: the verifier steps on masks recomputed with updated provers.
    {
      Tape tape;
      NodeId enc = tape.constant(batch.enc);
      BoundParams merlin = bind_params(tape, agents.merlin, false);
      BoundParams morgana = bind_params(tape, agents.morgana, false);
      BoundParams arthur = bind_params(tape, agents.arthur, true);
      NodeId s_m = agent_forward(tape, agents.merlin_arch, merlin, enc, len, data, false, 0);
      NodeId s_w = agent_forward(tape, agents.morgana_arch, morgana, enc, len, data, false, 0);
      NodeId masked_m = tape.hard_topk_select(s_m, enc, m, block, 0.0);
      NodeId masked_w = tape.hard_topk_select(s_w, enc, m, block, 0.0);
      NodeId logits_m = agent_forward(tape, agents.arthur_arch, arthur, masked_m, len, data,
                                      true, derive_seed(dseed, 'A', 1));
      NodeId logits_w = agent_forward(tape, agents.arthur_arch, arthur, masked_w, len, data,
                                      true, derive_seed(dseed, 'A', 2));
      NodeId l_m = merlin_loss(tape, logits_m, batch.targets, data.klasses);
      NodeId l_w = morgana_safe_loss(tape, logits_w, batch.targets, data.klasses);
      NodeId l_a = tape.add(tape.scale(l_m, 1.0 - cfg.gamma), tape.scale(l_w, cfg.gamma));
      const double vm = tape.value(l_m)[0];
      const double vw = tape.value(l_w)[0];
      const double va = tape.value(l_a)[0];
      require_finite(vm, "merlin loss (phase 2)", epoch_index, batch_i);
      require_finite(vw, "morgana loss (phase 2)", epoch_index, batch_i);
      require_finite(va, "verifier loss (phase 2)", epoch_index, batch_i);
      tape.backward(l_a);
      adam_step(agents.arthur_opt, agents.arthur, collect_grads(tape, arthur));
      st.l_merlin += vm;
      st.l_morgana += vw;
      st.l_arthur += va;
    }

    agents.step += 1;
    batches += 1;
  }

  st.l_merlin /= static_cast<double>(batches);
  st.l_morgana /= static_cast<double>(batches);
  st.l_arthur /= static_cast<double>(batches);

  const auto merlin_view = evaluate_split(data.train, agents, cfg, data, false);
  const auto morgana_view = evaluate_split(data.train, agents, cfg, data, true);
  std::size_t correct = 0, safe = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = data.train.samples[i].label;
    if (!merlin_view[i].reject && merlin_view[i].predicted == y) ++correct;
    if (morgana_view[i].reject || morgana_view[i].predicted == y) ++safe;
  }
  st.completeness_train = static_cast<double>(correct) / static_cast<double>(n);
  st.soundness_train = static_cast<double>(safe) / static_cast<double>(n);
  return st;
}

TrainLog train(AgentBundle& agents, const DatasetBundle& data, const GameConfig& cfg) {
  validate_game_config(cfg, data);
  TrainLog log;
  if (cfg.epochs == 0) return log;  // checkpoint stays at initialization
  for (std::size_t w = 0; w < cfg.warmup_epochs; ++w) warmup_epoch(agents, data, cfg, w);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    log.epochs.push_back(train_epoch(agents, data, cfg, e));
  }
  return log;
}

void write_training_log_csv(const std::string& path, const TrainLog& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot open '" + path + "' for writing");
  os << "epoch,L_M,L_Morgana,L_A,completeness_train,soundness_train\n";
  char buf[512];
  for (const EpochStats& e : log.epochs) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.l_merlin,
                  e.l_morgana, e.l_arthur, e.completeness_train, e.soundness_train);
    os << buf;
  }
  if (!os) throw RuntimeError("failed writing training log '" + path + "'");
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

std::vector<Decision> evaluate_split(const Split& split, const AgentBundle& agents,
                                     const GameConfig& cfg, const DatasetBundle& data,
                                     bool use_morgana) {
  validate_game_config(cfg, data);
  const std::size_t n = split.size();
  std::vector<Decision> out;
  out.reserve(n);
  if (n == 0) return out;
  const std::size_t width = data.encoding_width();
  const std::size_t m = cfg.mask_size;
  const std::size_t block = unit_block_width(cfg, data);
  const std::size_t chunk = std::max<std::size_t>(std::size_t{1}, cfg.batch_size);
  const AgentArch& prover_arch = use_morgana ? agents.morgana_arch : agents.merlin_arch;
  const ParamSet& prover_params = use_morgana ? agents.morgana : agents.merlin;

  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    idx.resize(len);
    for (std::size_t r = 0; r < len; ++r) idx[r] = start + r;
    BatchData batch = build_batch(split, {idx.data(), len}, width);
    Tape tape;
    NodeId enc = tape.constant(std::move(batch.enc));
    BoundParams prover = bind_params(tape, prover_params, false);
    BoundParams arthur = bind_params(tape, agents.arthur, false);
    NodeId scores = agent_forward(tape, prover_arch, prover, enc, len, data, false, 0);
    NodeId masked = tape.hard_topk_select(scores, enc, m, block, 0.0);
    NodeId logits = agent_forward(tape, agents.arthur_arch, arthur, masked, len, data,
                                  false, 0);
    const Tensor& ts = tape.value(scores);
    const Tensor& tl = tape.value(logits);
    const std::size_t u = ts.shape[1];
    const std::size_t w = tl.shape[1];
    for (std::size_t r = 0; r < len; ++r) {
      Decision d;
      d.posterior = softmax_row({tl.values.data() + r * w, w});
      d.predicted = argmax_lowest(d.posterior);
      d.reject = d.predicted == data.klasses;
      d.mask = topk_mask({ts.values.data() + r * u, u}, m, cfg.granularity);
      out.push_back(std::move(d));
    }
  }
  return out;
}

namespace {

std::string unit_name(const GameConfig& cfg, const DatasetBundle& data,
                      const ConceptSample& sample, std::size_t unit) {
  const Schema& schema = data.schema;
  if (data.kind == EncodingKind::slot && cfg.granularity == Granularity::slot_block) {
    std::span<const double> row{sample.encoding.data() + unit * data.slot_width,
                                data.slot_width};
    return "slot " + std::to_string(unit) + ": " + describe_slot(schema, row);
  }
  if (data.kind == EncodingKind::slot) {
    const std::size_t slot = unit / data.slot_width;
    const std::size_t off = unit % data.slot_width;
    std::size_t base = 0;
    for (const auto& attr : schema.attributes) {
      if (off < base + attr.values.size()) {
        return "slot " + std::to_string(slot) + ": " + attr.name + "=" +
               attr.values[off - base];
      }
      base += attr.values.size();
    }
    return "slot " + std::to_string(slot) + ": feature " + std::to_string(off);
  }
  if (unit < schema.feature_names.size()) return schema.feature_names[unit];
  return "feature " + std::to_string(unit);
}

}  // namespace

CertificateRecord infer(const ConceptSample& sample, std::uint64_t sample_id,
                        const AgentBundle& agents, const GameConfig& cfg,
                        const DatasetBundle& data, bool use_morgana) {
  Split one;
  one.samples.push_back(sample);
  Decision d = std::move(evaluate_split(one, agents, cfg, data, use_morgana)[0]);
  CertificateRecord rec;
  rec.sample_id = sample_id;
  rec.prover = use_morgana ? "morgana" : "merlin";
  rec.mask = std::move(d.mask);
  rec.posterior = std::move(d.posterior);
  rec.predicted = d.predicted;
  rec.reject = d.reject;
  rec.unit_names.reserve(rec.mask.indices.size());
  for (std::size_t unit : rec.mask.indices) {
    rec.unit_names.push_back(unit_name(cfg, data, sample, unit));
  }
  return rec;
}

Tensor verifier_logits(const AgentBundle& agents, const Tensor& masked,
                       const DatasetBundle& data) {
  if (masked.rank() != 2 || masked.shape[1] != data.encoding_width()) {
    throw DimensionError("verifier input must be [n," +
                         std::to_string(data.encoding_width()) + "], got " +
                         shape_str(masked.shape));
  }
  Tape tape;
  NodeId enc = tape.constant(masked);
  BoundParams arthur = bind_params(tape, agents.arthur, false);
  NodeId logits = agent_forward(tape, agents.arthur_arch, arthur, enc, masked.shape[0], data,
                                false, 0);
  return tape.value(logits);
}

std::string certificate_to_json(const CertificateRecord& record) {
  json j;
  j["sample_id"] = record.sample_id;
  j["prover"] = record.prover;
  j["indices"] = record.mask.indices;
  j["unit_names"] = record.unit_names;
  j["posterior"] = record.posterior;
  j["decision"] = record.reject ? "reject" : "class";
  if (record.reject) {
    j["predicted_class"] = nullptr;
  } else {
    j["predicted_class"] = record.predicted;
  }
  return j.dump();
}

}  // namespace ncv
