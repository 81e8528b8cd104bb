#include "ncv/nn.hpp"

#include <cmath>

#include "binio.hpp"
#include "ncv/rng.hpp"

namespace ncv {

namespace {

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out}, 0.0);
  for (double& v : t.values) v = rng.uniform(-limit, limit);
  return t;
}

void add_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out,
                Rng& rng) {
  ps.add(name + ".w", glorot_uniform(in, out, rng));
  ps.add(name + ".b", Tensor({out}, 0.0));
}

void add_layer_norm(ParamSet& ps, const std::string& name, std::size_t width) {
  ps.add(name + ".gain", Tensor({width}, 1.0));
  ps.add(name + ".shift", Tensor({width}, 0.0));
}

NodeId activate(Tape& tape, NodeId x, Activation act) {
  return act == Activation::relu ? tape.relu(x) : tape.gelu(x);
}

NodeId linear(Tape& tape, const BoundParams& p, const std::string& name, NodeId x) {
  return tape.add_bias(tape.matmul(x, p.id(name + ".w")), p.id(name + ".b"));
}

void check_mlp(const MlpSpec& spec) {
  if (spec.hidden_widths.empty()) throw ContractError("MLP spec needs at least one hidden layer");
  if (spec.input_width == 0 || spec.output_width == 0) {
    throw ContractError("MLP spec widths must be positive");
  }
  for (std::size_t w : spec.hidden_widths) {
    if (w == 0) throw ContractError("MLP spec widths must be positive");
  }
  if (spec.dropout < 0.0 || spec.dropout >= 1.0) {
    throw ContractError("dropout rate must be in [0,1)");
  }
}

void check_set(const SetEncoderSpec& spec) {
  if (spec.slot_width == 0 || spec.embed_width == 0 || spec.output_width == 0) {
    throw ContractError("set encoder widths must be positive");
  }
  if (spec.variant == SetVariant::attention_blocks) {
    if (spec.heads == 0 || spec.embed_width % spec.heads != 0) {
      throw ContractError("attention width " + std::to_string(spec.embed_width) +
                          " must be divisible by head count " + std::to_string(spec.heads));
    }
    if (spec.blocks == 0) throw ContractError("attention variant needs at least one block");
  }
}

}  // namespace

Tensor& ParamSet::at(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return t;
  throw ContractError("unknown parameter '" + name + "'");
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return t;
  throw ContractError("unknown parameter '" + name + "'");
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items) n += t.size();
  return n;
}

Tensor glorot_tensor(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  Rng rng(seed);
  return glorot_uniform(fan_in, fan_out, rng);
}

ParamSet init_params(const MlpSpec& spec, std::uint64_t seed) {
  check_mlp(spec);
  Rng rng(derive_seed(seed, 0x6d6c70));  // distinct stream per spec family
  ParamSet ps;
  std::size_t in = spec.input_width;
  for (std::size_t i = 0; i < spec.hidden_widths.size(); ++i) {
    add_linear(ps, "layer" + std::to_string(i), in, spec.hidden_widths[i], rng);
    in = spec.hidden_widths[i];
  }
  add_linear(ps, "out", in, spec.output_width, rng);
  return ps;
}

ParamSet init_params(const SetEncoderSpec& spec, std::uint64_t seed) {
  check_set(spec);
  Rng rng(derive_seed(seed, 0x736574));
  ParamSet ps;
  const std::size_t e = spec.embed_width;
  if (spec.variant == SetVariant::sum_pool_mlp) {
    add_linear(ps, "embed0", spec.slot_width, e, rng);
    add_linear(ps, "embed1", e, e, rng);
    add_linear(ps, "head0", e, e, rng);
    add_linear(ps, "head1", e, spec.output_width, rng);
  } else {
    add_linear(ps, "proj", spec.slot_width, e, rng);
    for (std::size_t b = 0; b < spec.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      add_linear(ps, pre + "q", e, e, rng);
      add_linear(ps, pre + "k", e, e, rng);
      add_linear(ps, pre + "v", e, e, rng);
      add_linear(ps, pre + "o", e, e, rng);
      add_layer_norm(ps, pre + "ln1", e);
      add_linear(ps, pre + "ff0", e, e, rng);
      add_linear(ps, pre + "ff1", e, e, rng);
      add_layer_norm(ps, pre + "ln2", e);
    }
    add_linear(ps, "head0", e, e, rng);
    add_linear(ps, "head1", e, spec.output_width, rng);
  }
  return ps;
}

NodeId BoundParams::id(const std::string& name) const {
  for (std::size_t i = 0; i < source->items.size(); ++i) {
    if (source->items[i].first == name) return ids[i];
  }
  throw ContractError("unknown parameter '" + name + "'");
}

BoundParams bind_params(Tape& tape, const ParamSet& params, bool trainable) {
  BoundParams b;
  b.source = &params;
  b.ids.reserve(params.items.size());
  for (const auto& [name, t] : params.items) b.ids.push_back(tape.leaf(t, trainable));
  return b;
}

std::vector<std::vector<double>> collect_grads(const Tape& tape, const BoundParams& bound) {
  std::vector<std::vector<double>> out;
  out.reserve(bound.ids.size());
  for (NodeId id : bound.ids) out.push_back(tape.grad(id));
  return out;
}

NodeId mlp_forward(Tape& tape, const MlpSpec& spec, const BoundParams& params, NodeId x,
                   bool training, std::uint64_t dropout_seed) {
  check_mlp(spec);
  const Tensor& tx = tape.value(x);
  if (tx.rank() != 2 || tx.shape[1] != spec.input_width) {
    throw DimensionError("MLP expects [batch," + std::to_string(spec.input_width) +
                         "], got " + shape_str(tx.shape));
  }
  NodeId h = x;
  for (std::size_t i = 0; i < spec.hidden_widths.size(); ++i) {
    h = activate(tape, linear(tape, params, "layer" + std::to_string(i), h), spec.activation);
    if (training && spec.dropout > 0.0) {
      h = tape.dropout(h, spec.dropout, derive_seed(dropout_seed, 0xd0, i));
    }
  }
  return linear(tape, params, "out", h);
}

namespace {

NodeId set_forward_sum_pool(Tape& tape, const SetEncoderSpec& spec, const BoundParams& p,
                            NodeId slots, std::size_t batch, std::size_t slot_count,
                            bool training, std::uint64_t dropout_seed) {
  (void)slot_count;
  NodeId h = activate(tape, linear(tape, p, "embed0", slots), spec.activation);
  h = activate(tape, linear(tape, p, "embed1", h), spec.activation);
  if (training && spec.dropout > 0.0) {
    h = tape.dropout(h, spec.dropout, derive_seed(dropout_seed, 0xd1));
  }
  // per-slot scores read the local embedding only; pooled mode reduces first
  NodeId head_in = spec.per_slot_output ? h : tape.pool_slots(h, batch, spec.pooling);
  NodeId y = activate(tape, linear(tape, p, "head0", head_in), spec.activation);
  return linear(tape, p, "head1", y);
}

NodeId set_forward_attention(Tape& tape, const SetEncoderSpec& spec, const BoundParams& p,
                             NodeId slots, std::size_t batch, std::size_t slot_count,
                             bool training, std::uint64_t dropout_seed) {
  NodeId h = linear(tape, p, "proj", slots);
  for (std::size_t b = 0; b < spec.blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    NodeId q = linear(tape, p, pre + "q", h);
    NodeId k = linear(tape, p, pre + "k", h);
    NodeId v = linear(tape, p, pre + "v", h);
    NodeId att = tape.multihead_attention(q, k, v, batch, slot_count, spec.heads);
    NodeId mixed = linear(tape, p, pre + "o", att);
    if (training && spec.dropout > 0.0) {
      mixed = tape.dropout(mixed, spec.dropout, derive_seed(dropout_seed, 0xa0, b));
    }
    h = tape.layer_norm(tape.add(h, mixed), p.id(pre + "ln1.gain"), p.id(pre + "ln1.shift"));
    NodeId ff = activate(tape, linear(tape, p, pre + "ff0", h), spec.activation);
    ff = linear(tape, p, pre + "ff1", ff);
    if (training && spec.dropout > 0.0) {
      ff = tape.dropout(ff, spec.dropout, derive_seed(dropout_seed, 0xa1, b));
    }
    h = tape.layer_norm(tape.add(h, ff), p.id(pre + "ln2.gain"), p.id(pre + "ln2.shift"));
  }
  NodeId head_in = spec.per_slot_output ? h : tape.pool_slots(h, batch, spec.pooling);
  NodeId y = activate(tape, linear(tape, p, "head0", head_in), spec.activation);
  return linear(tape, p, "head1", y);
}

}  // namespace

NodeId set_forward(Tape& tape, const SetEncoderSpec& spec, const BoundParams& params,
                   NodeId slots, std::size_t batch, std::size_t slot_count, bool training,
                   std::uint64_t dropout_seed) {
  check_set(spec);
  if (slot_count == 0) throw ContractError("set encoder needs at least one slot");
  const Tensor& ts = tape.value(slots);
  if (ts.rank() != 2 || ts.shape[0] != batch * slot_count || ts.shape[1] != spec.slot_width) {
    throw DimensionError("set encoder expects [" + std::to_string(batch * slot_count) + "," +
                         std::to_string(spec.slot_width) + "], got " + shape_str(ts.shape));
  }
  return spec.variant == SetVariant::sum_pool_mlp
             ? set_forward_sum_pool(tape, spec, params, slots, batch, slot_count, training,
                                    dropout_seed)
             : set_forward_attention(tape, spec, params, slots, batch, slot_count, training,
                                     dropout_seed);
}

Tensor mlp_forward_eval(const MlpSpec& spec, const ParamSet& params, const Tensor& x) {
  Tape tape;
  NodeId xid = tape.constant(x);
  BoundParams bound = bind_params(tape, params, false);
  return tape.value(mlp_forward(tape, spec, bound, xid, false, 0));
}

Tensor set_forward_eval(const SetEncoderSpec& spec, const ParamSet& params,
                        const Tensor& slots) {
  if (slots.rank() != 3) {
    throw DimensionError("set_forward_eval expects [batch,S,B], got " + shape_str(slots.shape));
  }
  const std::size_t batch = slots.shape[0], s = slots.shape[1], b = slots.shape[2];
  Tape tape;
  NodeId xid = tape.constant(Tensor({batch * s, b}, slots.values));
  BoundParams bound = bind_params(tape, params, false);
  return tape.value(set_forward(tape, spec, bound, xid, batch, s, false, 0));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

AdamState make_adam_state(const ParamSet& params, AdamConfig cfg) {
  AdamState st;
  st.cfg = cfg;
  st.m.reserve(params.items.size());
  st.v.reserve(params.items.size());
  for (const auto& [name, t] : params.items) {
    st.m.emplace_back(t.size(), 0.0);
    st.v.emplace_back(t.size(), 0.0);
  }
  return st;
}

void adam_step(AdamState& state, ParamSet& params,
               const std::vector<std::vector<double>>& grads) {
  if (grads.size() != params.items.size() || state.m.size() != params.items.size()) {
    throw DimensionError("optimizer state / gradient count mismatch");
  }
  state.step += 1;
  const AdamConfig& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
    Tensor& p = params.items[pi].second;
    const std::vector<double>& g = grads[pi];
    if (g.size() != p.size()) {
      throw DimensionError("gradient shape mismatch for '" + params.items[pi].first + "'");
    }
    std::vector<double>& m = state.m[pi];
    std::vector<double>& v = state.v[pi];
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.values[i] -= c.lr * c.weight_decay * p.values[i];  // decoupled decay
      p.values[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[4] = {'N', 'C', 'V', 'C'};
}

void save_checkpoint(const std::string& path, const CheckpointHeader& header,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
  auto os = binio::open_out(path);
  binio::write_bytes(os, kCheckpointMagic, 4);
  binio::write_pod<std::uint32_t>(os, header.version);
  binio::write_pod<std::uint64_t>(os, header.spec_hash);
  binio::write_pod<std::uint64_t>(os, header.seed);
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(header.config_json.size()));
  binio::write_bytes(os, header.config_json.data(), header.config_json.size());
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    binio::write_bytes(os, name.data(), name.size());
    binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape) binio::write_pod<std::uint64_t>(os, e);
    binio::write_doubles(os, t.values.data(), t.size());
  }
  if (!os) throw RuntimeError("failed writing checkpoint '" + path + "'");
}

std::pair<CheckpointHeader, std::vector<std::pair<std::string, Tensor>>> load_checkpoint(
    const std::string& path) {
  auto is = binio::open_in(path);
  char magic[4];
  binio::read_bytes(is, magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw RuntimeError("'" + path + "' is not a checkpoint file (bad magic)");
  }
  CheckpointHeader h;
  h.version = binio::read_pod<std::uint32_t>(is);
  if (h.version != 1) {
    throw RuntimeError("unsupported checkpoint version " + std::to_string(h.version));
  }
  h.spec_hash = binio::read_pod<std::uint64_t>(is);
  h.seed = binio::read_pod<std::uint64_t>(is);
  const auto cfg_len = binio::read_pod<std::uint32_t>(is);
  h.config_json.resize(cfg_len);
  binio::read_bytes(is, h.config_json.data(), cfg_len);
  const auto count = binio::read_pod<std::uint32_t>(is);
  std::vector<std::pair<std::string, Tensor>> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = binio::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    binio::read_bytes(is, name.data(), name_len);
    const auto rank = binio::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(binio::read_pod<std::uint64_t>(is));
    Tensor t(shape, 0.0);
    binio::read_doubles(is, t.values.data(), t.size());
    params.emplace_back(std::move(name), std::move(t));
  }
  return {std::move(h), std::move(params)};
}

}  // namespace ncv
