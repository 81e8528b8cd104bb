#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ncv/tensor.hpp"

namespace ncv {

enum class Activation { relu, gelu };

// Fully connected network over flat encodings.
struct MlpSpec {
  std::size_t input_width = 0;
  std::vector<std::size_t> hidden_widths;  // at least one
  std::size_t output_width = 0;
  Activation activation = Activation::relu;
  double dropout = 0.0;
};

enum class SetVariant { sum_pool_mlp, attention_blocks };

// Encoder over slot matrices [batch, S, B]. Pooled mode produces one vector
// per sample and is permutation invariant; per-slot mode produces one output
// row per slot and is permutation equivariant (used by the provers to score
// slots).
struct SetEncoderSpec {
  SetVariant variant = SetVariant::sum_pool_mlp;
  std::size_t slot_width = 0;   // B
  std::size_t embed_width = 0;  // per-slot embedding / attention width
  std::size_t blocks = 2;       // attention variant only
  std::size_t heads = 4;        // attention variant only
  std::size_t output_width = 0;
  PoolKind pooling = PoolKind::sum;
  bool per_slot_output = false;
  Activation activation = Activation::relu;
  double dropout = 0.0;
};

struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(std::string name, Tensor t) { items.emplace_back(std::move(name), std::move(t)); }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::size_t total_values() const;
};

ParamSet init_params(const MlpSpec& spec, std::uint64_t seed);
ParamSet init_params(const SetEncoderSpec& spec, std::uint64_t seed);

// Glorot-uniform matrix; the initializer used for every weight matrix above.
Tensor glorot_tensor(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);

// Parameters copied onto a tape for one forward/backward pass.
struct BoundParams {
  std::vector<NodeId> ids;  // aligned with ParamSet::items
  const ParamSet* source = nullptr;

  NodeId id(const std::string& name) const;
};

BoundParams bind_params(Tape& tape, const ParamSet& params, bool trainable);
std::vector<std::vector<double>> collect_grads(const Tape& tape, const BoundParams& bound);

NodeId mlp_forward(Tape& tape, const MlpSpec& spec, const BoundParams& params, NodeId x,
                   bool training, std::uint64_t dropout_seed);

// slots is a [batch*S, B] node; returns [batch, output_width] in pooled mode
// and [batch*S, output_width] in per-slot mode.
NodeId set_forward(Tape& tape, const SetEncoderSpec& spec, const BoundParams& params,
                   NodeId slots, std::size_t batch, std::size_t slot_count, bool training,
                   std::uint64_t dropout_seed);

// One-off tape conveniences for evaluation-style callers and tests.
Tensor mlp_forward_eval(const MlpSpec& spec, const ParamSet& params, const Tensor& x);
Tensor set_forward_eval(const SetEncoderSpec& spec, const ParamSet& params,
                        const Tensor& slots /* [batch, S, B] */);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: applied to weights, not gradients
};

struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<double>> m;  // aligned with ParamSet::items
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const ParamSet& params, AdamConfig cfg);
void adam_step(AdamState& state, ParamSet& params,
               const std::vector<std::vector<double>>& grads);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct CheckpointHeader {
  std::uint32_t version = 1;
  std::uint64_t spec_hash = 0;
  std::uint64_t seed = 0;
  std::string config_json;  // enough to rebuild the architectures
};

void save_checkpoint(const std::string& path, const CheckpointHeader& header,
                     const std::vector<std::pair<std::string, Tensor>>& params);
std::pair<CheckpointHeader, std::vector<std::pair<std::string, Tensor>>> load_checkpoint(
    const std::string& path);

}  // namespace ncv
