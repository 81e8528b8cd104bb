#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncv/data.hpp"
#include "ncv/nn.hpp"
#include "ncv/tensor.hpp"

namespace ncv {

enum class Granularity { feature, slot_block };
enum class SelectorArch { mlp, sum_pool_mlp, attention_blocks };

struct GameConfig {
  double gamma = 0.5;         // weight on the adversarial term
  std::size_t mask_size = 12; // units each prover must select
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;  // verifier-only epochs on full encodings
  std::size_t batch_size = 512;
  double lr_verifier = 1e-3;
  double lr_provers = 1e-3;
  double weight_decay_verifier = 1e-4;
  double weight_decay_provers = 1e-4;
  double l1_penalty = 0.0;
  SelectorArch selector = SelectorArch::sum_pool_mlp;       // prover architecture
  SelectorArch verifier_encoder = SelectorArch::sum_pool_mlp;  // slot datasets only
  Granularity granularity = Granularity::slot_block;
  std::uint64_t seed = 1;
  EncodingKind encoding = EncodingKind::slot;
  // architecture knobs
  std::size_t verifier_hidden = 64;
  std::size_t prover_hidden = 64;
  std::size_t attention_heads = 4;
  std::size_t attention_blocks = 2;
  PoolKind pooling = PoolKind::sum;
  double dropout = 0.0;
};

// Number of selectable units for this config/dataset pairing (features for
// flat encodings, slots or features for slot encodings) and the width of one
// unit in the encoding.
std::size_t unit_count(const GameConfig& cfg, const DatasetBundle& data);
std::size_t unit_block_width(const GameConfig& cfg, const DatasetBundle& data);

void validate_game_config(const GameConfig& cfg, const DatasetBundle& data);

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

struct MaskSelection {
  std::vector<std::size_t> indices;  // ascending, exactly m entries
  Granularity granularity = Granularity::feature;
  std::vector<double> scores;  // snapshot the selection was made from
};

// Indices of the m largest scores, ties broken toward the lower index.
MaskSelection topk_mask(std::span<const double> scores, std::size_t m,
                        Granularity granularity = Granularity::feature);

// Keeps the selected units, zeroes everything else. block_width is 1 for
// feature granularity and B for slot blocks.
std::vector<double> apply_mask(std::span<const double> encoding, const MaskSelection& mask,
                               std::size_t block_width);

// ---------------------------------------------------------------------------
// agents
// ---------------------------------------------------------------------------

struct AgentArch {
  enum class Kind { mlp, set } kind = Kind::mlp;
  MlpSpec mlp;
  SetEncoderSpec set;
};

struct AgentBundle {
  AgentArch merlin_arch, morgana_arch, arthur_arch;
  ParamSet merlin, morgana, arthur;
  AdamState merlin_opt, morgana_opt, arthur_opt;
  std::uint64_t step = 0;  // batches processed
  std::uint64_t seed = 0;
};

AgentBundle make_agents(const GameConfig& cfg, const DatasetBundle& data);
std::uint64_t bundle_spec_hash(const AgentBundle& bundle);

void save_agents(const std::string& path, const AgentBundle& bundle,
                 const std::string& config_json);
// Rebuilds parameters into an architecture recreated by the caller from the
// stored config; validates the spec hash.
AgentBundle load_agents(const std::string& path, const GameConfig& cfg,
                        const DatasetBundle& data, std::string* config_json_out = nullptr);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Cross-entropy of the (K+1)-way posterior against the true class; rejection
// counts as a wrong answer. Targets must be < K.
NodeId merlin_loss(Tape& tape, NodeId arthur_logits, const std::vector<std::size_t>& targets,
                   std::size_t klasses);
// -log(p_y + p_reject): zero exactly when all mass sits on the safe answers.
NodeId morgana_safe_loss(Tape& tape, NodeId arthur_logits,
                         const std::vector<std::size_t>& targets, std::size_t klasses);
double arthur_loss(double l_merlin, double l_morgana, double gamma);

// Forward equals apply_mask(topk_mask(scores, m)); the backward pass treats
// the mask as sigmoid(scores) and adds the L1 penalty gradient.
NodeId straight_through_select(Tape& tape, NodeId scores, NodeId encodings, std::size_t m,
                               std::size_t block_width, double l1_coeff);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double l_merlin = 0.0;
  double l_morgana = 0.0;
  double l_arthur = 0.0;
  double completeness_train = 0.0;
  double soundness_train = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
};

// One two-phase pass over the training split: per batch the provers step on
// a frozen verifier (Merlin descends its CE, Morgana ascends the safe-mass
// loss), then the verifier steps on freshly selected masks.
EpochStats train_epoch(AgentBundle& agents, const DatasetBundle& data, const GameConfig& cfg,
                       std::size_t epoch_index);
// Warmup then the requested number of game epochs; epochs == 0 leaves the
// bundle untouched.
TrainLog train(AgentBundle& agents, const DatasetBundle& data, const GameConfig& cfg);

void write_training_log_csv(const std::string& path, const TrainLog& log);

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

struct Decision {
  std::size_t predicted = 0;  // == K means reject
  bool reject = false;
  std::vector<double> posterior;
  MaskSelection mask;
};

// Batched decisions over a split; pure function of (agents, split, config).
// `data` supplies the encoding dimensions; `split` may be any split with
// matching widths.
std::vector<Decision> evaluate_split(const Split& split, const AgentBundle& agents,
                                     const GameConfig& cfg, const DatasetBundle& data,
                                     bool use_morgana);

struct CertificateRecord {
  std::uint64_t sample_id = 0;
  std::string prover;  // "merlin" | "morgana"
  MaskSelection mask;
  std::vector<std::string> unit_names;
  std::vector<double> posterior;
  std::size_t predicted = 0;
  bool reject = false;
};

CertificateRecord infer(const ConceptSample& sample, std::uint64_t sample_id,
                        const AgentBundle& agents, const GameConfig& cfg,
                        const DatasetBundle& data, bool use_morgana = false);
std::string certificate_to_json(const CertificateRecord& record);

// Verifier logits on already-masked encodings [n, W], inference mode; used
// by evaluators that drive the verifier with masks of their own.
Tensor verifier_logits(const AgentBundle& agents, const Tensor& masked,
                       const DatasetBundle& data);

}  // namespace ncv
