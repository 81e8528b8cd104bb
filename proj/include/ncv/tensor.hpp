#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncv {

// Error taxonomy mirrored by the C API status codes: ConfigError -> 1,
// RuntimeError -> 2, ContractError (and its DimensionError subtype) -> 3.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// Dense row-major 64-bit tensor. Values are immutable once a tensor is put
// on a tape; gradients live in the tape nodes, not here.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(Shape s, double fill);
  Tensor(Shape s, std::vector<double> v);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return values.size() == 1; }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
};

std::size_t shape_numel(const Shape& s);

// Ascending indices of the m largest entries; ties resolved toward the
// lower index. Throws ContractError when m exceeds the entry count.
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t m);

using NodeId = std::uint32_t;

enum class PoolKind { sum, mean };

// Reverse-mode tape. Nodes are appended in evaluation order, so the node
// sequence is already a topological order; backward() replays it once in
// reverse. One tape per forward pass; tapes are independent and never
// shared across threads.
class Tape {
 public:
  NodeId leaf(Tensor t, bool requires_grad);
  NodeId constant(Tensor t) { return leaf(std::move(t), false); }

  // ---- primitive operations -------------------------------------------
  NodeId matmul(NodeId a, NodeId b);            // [n,k] x [k,p] -> [n,p]
  NodeId add(NodeId a, NodeId b);               // equal shape or scalar operand
  NodeId mul(NodeId a, NodeId b);               // equal shape or scalar operand
  NodeId scale(NodeId a, double s);
  NodeId add_bias(NodeId x, NodeId b);          // [n,h] + [h] per row
  NodeId relu(NodeId a);
  NodeId gelu(NodeId a);                        // exact erf form
  NodeId layer_norm(NodeId x, NodeId gain, NodeId shift);  // over last axis
  NodeId dropout(NodeId x, double rate, std::uint64_t seed);
  NodeId reshape(NodeId x, Shape s);
  NodeId concat_cols(NodeId a, NodeId b);       // [n,p] ++ [n,q] -> [n,p+q]
  NodeId sum(NodeId a);                         // -> scalar
  NodeId mean(NodeId a);                        // -> scalar
  NodeId pool_slots(NodeId x, std::size_t groups, PoolKind kind);
  // [g*s, h] -> [g, h]
  NodeId broadcast_rows(NodeId x, std::size_t repeat);  // [g,h] -> [g*r, h]
  NodeId multihead_attention(NodeId q, NodeId k, NodeId v, std::size_t batch,
                             std::size_t slots, std::size_t heads);
  // mean over batch of -log softmax(logits)[target]; logits [n, w]
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> targets);
  // mean over batch of -log(p_target + p_last_column), probability floor 1e-12
  NodeId safe_mass_loss(NodeId logits, std::vector<std::size_t> targets);
  // Hard top-k selection per row with a straight-through backward rule.
  // scores [n, u]; x [n, u*block]. Forward: entries of the m highest-scoring
  // units survive, everything else is exactly zero. Backward treats the mask
  // as sigmoid(scores) and adds the L1 penalty gradient l1 * d sigmoid/ds / n.
  NodeId hard_topk_select(NodeId scores, NodeId x, std::size_t m,
                          std::size_t block, double l1_coeff);

  // ---- execution -------------------------------------------------------
  void backward(NodeId root);  // root must be scalar; resets grads first
  void zero_grads();

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const std::vector<double>& grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<double> grad;  // sized lazily on first backward
    std::function<void(Tape&, const Node&)> backprop;  // empty for leaves
  };

  NodeId push(Tensor value, bool requires_grad,
              std::function<void(Tape&, const Node&)> backprop);
  std::vector<double>& grad_buf(NodeId id);
  void check_finite(NodeId id, const char* op) const;

  std::vector<Node> nodes_;
  friend struct TapeTestAccess;
};

// Builds a scalar-valued graph from one input tensor; used by grad_check.
using ScalarFn = std::function<NodeId(Tape&, NodeId)>;

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
// using central differences with the given step. Non-finite function values
// are reported as +infinity.
double grad_check(const ScalarFn& f, const Tensor& x, double step);

// Pushes every coordinate at least `margin` away from zero so finite
// differences never straddle a relu kink.
Tensor nudge_off_kinks(Tensor x, double margin);

}  // namespace ncv
