#include "ncv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ncv/rng.hpp"

namespace ncv {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kProbFloor = 1e-12;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)), values(shape_numel(shape), fill) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extent must be positive, got " + shape_str(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match value count " +
                         std::to_string(values.size()));
  }
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t m) {
  if (m > scores.size()) {
    throw ContractError("top-k size " + std::to_string(m) + " exceeds unit count " +
                        std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (scores[i] != scores[j]) return scores[i] > scores[j];
    return i < j;  // ties toward the lower index
  });
  order.resize(m);
  std::sort(order.begin(), order.end());
  return order;
}

NodeId Tape::push(Tensor value, bool requires_grad,
                  std::function<void(Tape&, const Node&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor t, bool requires_grad) {
  return push(std::move(t), requires_grad, nullptr);
}

std::vector<double>& Tape::grad_buf(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

const std::vector<double>& Tape::grad(NodeId id) const {
  const Node& n = nodes_[id];
  if (!n.requires_grad) throw ContractError("gradient requested for a non-differentiable node");
  return n.grad;
}

void Tape::zero_grads() {
  for (Node& n : nodes_) {
    if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
  }
}

void Tape::backward(NodeId root) {
  const Node& r = nodes_[root];
  if (!r.value.is_scalar()) {
    throw ContractError("backward root must be scalar, got shape " + shape_str(r.value.shape));
  }
  zero_grads();
  if (!r.requires_grad) return;  // nothing upstream to differentiate
  grad_buf(root)[0] = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.requires_grad && n.backprop) n.backprop(*this, n);
  }
}

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0]) {
    throw DimensionError("matmul shape mismatch: " + shape_str(ta.shape) + " x " +
                         shape_str(tb.shape));
  }
  const std::size_t n = ta.shape[0], k = ta.shape[1], p = tb.shape[1];
  Tensor out({n, p}, 0.0);
  // ikj order: contributions to each out[i][j] still accumulate in k order,
  // so the summation order matches the plain ijk definition bitwise.
  const double* A = ta.values.data();
  const double* B = tb.values.data();
  double* O = out.values.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = A[i * k + kk];
      const double* Brow = B + kk * p;
      double* Orow = O + i * p;
      for (std::size_t j = 0; j < p; ++j) Orow[j] += aik * Brow[j];
    }
  }
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, b, n, k, p, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      if (t.nodes_[a].requires_grad) {
        std::vector<double>& da = t.grad_buf(a);
        const double* B = t.nodes_[b].value.values.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const double gij = g[i * p + j];
            const double* Brow = B + j;  // column j
            for (std::size_t kk = 0; kk < k; ++kk) da[i * k + kk] += gij * Brow[kk * p];
          }
      }
      if (t.nodes_[b].requires_grad) {
        std::vector<double>& db = t.grad_buf(b);
        const double* A = t.nodes_[a].value.values.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = A[i * k + kk];
            const double* grow = g.data() + i * p;
            double* dbrow = db.data() + kk * p;
            for (std::size_t j = 0; j < p; ++j) dbrow[j] += aik * grow[j];
          }
      }
    };
  }
  return out_id;
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  const bool a_scalar = ta.is_scalar(), b_scalar = tb.is_scalar();
  if (!a_scalar && !b_scalar && ta.shape != tb.shape) {
    throw DimensionError("add shape mismatch: " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
  }
  const Tensor& big = b_scalar ? ta : tb;
  Tensor out(big.shape, 0.0);
  if (a_scalar && !b_scalar) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[0] + tb[i];
  } else if (b_scalar && !a_scalar) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[0];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
  }
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, b, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      for (NodeId src : {a, b}) {
        if (!t.nodes_[src].requires_grad) continue;
        std::vector<double>& d = t.grad_buf(src);
        if (d.size() == 1 && g.size() > 1) {
          double s = 0.0;
          for (double v : g) s += v;
          d[0] += s;
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      }
    };
  }
  return out_id;
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  const bool a_scalar = ta.is_scalar(), b_scalar = tb.is_scalar();
  if (!a_scalar && !b_scalar && ta.shape != tb.shape) {
    throw DimensionError("mul shape mismatch: " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
  }
  const Tensor& big = b_scalar ? ta : tb;
  Tensor out(big.shape, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (a_scalar ? ta[0] : ta[i]) * (b_scalar ? tb[0] : tb[i]);
  }
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, b, a_scalar, b_scalar, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      const Tensor& ta = t.nodes_[a].value;
      const Tensor& tb = t.nodes_[b].value;
      if (t.nodes_[a].requires_grad) {
        std::vector<double>& da = t.grad_buf(a);
        if (a_scalar && !b_scalar) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * tb[i];
          da[0] += s;
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (b_scalar ? tb[0] : tb[i]);
        }
      }
      if (t.nodes_[b].requires_grad) {
        std::vector<double>& db = t.grad_buf(b);
        if (b_scalar && !a_scalar) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * ta[i];
          db[0] += s;
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (a_scalar ? ta[0] : ta[i]);
        }
      }
    };
  }
  return out_id;
}

NodeId Tape::scale(NodeId a, double s) {
  const Tensor& ta = nodes_[a].value;
  Tensor out(ta.shape, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * s;
  const bool rg = nodes_[a].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, s, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      std::vector<double>& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
    };
  }
  return out_id;
}

NodeId Tape::add_bias(NodeId x, NodeId b) {
  const Tensor& tx = nodes_[x].value;
  const Tensor& tb = nodes_[b].value;
  if (tx.rank() != 2 || tb.rank() != 1 || tx.shape[1] != tb.shape[0]) {
    throw DimensionError("add_bias shape mismatch: " + shape_str(tx.shape) + " + " +
                         shape_str(tb.shape));
  }
  const std::size_t n = tx.shape[0], h = tx.shape[1];
  Tensor out({n, h}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j) out[i * h + j] = tx[i * h + j] + tb[j];
  const bool rg = nodes_[x].requires_grad || nodes_[b].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [x, b, n, h, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      if (t.nodes_[x].requires_grad) {
        std::vector<double>& dx = t.grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (t.nodes_[b].requires_grad) {
        std::vector<double>& db = t.grad_buf(b);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < h; ++j) db[j] += g[i * h + j];
      }
    };
  }
  return out_id;
}

NodeId Tape::relu(NodeId a) {
  const Tensor& ta = nodes_[a].value;
  Tensor out(ta.shape, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
  const bool rg = nodes_[a].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      const Tensor& ta = t.nodes_[a].value;
      std::vector<double>& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (ta[i] > 0.0) da[i] += g[i];
    };
  }
  return out_id;
}

NodeId Tape::gelu(NodeId a) {
  const Tensor& ta = nodes_[a].value;
  Tensor out(ta.shape, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = ta[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  const bool rg = nodes_[a].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      const Tensor& ta = t.nodes_[a].value;
      std::vector<double>& da = t.grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = ta[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        da[i] += g[i] * (cdf + x * pdf);
      }
    };
  }
  return out_id;
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId shift) {
  const Tensor& tx = nodes_[x].value;
  const Tensor& tg = nodes_[gain].value;
  const Tensor& ts = nodes_[shift].value;
  if (tx.rank() < 1) throw DimensionError("layer_norm needs rank >= 1");
  const std::size_t h = tx.shape.back();
  if (tg.shape != Shape{h} || ts.shape != Shape{h}) {
    throw DimensionError("layer_norm scale/shift must be [" + std::to_string(h) + "], got " +
                         shape_str(tg.shape) + " and " + shape_str(ts.shape));
  }
  const std::size_t rows = tx.size() / h;
  Tensor out(tx.shape, 0.0);
  std::vector<double> xhat(tx.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = tx.values.data() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += row[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = istd;
    for (std::size_t j = 0; j < h; ++j) {
      const double xn = (row[j] - mean) * istd;
      xhat[r * h + j] = xn;
      out[r * h + j] = tg[j] * xn + ts[j];
    }
  }
  const bool rg =
      nodes_[x].requires_grad || nodes_[gain].requires_grad || nodes_[shift].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [x, gain, shift, rows, h, xhat = std::move(xhat),
                               inv_std = std::move(inv_std), out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      const Tensor& tg = t.nodes_[gain].value;
      if (t.nodes_[gain].requires_grad) {
        std::vector<double>& dg = t.grad_buf(gain);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) dg[j] += g[r * h + j] * xhat[r * h + j];
      }
      if (t.nodes_[shift].requires_grad) {
        std::vector<double>& ds = t.grad_buf(shift);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) ds[j] += g[r * h + j];
      }
      if (t.nodes_[x].requires_grad) {
        std::vector<double>& dx = t.grad_buf(x);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < h; ++j) {
            const double dxh = g[r * h + j] * tg[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[r * h + j];
          }
          mean_dxhat /= static_cast<double>(h);
          mean_dxhat_xhat /= static_cast<double>(h);
          for (std::size_t j = 0; j < h; ++j) {
            const double dxh = g[r * h + j] * tg[j];
            dx[r * h + j] +=
                inv_std[r] * (dxh - mean_dxhat - xhat[r * h + j] * mean_dxhat_xhat);
          }
        }
      }
    };
  }
  return out_id;
}

NodeId Tape::dropout(NodeId x, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0,1)");
  if (rate == 0.0) return x;
  const Tensor& tx = nodes_[x].value;
  const double keep = 1.0 - rate;
  Rng rng(seed);
  std::vector<double> mask(tx.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  }
  Tensor out(tx.shape, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = tx[i] * mask[i];
  const bool rg = nodes_[x].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [x, mask = std::move(mask), out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      std::vector<double>& dx = t.grad_buf(x);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
    };
  }
  return out_id;
}

NodeId Tape::reshape(NodeId x, Shape s) {
  const Tensor& tx = nodes_[x].value;
  if (shape_numel(s) != tx.size()) {
    throw DimensionError("reshape " + shape_str(tx.shape) + " -> " + shape_str(s) +
                         " changes element count");
  }
  Tensor out(std::move(s), tx.values);
  const bool rg = nodes_[x].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [x, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      std::vector<double>& dx = t.grad_buf(x);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    };
  }
  return out_id;
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[0] != tb.shape[0]) {
    throw DimensionError("concat_cols shape mismatch: " + shape_str(ta.shape) + " ++ " +
                         shape_str(tb.shape));
  }
  const std::size_t n = ta.shape[0], p = ta.shape[1], q = tb.shape[1];
  Tensor out({n, p + q}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) out[i * (p + q) + j] = ta[i * p + j];
    for (std::size_t j = 0; j < q; ++j) out[i * (p + q) + p + j] = tb[i * q + j];
  }
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, b, n, p, q, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      if (t.nodes_[a].requires_grad) {
        std::vector<double>& da = t.grad_buf(a);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j) da[i * p + j] += g[i * (p + q) + j];
      }
      if (t.nodes_[b].requires_grad) {
        std::vector<double>& db = t.grad_buf(b);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j) db[i * q + j] += g[i * (p + q) + p + j];
      }
    };
  }
  return out_id;
}

NodeId Tape::sum(NodeId a) {
  const Tensor& ta = nodes_[a].value;
  double s = 0.0;
  for (double v : ta.values) s += v;
  const bool rg = nodes_[a].requires_grad;
  NodeId out_id = push(Tensor::scalar(s), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, out_id](Tape& t, const Node&) {
      const double g = t.nodes_[out_id].grad[0];
      std::vector<double>& da = t.grad_buf(a);
      for (double& v : da) v += g;
    };
  }
  return out_id;
}

NodeId Tape::mean(NodeId a) {
  const Tensor& ta = nodes_[a].value;
  const double n = static_cast<double>(ta.size());
  double s = 0.0;
  for (double v : ta.values) s += v;
  const bool rg = nodes_[a].requires_grad;
  NodeId out_id = push(Tensor::scalar(s / n), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [a, n, out_id](Tape& t, const Node&) {
      const double g = t.nodes_[out_id].grad[0] / n;
      std::vector<double>& da = t.grad_buf(a);
      for (double& v : da) v += g;
    };
  }
  return out_id;
}

NodeId Tape::pool_slots(NodeId x, std::size_t groups, PoolKind kind) {
  const Tensor& tx = nodes_[x].value;
  if (tx.rank() != 2 || groups == 0 || tx.shape[0] % groups != 0) {
    throw DimensionError("pool_slots: rows of " + shape_str(tx.shape) +
                         " not divisible into " + std::to_string(groups) + " groups");
  }
  const std::size_t s = tx.shape[0] / groups, h = tx.shape[1];
  const double w = kind == PoolKind::mean ? 1.0 / static_cast<double>(s) : 1.0;
  Tensor out({groups, h}, 0.0);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t si = 0; si < s; ++si)
      for (std::size_t j = 0; j < h; ++j) out[gi * h + j] += tx[(gi * s + si) * h + j] * w;
  const bool rg = nodes_[x].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [x, groups, s, h, w, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      std::vector<double>& dx = t.grad_buf(x);
      for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t si = 0; si < s; ++si)
          for (std::size_t j = 0; j < h; ++j) dx[(gi * s + si) * h + j] += g[gi * h + j] * w;
    };
  }
  return out_id;
}

NodeId Tape::broadcast_rows(NodeId x, std::size_t repeat) {
  const Tensor& tx = nodes_[x].value;
  if (tx.rank() != 2 || repeat == 0) {
    throw DimensionError("broadcast_rows needs a [n,h] input and repeat > 0");
  }
  const std::size_t n = tx.shape[0], h = tx.shape[1];
  Tensor out({n * repeat, h}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < repeat; ++r)
      for (std::size_t j = 0; j < h; ++j) out[(i * repeat + r) * h + j] = tx[i * h + j];
  const bool rg = nodes_[x].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [x, n, repeat, h, out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      std::vector<double>& dx = t.grad_buf(x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < repeat; ++r)
          for (std::size_t j = 0; j < h; ++j) dx[i * h + j] += g[(i * repeat + r) * h + j];
    };
  }
  return out_id;
}

NodeId Tape::multihead_attention(NodeId q, NodeId k, NodeId v, std::size_t batch,
                                 std::size_t slots, std::size_t heads) {
  const Tensor& tq = nodes_[q].value;
  const Tensor& tk = nodes_[k].value;
  const Tensor& tv = nodes_[v].value;
  if (tq.shape != tk.shape || tq.shape != tv.shape || tq.rank() != 2) {
    throw DimensionError("attention q/k/v must share a [n,h] shape, got " +
                         shape_str(tq.shape) + ", " + shape_str(tk.shape) + ", " +
                         shape_str(tv.shape));
  }
  const std::size_t h = tq.shape[1];
  if (tq.shape[0] != batch * slots || heads == 0 || h % heads != 0) {
    throw DimensionError("attention layout mismatch: rows " + std::to_string(tq.shape[0]) +
                         " vs batch*slots " + std::to_string(batch * slots) + ", width " +
                         std::to_string(h) + " vs heads " + std::to_string(heads));
  }
  const std::size_t d = h / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor out({batch * slots, h}, 0.0);
  // attention weights cached for backward: [batch, head, slots, slots]
  std::vector<double> attn(batch * heads * slots * slots, 0.0);
  std::vector<double> row(slots);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      double* A = attn.data() + (bi * heads + hd) * slots * slots;
      const std::size_t col0 = hd * d;
      for (std::size_t i = 0; i < slots; ++i) {
        const double* qi = tq.values.data() + (bi * slots + i) * h + col0;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < slots; ++j) {
          const double* kj = tk.values.data() + (bi * slots + j) * h + col0;
          double dot = 0.0;
          for (std::size_t c = 0; c < d; ++c) dot += qi[c] * kj[c];
          row[j] = dot * inv_sqrt_d;
          if (row[j] > mx) mx = row[j];
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < slots; ++j) {
          row[j] = std::exp(row[j] - mx);
          denom += row[j];
        }
        double* orow = out.values.data() + (bi * slots + i) * h + col0;
        for (std::size_t j = 0; j < slots; ++j) {
          const double a = row[j] / denom;
          A[i * slots + j] = a;
          const double* vj = tv.values.data() + (bi * slots + j) * h + col0;
          for (std::size_t c = 0; c < d; ++c) orow[c] += a * vj[c];
        }
      }
    }
  }
  const bool rg =
      nodes_[q].requires_grad || nodes_[k].requires_grad || nodes_[v].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [q, k, v, batch, slots, heads, d, h, inv_sqrt_d,
                               attn = std::move(attn), out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      const Tensor& tq = t.nodes_[q].value;
      const Tensor& tk = t.nodes_[k].value;
      const Tensor& tv = t.nodes_[v].value;
      std::vector<double>& dq = t.grad_buf(q);
      std::vector<double>& dk = t.grad_buf(k);
      std::vector<double>& dv = t.grad_buf(v);
      std::vector<double> dA(slots * slots), dZ(slots * slots);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        for (std::size_t hd = 0; hd < heads; ++hd) {
          const double* A = attn.data() + (bi * heads + hd) * slots * slots;
          const std::size_t col0 = hd * d;
          auto go = [&](std::size_t s_, std::size_t c) {
            return g[(bi * slots + s_) * h + col0 + c];
          };
          // dV = A^T dO
          for (std::size_t j = 0; j < slots; ++j) {
            double* dvj = dv.data() + (bi * slots + j) * h + col0;
            for (std::size_t i = 0; i < slots; ++i) {
              const double a = A[i * slots + j];
              for (std::size_t c = 0; c < d; ++c) dvj[c] += a * go(i, c);
            }
          }
          // dA = dO V^T, then softmax backward per row
          for (std::size_t i = 0; i < slots; ++i) {
            for (std::size_t j = 0; j < slots; ++j) {
              const double* vj = tv.values.data() + (bi * slots + j) * h + col0;
              double dot = 0.0;
              for (std::size_t c = 0; c < d; ++c) dot += go(i, c) * vj[c];
              dA[i * slots + j] = dot;
            }
            double inner = 0.0;
            for (std::size_t j = 0; j < slots; ++j)
              inner += dA[i * slots + j] * A[i * slots + j];
            for (std::size_t j = 0; j < slots; ++j)
              dZ[i * slots + j] = A[i * slots + j] * (dA[i * slots + j] - inner);
          }
          // dQ = dZ K / sqrt(d); dK = dZ^T Q / sqrt(d)
          for (std::size_t i = 0; i < slots; ++i) {
            double* dqi = dq.data() + (bi * slots + i) * h + col0;
            for (std::size_t j = 0; j < slots; ++j) {
              const double z = dZ[i * slots + j] * inv_sqrt_d;
              const double* kj = tk.values.data() + (bi * slots + j) * h + col0;
              double* dkj = dk.data() + (bi * slots + j) * h + col0;
              const double* qi = tq.values.data() + (bi * slots + i) * h + col0;
              for (std::size_t c = 0; c < d; ++c) {
                dqi[c] += z * kj[c];
                dkj[c] += z * qi[c];
              }
            }
          }
        }
      }
    };
  }
  return out_id;
}

namespace {

void check_targets(const Tensor& logits, const std::vector<std::size_t>& targets,
                   std::size_t max_exclusive) {
  if (logits.rank() != 2) {
    throw DimensionError("loss logits must be [batch,width], got " + shape_str(logits.shape));
  }
  if (targets.size() != logits.shape[0]) {
    throw DimensionError("target count " + std::to_string(targets.size()) +
                         " does not match batch " + std::to_string(logits.shape[0]));
  }
  if (targets.empty()) throw ContractError("loss over an empty batch");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= max_exclusive) {
      throw ContractError("target " + std::to_string(targets[i]) + " at row " +
                          std::to_string(i) + " out of range (< " +
                          std::to_string(max_exclusive) + " required)");
    }
  }
}

std::vector<double> row_softmax(const Tensor& logits) {
  const std::size_t n = logits.shape[0], w = logits.shape[1];
  std::vector<double> p(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.values.data() + i * w;
    double mx = row[0];
    for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      p[i * w + j] = std::exp(row[j] - mx);
      denom += p[i * w + j];
    }
    for (std::size_t j = 0; j < w; ++j) p[i * w + j] /= denom;
  }
  return p;
}

}  // namespace

NodeId Tape::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> targets) {
  const Tensor& tl = nodes_[logits].value;
  check_targets(tl, targets, tl.shape[1]);
  const std::size_t n = tl.shape[0], w = tl.shape[1];
  std::vector<double> p = row_softmax(tl);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = tl.values.data() + i * w;
    double mx = row[0];
    for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < w; ++j) denom += std::exp(row[j] - mx);
    loss += (mx + std::log(denom)) - row[targets[i]];
  }
  loss /= static_cast<double>(n);
  const bool rg = nodes_[logits].requires_grad;
  NodeId out_id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [logits, n, w, p = std::move(p), targets = std::move(targets),
                               out_id](Tape& t, const Node&) {
      const double g = t.nodes_[out_id].grad[0] / static_cast<double>(n);
      std::vector<double>& dl = t.grad_buf(logits);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          double v = p[i * w + j];
          if (j == targets[i]) v -= 1.0;
          dl[i * w + j] += g * v;
        }
      }
    };
  }
  return out_id;
}

NodeId Tape::safe_mass_loss(NodeId logits, std::vector<std::size_t> targets) {
  const Tensor& tl = nodes_[logits].value;
  if (tl.rank() != 2 || tl.shape[1] < 2) {
    throw DimensionError("safe_mass_loss logits must be [batch,K+1] with K >= 1, got " +
                         shape_str(tl.shape));
  }
  const std::size_t n = tl.shape[0], w = tl.shape[1];
  check_targets(tl, targets, w - 1);  // the last column is the rejection class
  std::vector<double> p = row_softmax(tl);
  double loss = 0.0;
  std::vector<std::uint8_t> clamped(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double q = p[i * w + targets[i]] + p[i * w + (w - 1)];
    if (q < kProbFloor) {
      clamped[i] = 1;
      loss += -std::log(kProbFloor);
    } else {
      loss += -std::log(q);
    }
  }
  loss /= static_cast<double>(n);
  const bool rg = nodes_[logits].requires_grad;
  NodeId out_id = push(Tensor::scalar(loss), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [logits, n, w, p = std::move(p), targets = std::move(targets),
                               clamped = std::move(clamped), out_id](Tape& t, const Node&) {
      const double g = t.nodes_[out_id].grad[0] / static_cast<double>(n);
      std::vector<double>& dl = t.grad_buf(logits);
      for (std::size_t i = 0; i < n; ++i) {
        if (clamped[i]) continue;  // flat region of the floor
        const double py = p[i * w + targets[i]];
        const double pr = p[i * w + (w - 1)];
        const double q = py + pr;
        for (std::size_t j = 0; j < w; ++j) {
          double v = p[i * w + j];
          if (j == targets[i]) v -= py / q;
          if (j == w - 1) v -= pr / q;
          dl[i * w + j] += g * v;
        }
      }
    };
  }
  return out_id;
}

NodeId Tape::hard_topk_select(NodeId scores, NodeId x, std::size_t m, std::size_t block,
                              double l1_coeff) {
  const Tensor& ts = nodes_[scores].value;
  const Tensor& tx = nodes_[x].value;
  if (ts.rank() != 2 || tx.rank() != 2 || ts.shape[0] != tx.shape[0]) {
    throw DimensionError("hard_topk_select: scores " + shape_str(ts.shape) + " vs inputs " +
                         shape_str(tx.shape));
  }
  const std::size_t n = ts.shape[0], u = ts.shape[1];
  if (block == 0 || tx.shape[1] != u * block) {
    throw DimensionError("hard_topk_select: " + std::to_string(u) + " units of block " +
                         std::to_string(block) + " do not tile input width " +
                         std::to_string(tx.shape[1]));
  }
  if (m > u) {
    throw ContractError("mask size " + std::to_string(m) + " exceeds unit count " +
                        std::to_string(u));
  }
  Tensor out({n, u * block}, 0.0);
  std::vector<std::uint8_t> selected(n * u, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto idx = topk_indices(
        std::span<const double>(ts.values.data() + i * u, u), m);
    for (std::size_t unit : idx) {
      selected[i * u + unit] = 1;
      for (std::size_t c = 0; c < block; ++c) {
        out[i * u * block + unit * block + c] = tx[i * u * block + unit * block + c];
      }
    }
  }
  const bool rg = nodes_[scores].requires_grad || nodes_[x].requires_grad;
  NodeId out_id = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[out_id].backprop = [scores, x, n, u, block, l1_coeff,
                               selected = std::move(selected), out_id](Tape& t, const Node&) {
      const std::vector<double>& g = t.nodes_[out_id].grad;
      if (t.nodes_[x].requires_grad) {
        std::vector<double>& dx = t.grad_buf(x);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t unit = 0; unit < u; ++unit) {
            if (!selected[i * u + unit]) continue;
            for (std::size_t c = 0; c < block; ++c) {
              const std::size_t e = i * u * block + unit * block + c;
              dx[e] += g[e];
            }
          }
      }
      if (t.nodes_[scores].requires_grad) {
        const Tensor& ts = t.nodes_[scores].value;
        const Tensor& tx = t.nodes_[x].value;
        std::vector<double>& dsc = t.grad_buf(scores);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t unit = 0; unit < u; ++unit) {
            const double s = sigmoid(ts[i * u + unit]);
            const double ds = s * (1.0 - s);
            double inner = 0.0;
            for (std::size_t c = 0; c < block; ++c) {
              const std::size_t e = i * u * block + unit * block + c;
              inner += g[e] * tx[e];
            }
            dsc[i * u + unit] +=
                ds * inner + l1_coeff * ds / static_cast<double>(n);
          }
        }
      }
    };
  }
  return out_id;
}

// ---------------------------------------------------------------------------
// verification harness
// ---------------------------------------------------------------------------

Tensor nudge_off_kinks(Tensor x, double margin) {
  for (double& v : x.values) {
    if (v >= 0.0 && v < margin) v += margin;
    if (v < 0.0 && v > -margin) v -= margin;
  }
  return x;
}

double grad_check(const ScalarFn& f, const Tensor& x, double step) {
  Tape tape;
  NodeId xid = tape.leaf(x, true);
  NodeId root = f(tape, xid);
  const double fx = tape.value(root)[0];
  if (!std::isfinite(fx)) return std::numeric_limits<double>::infinity();
  tape.backward(root);
  const std::vector<double> analytic = tape.grad(xid);

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto eval = [&](double delta) {
      Tensor xp = x;
      xp.values[i] += delta;
      Tape t2;
      NodeId id = t2.leaf(std::move(xp), false);
      return t2.value(f(t2, id))[0];
    };
    const double fp = eval(step);
    const double fm = eval(-step);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      return std::numeric_limits<double>::infinity();
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace ncv
