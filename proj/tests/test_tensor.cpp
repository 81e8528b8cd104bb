#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ncv/rng.hpp"
#include "ncv/tensor.hpp"

using namespace ncv;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// independent triple-loop product used as the matmul oracle
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.shape[0], k = a.shape[1], p = b.shape[1];
  Tensor out({n, p}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * p + j];
      out[i * p + j] = acc;
    }
  return out;
}

// high-precision cross-entropy reference
double ce_oracle(const Tensor& logits, const std::vector<std::size_t>& targets) {
  const std::size_t n = logits.shape[0], w = logits.shape[1];
  long double total = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    long double mx = logits[i * w];
    for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, (long double)logits[i * w + j]);
    long double denom = 0.0L;
    for (std::size_t j = 0; j < w; ++j) denom += expl((long double)logits[i * w + j] - mx);
    total += (logl(denom) + mx) - (long double)logits[i * w + targets[i]];
  }
  return (double)(total / (long double)n);
}

}  // namespace

TEST_CASE("matmul matches hand values and the triple-loop oracle") {
  Tape tape;
  NodeId eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  NodeId a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(tape.value(tape.matmul(eye, a)).values == std::vector<double>{1, 2, 3, 4});

  NodeId b = tape.constant(Tensor({2, 1}, {0, 1}));
  CHECK(tape.value(tape.matmul(a, b)).values == std::vector<double>{2, 4});

  NodeId zero = tape.constant(Tensor({2, 2}, 0.0));
  CHECK(tape.value(tape.matmul(zero, a)).values == std::vector<double>{0, 0, 0, 0});

  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor ta = random_tensor({3, 4}, rng);
    Tensor tb = random_tensor({4, 5}, rng);
    Tape t2;
    const Tensor& got = t2.value(t2.matmul(t2.constant(ta), t2.constant(tb)));
    const Tensor want = matmul_oracle(ta, tb);
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tape tape;
  NodeId a = tape.constant(Tensor({2, 3}, 0.0));
  NodeId b = tape.constant(Tensor({2, 2}, 0.0));
  CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("elementwise basics") {
  Tape tape;
  NodeId x = tape.constant(Tensor({3}, {-1, 0, 2}));
  CHECK(tape.value(tape.relu(x)).values == std::vector<double>{0, 0, 2});

  NodeId z = tape.constant(Tensor::scalar(0.0));
  CHECK(tape.value(tape.gelu(z))[0] == 0.0);

  // constant row: zero variance handled by the epsilon, output zero before
  // scale/shift
  NodeId c = tape.constant(Tensor({1, 4}, 3.25));
  NodeId gain = tape.constant(Tensor({4}, 1.0));
  NodeId shift = tape.constant(Tensor({4}, 0.0));
  const Tensor& ln = tape.value(tape.layer_norm(c, gain, shift));
  for (double v : ln.values) CHECK(v == 0.0);

  NodeId s = tape.constant(Tensor::scalar(2.0));
  NodeId m = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(tape.value(tape.mul(m, s)).values == std::vector<double>{2, 4, 6, 8});
  CHECK_THROWS_AS(tape.add(m, tape.constant(Tensor({3}, 0.0))), DimensionError);
}

TEST_CASE("cross entropy matches closed forms and the long-double oracle") {
  {
    Tape tape;
    NodeId logits = tape.constant(Tensor({1, 4}, 0.0));
    CHECK(tape.value(tape.softmax_cross_entropy(logits, {2}))[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  {
    Tape tape;
    NodeId logits = tape.constant(Tensor({1, 3}, {100, 0, 0}));
    CHECK(tape.value(tape.softmax_cross_entropy(logits, {0}))[0] ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
  Rng rng(11);
  Tensor logits = random_tensor({3, 5}, rng, -4.0, 4.0);
  std::vector<std::size_t> targets = {1, 0, 4};
  Tape tape;
  const double got = tape.value(tape.softmax_cross_entropy(tape.constant(logits), targets))[0];
  CHECK(got == doctest::Approx(ce_oracle(logits, targets)).epsilon(1e-12));

  CHECK_THROWS_AS(tape.softmax_cross_entropy(tape.constant(logits), {1, 0, 5}), ContractError);
}

TEST_CASE("backward covers the spec examples") {
  {
    Tape tape;
    NodeId x = tape.leaf(Tensor({4}, {1, 2, 3, 4}), true);
    tape.backward(tape.sum(x));
    CHECK(tape.grad(x) == std::vector<double>{1, 1, 1, 1});
  }
  {
    Tape tape;
    NodeId x = tape.leaf(Tensor::scalar(2.0), true);
    NodeId y = tape.leaf(Tensor::scalar(3.0), true);
    tape.backward(tape.mul(x, y));
    CHECK(tape.grad(x)[0] == 3.0);
    CHECK(tape.grad(y)[0] == 2.0);
  }
  {
    Tape tape;
    NodeId x = tape.leaf(Tensor({2, 2}, 1.0), true);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
  }
}

TEST_CASE("backward is idempotent across replays") {
  Rng rng(3);
  Tensor x = random_tensor({3, 3}, rng);
  Tape tape;
  NodeId xid = tape.leaf(x, true);
  NodeId w = tape.constant(random_tensor({3, 2}, rng));
  NodeId root = tape.mean(tape.gelu(tape.matmul(xid, w)));
  tape.backward(root);
  const std::vector<double> first = tape.grad(xid);
  tape.zero_grads();
  tape.backward(root);
  CHECK(tape.grad(xid) == first);
}

TEST_CASE("forward results are bitwise deterministic") {
  Rng rng(5);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({6, 3}, rng);
  auto run = [&]() {
    Tape tape;
    NodeId r = tape.mean(tape.gelu(tape.matmul(tape.constant(a), tape.constant(b))));
    return tape.value(r)[0];
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check on every primitive stays below 1e-5") {
  Rng rng(17);
  constexpr double kStep = 1e-6;
  constexpr double kTol = 1e-5;
  // ten random instances per op, as the contract requires
  for (int trial = 0; trial < 10; ++trial) {
    // all constants fixed up front: grad_check requires f to be deterministic
    const Tensor x = nudge_off_kinks(random_tensor({3, 4}, rng), 1e-3);
    const Tensor w = random_tensor({4, 2}, rng);
    const Tensor v34 = random_tensor({3, 4}, rng);
    const Tensor m212 = random_tensor({2, 12}, rng);
    const Tensor gain4 = random_tensor({4}, rng);
    const Tensor shift4 = random_tensor({4}, rng);
    const Tensor q44 = random_tensor({4, 4}, rng);
    const Tensor k44 = random_tensor({4, 4}, rng);
    const Tensor v44 = random_tensor({4, 4}, rng);

    auto check = [&](const ScalarFn& f, const Tensor& at) {
      CHECK(grad_check(f, at, kStep) < kTol);
    };

    check([&](Tape& t, NodeId id) { return t.sum(id); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.matmul(id, t.constant(w))); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.matmul(t.constant(v34), t.reshape(id, {4, 3}))); }, x);
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
    check([&](Tape& t, NodeId id) {
      // the flattened input acts as the gain of a fixed normalization
      return t.mean(t.layer_norm(t.constant(m212), t.reshape(id, {12}),
                                 t.constant(Tensor({12}, 0.0))));
    }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.dropout(id, 0.4, 99)); }, x);
    check([&](Tape& t, NodeId id) { return t.sum(t.concat_cols(id, t.constant(v34))); }, x);
    check([&](Tape& t, NodeId id) { return t.mean(t.pool_slots(id, 1, PoolKind::sum)); }, x);
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
}

TEST_CASE("grad_check helper behaviour") {
  Rng rng(23);
  const Tensor x = random_tensor({5}, rng);
  CHECK(grad_check([](Tape& t, NodeId id) { return t.sum(id); }, x, 1e-6) <
        1e-10);  // machine precision territory
  // NaN-producing functions surface as +infinity
  const double bad = grad_check(
      [](Tape& t, NodeId id) {
        return t.mean(t.mul(id, t.constant(Tensor({5}, std::nan("")))));
      },
      x, 1e-6);
  CHECK(std::isinf(bad));
}

TEST_CASE("straight-through selection: forward is the hard mask, backward the surrogate") {
  Rng rng(31);
  const std::size_t u = 6;
  const Tensor scores = random_tensor({2, u}, rng);
  const Tensor x = random_tensor({2, u}, rng);
  const Tensor coeff = random_tensor({2, u}, rng);

  // forward equals apply-mask-after-topk, elementwise
  Tape tape;
  NodeId sid = tape.leaf(scores, true);
  NodeId xid = tape.constant(x);
  NodeId masked = tape.hard_topk_select(sid, xid, 3, 1, 0.0);
  for (std::size_t row = 0; row < 2; ++row) {
    auto idx = topk_indices({scores.values.data() + row * u, u}, 3);
    for (std::size_t j = 0; j < u; ++j) {
      const bool keep = std::find(idx.begin(), idx.end(), j) != idx.end();
      CHECK(tape.value(masked)[row * u + j] == (keep ? x[row * u + j] : 0.0));
    }
  }

  // with a linear downstream loss the straight-through score gradient equals
  // the exact gradient of loss(sigmoid(scores) * x), checked by central
  // differences on that surrogate
  NodeId loss = tape.sum(tape.mul(masked, tape.constant(coeff)));
  tape.backward(loss);
  const std::vector<double> got = tape.grad(sid);
  auto surrogate = [&](const Tensor& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-s[i]));
      total += sig * x[i] * coeff[i];
    }
    return total;
  };
  for (std::size_t i = 0; i < scores.size(); ++i) {
    Tensor sp = scores, sm = scores;
    sp.values[i] += 1e-6;
    sm.values[i] -= 1e-6;
    const double numeric = (surrogate(sp) - surrogate(sm)) / 2e-6;
    CHECK(got[i] == doctest::Approx(numeric).epsilon(1e-5));
  }
}

TEST_CASE("straight-through selection adds the L1 pull on sigmoid scores") {
  const Tensor scores({1, 3}, {0.5, -0.2, 1.5});
  const Tensor x({1, 3}, {1.0, 1.0, 1.0});
  auto score_grad = [&](double l1) {
    Tape tape;
    NodeId sid = tape.leaf(scores, true);
    NodeId masked = tape.hard_topk_select(sid, tape.constant(x), 2, 1, l1);
    tape.backward(tape.sum(masked));
    return tape.grad(sid);
  };
  const auto base = score_grad(0.0);
  const auto with_l1 = score_grad(0.7);
  for (std::size_t i = 0; i < 3; ++i) {
    const double sig = 1.0 / (1.0 + std::exp(-scores[i]));
    CHECK(with_l1[i] - base[i] == doctest::Approx(0.7 * sig * (1 - sig)).epsilon(1e-12));
  }
}

TEST_CASE("gradient direction tracks unit usefulness on a 3-unit toy") {
  // the loss is 5x more sensitive to unit 2 than unit 0; the score gradient
  // magnitude must order the same way
  const Tensor scores({1, 3}, {0.1, 0.1, 0.1});
  const Tensor x({1, 3}, {1.0, 1.0, 1.0});
  Tape tape;
  NodeId sid = tape.leaf(scores, true);
  NodeId masked = tape.hard_topk_select(sid, tape.constant(x), 3, 1, 0.0);
  NodeId loss = tape.sum(tape.mul(masked, tape.constant(Tensor({1, 3}, {1.0, 2.0, 5.0}))));
  tape.backward(loss);
  const auto g = tape.grad(sid);
  CHECK(std::abs(g[2]) > std::abs(g[1]));
  CHECK(std::abs(g[1]) > std::abs(g[0]));
}

TEST_CASE("topk_indices matches a sort oracle and breaks ties low") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    const std::size_t m = rng.below(n + 1);
    std::vector<double> scores(n);
    for (double& s : scores) s = rng.uniform(-1, 1);
    if (trial % 3 == 0) {
      // inject ties
      for (std::size_t i = 0; i + 1 < n; i += 2) scores[i + 1] = scores[i];
    }
    auto got = topk_indices(scores, m);
    REQUIRE(got.size() == m);
    CHECK(std::is_sorted(got.begin(), got.end()));
    // oracle: stable sort by (-score, index)
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(m);
    std::sort(order.begin(), order.end());
    CHECK(got == order);
  }
  CHECK(topk_indices(std::vector<double>{0.1, 0.9, 0.5}, 2) ==
        std::vector<std::size_t>{1, 2});
  CHECK(topk_indices(std::vector<double>{1.0, 1.0, 1.0, 1.0}, 3) ==
        std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(topk_indices(std::vector<double>{1.0}, 2), ContractError);
}

TEST_CASE("composite graphs agree with finite differences over ten seeds") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const Tensor x = nudge_off_kinks(random_tensor({2, 6}, rng), 1e-3);
    const Tensor w1 = random_tensor({6, 5}, rng);
    const Tensor w2 = random_tensor({5, 3}, rng);
    const double err = grad_check(
        [&](Tape& t, NodeId id) {
          NodeId h = t.relu(t.matmul(id, t.constant(w1)));
          NodeId o = t.matmul(h, t.constant(w2));
          return t.softmax_cross_entropy(o, {2, 0});
        },
        x, 1e-6);
    CHECK(err < 1e-5);
  }
}
