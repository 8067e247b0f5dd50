#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <random>

#include "dms/error.hpp"
#include "dms/gradcheck.hpp"
#include "dms/topk.hpp"
#include "doctest.h"

using namespace dms;

namespace {

// O(U^2) pairwise indicator count, the normalization as literally defined.
std::vector<double> pairwise_rank_oracle(const std::vector<double>& c) {
  size_t u = c.size();
  std::vector<double> out(u, 0.0);
  for (size_t i = 0; i < u; ++i) {
    int count = 0;
    for (size_t j = 0; j < u; ++j) {
      if (c[i] > c[j]) ++count;
      else if (c[i] == c[j] && j < i) ++count;  // lower index counts as smaller
    }
    out[i] = static_cast<double>(count) / static_cast<double>(u);
  }
  return out;
}

TopkOperator width_op(int n, double a, uint64_t seed) {
  TopkOperator op = make_topk("t", n, DimensionKind::width);
  op.a = a;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (double& c : op.importance) c = dist(rng);
  return op;
}

}  // namespace

TEST_CASE("normalization matches the pairwise oracle") {
  std::vector<double> c{0.3, 0.1, 0.5};
  auto got = normalize_importance(c);
  auto want = pairwise_rank_oracle(c);
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
  CHECK(got[0] == doctest::Approx(1.0 / 3));
  CHECK(got[1] == 0.0);
  CHECK(got[2] == doctest::Approx(2.0 / 3));
}

TEST_CASE("normalization of a strictly increasing sequence is rank = index") {
  std::vector<double> c;
  for (int i = 0; i < 17; ++i) c.push_back(0.5 * i - 3.0);
  auto got = normalize_importance(c);
  for (int i = 0; i < 17; ++i) CHECK(got[static_cast<size_t>(i)] == doctest::Approx(i / 17.0));
}

TEST_CASE("ties break by lower index") {
  std::vector<double> c{1, 1, 2};
  auto got = normalize_importance(c);
  auto want = pairwise_rank_oracle(c);
  for (size_t i = 0; i < 3; ++i) CHECK(got[i] == want[i]);
  CHECK(got[0] == 0.0);
  CHECK(got[1] == doctest::Approx(1.0 / 3));
  CHECK(got[2] == doctest::Approx(2.0 / 3));
}

TEST_CASE("normalization matches pairwise oracle on random draws") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-5, 5);
  std::uniform_int_distribution<int> repeats(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    size_t u = 1 + rng() % 40;
    std::vector<double> c(u);
    for (double& v : c) v = dist(rng);
    // inject some exact ties
    for (int r = repeats(rng); r > 0 && u > 1; --r) c[rng() % u] = c[rng() % u];
    auto got = normalize_importance(c);
    auto want = pairwise_rank_oracle(c);
    for (size_t i = 0; i < u; ++i) CHECK(got[i] == want[i]);
  }
}

TEST_CASE("normalization output is a permutation of the even grid") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> dist(-1, 1);
  std::vector<double> c(31);
  for (double& v : c) v = dist(rng);
  auto got = normalize_importance(c);
  std::sort(got.begin(), got.end());
  for (int i = 0; i < 31; ++i) CHECK(got[static_cast<size_t>(i)] == i / 31.0);
}

TEST_CASE("empty importance is rejected") {
  CHECK_THROWS_AS(normalize_importance(std::vector<double>{}), Error);
}

TEST_CASE("mask is 0.5 where normalized importance equals a") {
  TopkOperator op = width_op(100, 0.0, 1);
  // unit with rank 0 has c' = 0 = a
  size_t lowest = 0;
  for (size_t i = 0; i < op.importance.size(); ++i)
    if (op.importance[i] < op.importance[lowest]) lowest = i;
  auto m = soft_mask_units(op);
  CHECK(m[lowest] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("mask three grid steps from a is within 0.05 of hard") {
  // sigma(3) ~ 0.9526: rounding error 0.0474 < 0.05
  TopkOperator op = make_topk("t", 100, DimensionKind::width);
  op.metric = ImportanceMetric::taylor;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> dist(0, 1);
  for (double& c : op.importance) c = dist(rng);
  op.a = 0.31;
  auto cprime = effective_importance(op);
  auto m = soft_mask_units(op);
  for (size_t i = 0; i < m.size(); ++i) {
    if (std::abs(cprime[i] - op.a) > 3.0 / 100) {
      CHECK(std::abs(m[i] - std::round(m[i])) < 0.05);
    }
  }
  // and the sigmoid value itself at +3/U from a
  double s3 = 1.0 / (1.0 + std::exp(-3.0));
  CHECK(s3 == doctest::Approx(0.9526).epsilon(1e-3));
}

TEST_CASE("a = 0 keeps every mask at or above one half") {
  TopkOperator op = width_op(64, 0.0, 4);
  for (double m : soft_mask(op)) CHECK(m >= 0.5);
}

TEST_CASE("mask gradient closed form") {
  std::vector<double> mask{0.5};
  auto g = mask_grad_wrt_a(mask, 100.0);
  CHECK(g[0] == doctest::Approx(-25.0));
  std::vector<double> saturated{1e-12, 1.0 - 1e-12};
  auto gs = mask_grad_wrt_a(saturated, 100.0);
  CHECK(std::abs(gs[0]) < 1e-9);
  CHECK(std::abs(gs[1]) < 1e-9);
}

TEST_CASE("autodiff through the mask path agrees with the closed form and finite differences") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> dist(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    TopkOperator op = make_topk("t", 16, DimensionKind::width);
    for (double& c : op.importance) c = dist(rng);
    op.a = 0.1 + 0.8 * dist(rng);
    std::vector<double> w(16);
    for (double& v : w) v = dist(rng) - 0.5;

    // autodiff gradient of sum(w * m) wrt a
    Graph g;
    TopkMask tm = build_mask(g, op);
    Tensor weighted = g.mul(tm.mask, g.constant(Tensor({16}, w)));
    Tensor loss = g.sum(weighted);
    double auto_grad = g.backward(loss).wrt(tm.a).values[0];

    // closed form: sum_i w_i * (-lambda (1-m_i) m_i)
    auto m = soft_mask(op);
    auto dm = mask_grad_wrt_a(m, op.lambda);
    double closed = 0;
    for (int i = 0; i < 16; ++i) closed += w[static_cast<size_t>(i)] * dm[static_cast<size_t>(i)];
    CHECK(std::abs(auto_grad - closed) / std::max({1.0, std::abs(auto_grad), std::abs(closed)}) <
          1e-6);

    // and against central differences through the whole path
    double err = grad_check(
        [&](Graph& gg, const Tensor& at) {
          std::vector<double> cprime = effective_importance(op);
          Tensor cp = gg.constant(Tensor({16}, cprime));
          Tensor mask = gg.sigmoid(gg.scale(gg.sub(cp, at), op.lambda));
          return gg.sum(gg.mul(mask, gg.constant(Tensor({16}, w))));
        },
        Tensor::scalar(op.a), 1e-6);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("taylor importance update follows the moving average") {
  TopkOperator op = make_topk("t", 4, DimensionKind::width);
  std::vector<double> mask{1, 1, 1, 1};
  std::vector<double> grad{1, 1, 1, 1};
  update_importance(op, mask, grad);
  for (double c : op.importance) CHECK(c == doctest::Approx(0.01).epsilon(1e-12));

  // zero gradient decays geometrically
  std::vector<double> zero{0, 0, 0, 0};
  double before = op.importance[0];
  for (int t = 0; t < 7; ++t) update_importance(op, mask, zero);
  CHECK(op.importance[0] == doctest::Approx(before * std::pow(0.99, 7)).epsilon(1e-12));
}

TEST_CASE("constant squared signal converges to its fixed point") {
  TopkOperator op = make_topk("t", 1, DimensionKind::width);
  std::vector<double> mask{0.8};
  std::vector<double> grad{0.5};
  double s = 0.8 * 0.5;
  for (int t = 0; t < 4000; ++t) update_importance(op, mask, grad);
  CHECK(op.importance[0] == doctest::Approx(s * s).epsilon(1e-8));
}

TEST_CASE("importance update under the index metric is rejected") {
  TopkOperator op = make_topk("t", 4, DimensionKind::width, 1, 0, ImportanceMetric::index);
  std::vector<double> v{1, 1, 1, 1};
  CHECK_THROWS_AS(update_importance(op, v, v), Error);
  // and index importance strictly decreases with unit index
  for (size_t i = 1; i < op.importance.size(); ++i)
    CHECK(op.importance[i] < op.importance[i - 1]);
}

TEST_CASE("element count follows round-then-clamp") {
  TopkOperator op = make_topk("t", 100, DimensionKind::width);
  op.a = 0.25;
  CHECK(element_count(op) == 75);
  op.a = 0.0;
  CHECK(element_count(op) == 100);

  TopkOperator small = make_topk("s", 10, DimensionKind::width);
  small.a = 0.99;
  CHECK(element_count(small) == 1);  // round(0.1) = 0, clamped up
}

TEST_CASE("element count snaps down to group multiples") {
  TopkOperator op = make_topk("t", 64, DimensionKind::width, 8);
  op.a = 0.3;  // round(44.8) = 45 -> snap to 40
  CHECK(element_count(op) == 40);
  op.a = 0.999;
  CHECK(element_count(op) == 8);  // one unit floor
}

TEST_CASE("group masks replicate unit values") {
  TopkOperator op = make_topk("t", 10, DimensionKind::width, 4);
  CHECK(op.units() == 3);
  op.importance = {0.2, 0.9, 0.5};
  op.a = 0.4;
  auto m = soft_mask(op);
  REQUIRE(m.size() == 10);
  auto mu = soft_mask_units(op);
  for (int i = 0; i < 10; ++i) CHECK(m[static_cast<size_t>(i)] == mu[static_cast<size_t>(i / 4)]);

  Graph g;
  TopkMask tm = build_mask(g, op);
  REQUIRE(tm.mask.shape == Shape{10});
  for (int i = 0; i < 10; ++i) CHECK(tm.mask.values[static_cast<size_t>(i)] == m[static_cast<size_t>(i)]);
}

TEST_CASE("rank invariance under strictly increasing transforms") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> dist(0.1, 2.0);
  TopkOperator op = make_topk("t", 24, DimensionKind::width);
  for (double& c : op.importance) c = dist(rng);
  op.a = 0.4;

  auto base_norm = effective_importance(op);
  auto base_mask = soft_mask(op);
  int base_k = element_count(op);
  auto base_units = retained_units(op);

  TopkOperator warped = op;
  for (double& c : warped.importance) c = std::exp(3.0 * c) - 7.0;  // strictly increasing
  auto w_norm = effective_importance(warped);
  auto w_mask = soft_mask(warped);

  for (size_t i = 0; i < base_norm.size(); ++i) {
    CHECK(w_norm[i] == base_norm[i]);
    CHECK(w_mask[i] == base_mask[i]);
  }
  CHECK(element_count(warped) == base_k);
  CHECK(retained_units(warped) == base_units);
}

TEST_CASE("increasing a never increases any mask value") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> dist(0, 1);
  TopkOperator op = make_topk("t", 40, DimensionKind::width);
  for (double& c : op.importance) c = dist(rng);
  std::vector<double> prev;
  for (double a = 0.0; a <= 1.0; a += 0.05) {
    op.a = a;
    auto m = soft_mask(op);
    if (!prev.empty())
      for (size_t i = 0; i < m.size(); ++i) CHECK(m[i] <= prev[i]);
    prev = m;
  }
}

TEST_CASE("polarization: at most six fuzzy units for lambda = U") {
  std::mt19937_64 rng(123);
  std::uniform_real_distribution<double> dist(0, 1);
  for (int u : {16, 100, 512}) {
    TopkOperator op = make_topk("t", u, DimensionKind::width);
    for (int draw = 0; draw < 1000; ++draw) {
      for (double& c : op.importance) c = dist(rng);
      op.a = dist(rng);
      auto m = soft_mask_units(op);
      int fuzzy = 0;
      for (double v : m)
        if (v > 0.05 && v < 0.95) ++fuzzy;
      CHECK(fuzzy <= 6);
    }
  }
}

TEST_CASE("depth operators use lambda = 4U") {
  TopkOperator d = make_topk("d", 8, DimensionKind::depth);
  CHECK(d.lambda == 32.0);
  TopkOperator h = make_topk("h", 6, DimensionKind::head_count);
  CHECK(h.lambda == 24.0);
  TopkOperator w = make_topk("w", 8, DimensionKind::width);
  CHECK(w.lambda == 8.0);
}

TEST_CASE("declared minimum size tightens the a range") {
  TopkOperator op = make_topk("t", 64, DimensionKind::width, 1, 16);
  CHECK(op.a_max == doctest::Approx(0.75));
  CHECK(op.a_min == 0.0);
}

TEST_CASE("crossings per step: rank normalization is steady, raw importance is bursty") {
  // exponentially spaced raw importance
  std::vector<double> c(64);
  for (int i = 0; i < 64; ++i) c[static_cast<size_t>(i)] = std::pow(10.0, -6.0 + 6.0 * i / 63.0);
  auto normalized = crossings_per_step(c, true, 1.0 / 16);
  auto raw = crossings_per_step(c, false, 1.0 / 16);
  int max_norm = *std::max_element(normalized.begin(), normalized.end());
  int min_norm = *std::min_element(normalized.begin(), normalized.end());
  int max_raw = *std::max_element(raw.begin(), raw.end());
  // even spacing: every step crosses the same count
  CHECK(max_norm - min_norm <= 1);
  // raw scale dumps most thresholds into a few steps
  CHECK(max_raw >= 4 * max_norm);
}

TEST_CASE("retained units keep the top importance with index tie-break") {
  TopkOperator op = make_topk("t", 6, DimensionKind::width);
  op.importance = {0.1, 0.9, 0.9, 0.05, 0.7, 0.2};
  op.a = 0.5;  // round(3) = 3 retained
  auto units = retained_units(op);
  CHECK(units == std::vector<int>{1, 2, 4});
  auto elems = retained_elements(op);
  CHECK(elems == std::vector<int>{1, 2, 4});
}
