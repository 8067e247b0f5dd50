#include "dms/topk.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <numeric>

#include "dms/error.hpp"

namespace dms {

TopkOperator make_topk(std::string name, int n, DimensionKind kind, int group_size,
                       int min_elements, ImportanceMetric metric) {
  require(n > 0, "topk operator '" + name + "' needs a positive element count");
  require(group_size > 0 && group_size <= n,
          "topk operator '" + name + "': group size must be in [1, N]");
  require(min_elements >= 0 && min_elements <= n,
          "topk operator '" + name + "': minimum size must be in [0, N]");
  TopkOperator op;
  op.name = std::move(name);
  op.n = n;
  op.group_size = group_size;
  op.kind = kind;
  op.metric = metric;
  op.a_min = 0.0;
  op.a_max = min_elements > 0 ? 1.0 - static_cast<double>(min_elements) / n : 1.0;
  int units = op.units();
  op.lambda = (kind == DimensionKind::width) ? units : 4.0 * units;
  if (metric == ImportanceMetric::index) {
    // static importance, strictly decreasing with unit index
    op.importance.resize(units);
    for (int i = 0; i < units; ++i) op.importance[i] = static_cast<double>(units - i);
  } else {
    op.importance.assign(units, 0.0);
  }
  return op;
}

std::vector<double> normalize_importance(std::span<const double> importance) {
  require(!importance.empty(), "importance normalization needs a non-empty sequence");
  for (double c : importance)
    require(std::isfinite(c), "importance normalization needs finite values");
  size_t u = importance.size();
  std::vector<int> order(u);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (importance[i] != importance[j]) return importance[i] < importance[j];
    return i < j;  // lower index counts as smaller
  });
  std::vector<double> out(u);
  for (size_t rank = 0; rank < u; ++rank)
    out[static_cast<size_t>(order[rank])] = static_cast<double>(rank) / static_cast<double>(u);
  return out;
}

std::vector<double> effective_importance(const TopkOperator& op) {
  if (op.rank_normalize) return normalize_importance(op.importance);
  return op.importance;
}

static double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> soft_mask_units(const TopkOperator& op) {
  std::vector<double> c = effective_importance(op);
  std::vector<double> m(c.size());
  for (size_t i = 0; i < c.size(); ++i) m[i] = stable_sigmoid(op.lambda * (c[i] - op.a));
  return m;
}

std::vector<double> soft_mask(const TopkOperator& op) {
  std::vector<double> units = soft_mask_units(op);
  std::vector<double> m(static_cast<size_t>(op.n));
  for (int i = 0; i < op.n; ++i) m[static_cast<size_t>(i)] = units[static_cast<size_t>(i / op.group_size)];
  return m;
}

std::vector<double> mask_grad_wrt_a(std::span<const double> mask, double lambda) {
  std::vector<double> g(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) g[i] = -lambda * (1.0 - mask[i]) * mask[i];
  return g;
}

TopkMask build_mask(Graph& g, const TopkOperator& op) {
  require(op.a >= op.a_min && op.a <= op.a_max,
          "topk operator '" + op.name + "': a=" + std::to_string(op.a) + " outside [" +
              std::to_string(op.a_min) + "," + std::to_string(op.a_max) + "]");
  TopkMask out;
  out.a = g.leaf(Tensor::scalar(op.a));
  std::vector<double> c = effective_importance(op);
  Tensor cprime = g.constant(Tensor({op.units()}, c));
  Tensor arg = g.scale(g.sub(cprime, out.a), op.lambda);
  out.unit_mask = g.sigmoid(arg);
  if (op.group_size == 1) {
    out.mask = out.unit_mask;
  } else {
    int u = op.units();
    Tensor col = g.reshape(out.unit_mask, {u, 1});
    Tensor ones = g.constant(Tensor::full({1, op.group_size}, 1.0));
    Tensor tiled = g.reshape(g.mul(col, ones), {u * op.group_size});
    out.mask = (u * op.group_size == op.n) ? tiled : g.slice(tiled, 0, 0, op.n);
  }
  return out;
}

void update_importance(TopkOperator& op, std::span<const double> unit_mask,
                       std::span<const double> unit_mask_grad) {
  require(op.metric == ImportanceMetric::taylor,
          "importance update is only defined for the taylor metric; '" + op.name +
              "' uses a static metric");
  require(unit_mask.size() == op.importance.size() && unit_mask_grad.size() == op.importance.size(),
          "importance update length mismatch for operator '" + op.name + "'");
  for (size_t i = 0; i < op.importance.size(); ++i) {
    double mg = unit_mask[i] * unit_mask_grad[i];
    op.importance[i] = op.importance[i] * op.decay + mg * mg * (1.0 - op.decay);
  }
}

static int round_half_even(double x) {
  std::fesetround(FE_TONEAREST);
  return static_cast<int>(std::nearbyint(x));
}

int element_count(const TopkOperator& op) {
  int k = round_half_even((1.0 - op.a) * op.n);
  k -= k % op.group_size;
  int floor_k = std::min(op.group_size, op.n);
  return std::clamp(k, floor_k, op.n);
}

std::vector<int> retained_units(const TopkOperator& op) {
  int k = element_count(op);
  int u = op.units();
  int keep_units = std::min(u, (k + op.group_size - 1) / op.group_size);
  std::vector<int> order(static_cast<size_t>(u));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (op.importance[static_cast<size_t>(i)] != op.importance[static_cast<size_t>(j)])
      return op.importance[static_cast<size_t>(i)] > op.importance[static_cast<size_t>(j)];
    return i < j;  // ties keep the lower index
  });
  order.resize(static_cast<size_t>(keep_units));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<int> retained_elements(const TopkOperator& op) {
  std::vector<int> out;
  for (int unit : retained_units(op))
    for (int e = unit * op.group_size; e < std::min((unit + 1) * op.group_size, op.n); ++e)
      out.push_back(e);
  return out;
}

std::vector<int> crossings_per_step(std::span<const double> importance, bool rank_normalized,
                                    double step) {
  require(step > 0.0 && step < 1.0, "crossing diagnostic needs a step in (0,1)");
  std::vector<double> c(importance.begin(), importance.end());
  if (rank_normalized) c = normalize_importance(c);
  std::vector<int> counts;
  for (double a = 0.0; a < 1.0; a += step) {
    double hi = std::min(1.0, a + step);
    int crossed = 0;
    for (double v : c)
      if (v > a && v <= hi) ++crossed;
    counts.push_back(crossed);
  }
  return counts;
}

}  // namespace dms
