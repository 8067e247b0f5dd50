#pragma once
#include <span>
#include <string>
#include <vector>

#include "dms/graph.hpp"
#include "dms/tensor.hpp"

namespace dms {

enum class ImportanceMetric { taylor, index };

// Dimension kinds the operator can gate. The polarization temperature rule
// differs: width uses lambda = U, depth and head count use lambda = 4U.
enum class DimensionKind { width, depth, head_count };

// The differentiable top-k operator: one learnable pruning ratio `a` over N
// elements grouped into units of `group_size`, plus a per-unit importance
// accumulator. a = 0 keeps everything, a = 1 prunes everything (subject to
// the one-unit floor).
struct TopkOperator {
  std::string name;
  int n = 0;
  int group_size = 1;
  DimensionKind kind = DimensionKind::width;
  ImportanceMetric metric = ImportanceMetric::taylor;
  double a = 0.0;
  double a_min = 0.0;
  double a_max = 1.0;
  double lambda = 0.0;
  double decay = 0.99;
  bool rank_normalize = true;  // identity normalization is the ablation path
  std::vector<double> importance;  // one entry per unit

  int units() const { return (n + group_size - 1) / group_size; }
};

// min_elements > 0 declares a floor on the searchable size; it tightens a_max
// to 1 - min/N so the search range stays [min, N].
TopkOperator make_topk(std::string name, int n, DimensionKind kind, int group_size = 1,
                       int min_elements = 0,
                       ImportanceMetric metric = ImportanceMetric::taylor);

// Rank normalization: maps importance to the evenly spaced values
// {0, 1/U, ..., (U-1)/U}, ties broken by lower index counting as smaller.
std::vector<double> normalize_importance(std::span<const double> importance);

// Normalized importance as the operator's mask generation sees it: rank
// normalization, or the raw values under the identity ablation.
std::vector<double> effective_importance(const TopkOperator& op);

// Soft mask values per unit, m_i = sigmoid(lambda * (c'_i - a)).
std::vector<double> soft_mask_units(const TopkOperator& op);
// Per-element mask: unit mask replicated group_size times, truncated to N.
std::vector<double> soft_mask(const TopkOperator& op);

// d m_i / d a = -lambda * (1 - m_i) * m_i.
std::vector<double> mask_grad_wrt_a(std::span<const double> mask, double lambda);

// In-graph handles for one forward pass of an operator.
struct TopkMask {
  Tensor a;          // scalar leaf, shape (1,)
  Tensor unit_mask;  // shape (U,)
  Tensor mask;       // shape (N,)
};

// Builds the differentiable mask path on g. The normalized importance enters
// as a constant: only `a` carries structural gradient.
TopkMask build_mask(Graph& g, const TopkOperator& op);

// Taylor moving average, c_i <- c_i * decay + (m_i * g_i)^2 * (1 - decay),
// where g_i is the task-loss gradient of the unit mask.
void update_importance(TopkOperator& op, std::span<const double> unit_mask,
                       std::span<const double> unit_mask_grad);

// Retained element count k = round((1-a) * N), snapped down to a multiple of
// group_size and clamped so at least one unit survives.
int element_count(const TopkOperator& op);
// Units (ascending index) with top-k importance, ties kept by lower index.
std::vector<int> retained_units(const TopkOperator& op);
std::vector<int> retained_elements(const TopkOperator& op);

// Diagnostic for the normalization ablation: how many thresholds a fixed-size
// step of `a` crosses at each step across [0,1]. Rank normalization keeps
// this near-constant; raw importance makes it bursty.
std::vector<int> crossings_per_step(std::span<const double> importance, bool rank_normalized,
                                    double step);

}  // namespace dms
