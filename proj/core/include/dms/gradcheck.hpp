#pragma once
#include <functional>

#include "dms/graph.hpp"
#include "dms/tensor.hpp"

namespace dms {

// A differentiable scalar map: builds its computation on the supplied graph
// from the (leaf-registered) point and returns the scalar result.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

// Max over coordinates of |g_analytic - g_numeric| / max(1, |g_analytic|, |g_numeric|),
// with g_numeric from central differences of half-width epsilon.
double grad_check(const ScalarFn& fn, const Tensor& point, double epsilon = 1e-5);

}  // namespace dms
