#include "dms/gradcheck.hpp"

#include <cmath>

#include "dms/error.hpp"

namespace dms {

double grad_check(const ScalarFn& fn, const Tensor& point, double epsilon) {
  require(epsilon > 0.0, "grad_check epsilon must be positive");

  auto eval = [&](const Tensor& p) {
    Graph g;
    Tensor x = g.leaf(p);
    Tensor out = fn(g, x);
    require(out.is_scalar(), "grad_check function must return a scalar");
    double v = out.scalar_value();
    require(std::isfinite(v), "grad_check function evaluated to a non-finite value");
    return v;
  };

  Graph g;
  Tensor x = g.leaf(point);
  Tensor out = fn(g, x);
  require(out.is_scalar(), "grad_check function must return a scalar");
  require(std::isfinite(out.scalar_value()), "grad_check function evaluated to a non-finite value");
  Tensor analytic = g.backward(out).wrt(x);

  double worst = 0.0;
  Tensor probe = point;
  for (size_t i = 0; i < probe.values.size(); ++i) {
    double keep = probe.values[i];
    probe.values[i] = keep + epsilon;
    double hi = eval(probe);
    probe.values[i] = keep - epsilon;
    double lo = eval(probe);
    probe.values[i] = keep;
    double numeric = (hi - lo) / (2.0 * epsilon);
    double ga = analytic.values[i];
    double err = std::abs(ga - numeric) / std::max({1.0, std::abs(ga), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dms
