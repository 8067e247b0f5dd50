#pragma once
#include <array>
#include <string>
#include <vector>

#include "dms/network.hpp"

namespace dms {

// Per-layer latency model: latency ~= latency_max * F(a_in, a_out) with
// F = c0 + c1*a_in + c2*a_out + c3*a_in^2 + c4*a_in*a_out + c5*a_out^2,
// normalized so F(0,0) = 1.
struct LatencyFit {
  std::string layer_id;
  double latency_max = 0.0;
  std::array<double, 6> coeffs{};
  double mse = 0.0;
  double r2 = 0.0;

  double eval(double a_in, double a_out) const;
};

struct LatencyModel {
  std::vector<LatencyFit> layers;
  const LatencyFit& at(const std::string& id) const;
};

struct LatencySample {
  std::string layer_id;
  double a_in = 0.0, a_out = 0.0, latency = 0.0;
};

struct LatencyTable {
  std::vector<LatencySample> samples;
};

// Delimited text with header: layer_id, a_in, a_out, latency_seconds.
LatencyTable load_latency_table(const std::string& path);

// Least squares over the six quadratic terms per layer (normal equations).
LatencyModel fit_latency_model(const LatencyTable& table);

struct ResourceModel {
  ResourceKind kind = ResourceKind::macs;
  LatencyModel latency;  // required for the latency kind
};

// Weight-application sites in model order; the ids a LatencyTable must cover.
std::vector<std::string> latency_layer_ids(const ModelSpec& spec);

// Differentiable r_c assembled from the masks bound by the forward pass.
// Retained fractions are (1 - a); depth-gated blocks scale by their soft mask.
Tensor current_consumption(Graph& g, const Network& net, const ForwardTrace& trace,
                           const ResourceModel& rm);

// log(r_c / r_t) while r_c > r_t, else an exact zero with no gradient.
Tensor resource_loss(Graph& g, const Tensor& r_c, double r_t);
double resource_loss_value(double r_c, double r_t);

// r_t = (r_final / r_supernet)^(e / e_max) * r_supernet, exact at both ends.
double target_schedule(int epoch, int epochs, double r_final, double r_supernet);

// Consumption with every a at 0 (the whole supernet).
double supernet_consumption(const ModelSpec& spec, const ResourceModel& rm);

// Consumption of a discrete architecture: exact counts for macs/params,
// fitted-model evaluation at a = 1 - k/N for latency.
double discrete_consumption(const ModelSpec& spec, const ArchitectureDescription& desc,
                            const ResourceModel& rm);

}  // namespace dms
