#pragma once
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dms/checkpoint.hpp"
#include "dms/data.hpp"
#include "dms/error.hpp"
#include "dms/network.hpp"
#include "dms/resource.hpp"

namespace dms {

// Divergence (non-finite loss) and target misses exit differently from plain
// validation failures.
struct Divergence : Error {
  explicit Divergence(const std::string& msg) : Error(msg) {}
};

enum class Pipeline { np, p, p_minus };
enum class TrainPhase { joint, width_only, weights_only, structure_only };

struct Hyperparams {
  double lambda_resource = 1.0;
  double lr_structure = 5e-3;
  double lr_weights = 1e-3;
  double decay = 0.99;
  int search_epochs = 10;
  int width_only_epochs = 2;
  int retrain_epochs = 100;
  int batch_size = 128;
  uint64_t seed = 0;

  void validate() const;
};

struct PipelineConfig {
  Pipeline pipeline = Pipeline::np;
  ModelSpec model;
  TaskSpec task;
  ResourceKind resource_kind = ResourceKind::macs;
  double target_fraction = 0.0;  // exactly one of fraction / value set
  double target_value = 0.0;
  Hyperparams hp;
  std::string pretrained;      // checkpoint path, required for p and p-
  bool rank_normalize = true;  // identity normalization is the ablation
  LatencyModel latency;        // fitted model, required for the latency kind

  void validate() const;
  double resolve_target(double r_supernet) const;
};

struct EpochMetrics {
  int epoch = 0;
  std::string phase;
  double task_loss = 0.0;
  double resource_loss = 0.0;
  double r_c = 0.0;
  double r_t = 0.0;
  std::vector<std::pair<std::string, double>> a_values;
};

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN for regression
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr) : lr_(lr) {}

  void step(const std::vector<Param*>& params, const Gradients& grads);

  OptimizerState state() const;
  void restore(const OptimizerState& s);

 private:
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// a <- clamp(a - lr * (g_task + lambda * g_resource)); plain descent, no
// momentum. Non-finite gradients skip the step and log an event.
void structure_step(TopkOperator& op, double g_task, double g_resource, const Hyperparams& hp,
                    std::vector<std::string>* events = nullptr);

// Mutable state threaded through the epochs of one run.
struct SearchContext {
  Network& net;
  const Dataset& data;
  ResourceModel rm;
  Hyperparams hp;
  AdamOptimizer weights;
  std::mt19937_64 rng;
  bool weights_frozen = false;  // pipeline p-
  std::vector<std::string> events;

  SearchContext(Network& n, const Dataset& d, ResourceModel r, const Hyperparams& h)
      : net(n), data(d), rm(std::move(r)), hp(h), weights(h.lr_weights), rng(h.seed) {}
};

EpochMetrics train_epoch(SearchContext& ctx, TrainPhase phase, int epoch, double r_t);

// r_c from the current a values alone (fresh throwaway graph).
double consumption_value(Network& net, const ResourceModel& rm);

// r_t for epoch e of a search run: the schedule spans the epochs before the
// width-only tail, then holds at the final target.
double scheduled_target(int epoch, const Hyperparams& hp, double r_final, double r_supernet);

EvalMetrics evaluate(Network& net, const Tensor& x, const Tensor& y, bool classification,
                     int batch_size, MaskMode mode = MaskMode::plain);

struct RunResult {
  ArchitectureDescription arch;
  std::vector<EpochMetrics> search_trace;
  std::vector<EpochMetrics> retrain_trace;
  EvalMetrics final_eval;
  double r_supernet = 0.0, r_final = 0.0;
  double final_r_c = 0.0;         // continuous, end of search
  double exported_resource = 0.0; // counted (fitted for latency)
  bool target_reached = false;
  double soft_loss = 0.0, discrete_loss = 0.0;  // held-out consistency probe
  Network supernet;     // final search state
  Network final_model;  // exported discrete model (retrained for np / p)
  SearchState final_state;
  std::vector<std::string> events;
};

using EpochSink = std::function<void(const EpochMetrics&)>;

RunResult run_pipeline(const PipelineConfig& cfg, const EpochSink& on_epoch = {});

struct RetrainResult {
  Network model;
  std::vector<EpochMetrics> trace;
  EvalMetrics eval;
};

// Fresh seeded init of the described architecture, full training run,
// held-out evaluation.
RetrainResult retrain(const ModelSpec& spec, const ArchitectureDescription& desc,
                      const Dataset& data, const Hyperparams& hp, uint64_t seed);

// Single global width/depth multiplier, bisected until the counted resource
// lands within 2% of the budget. Retained indices are the lowest.
ArchitectureDescription uniform_baseline(const ModelSpec& spec, double budget, ResourceKind kind);

struct GradcheckReport {
  double max_primitive = 0.0;
  double max_composite = 0.0;
};

// The finite-difference suite behind the gradcheck command: every primitive,
// plus the composite a -> soft mask -> forward -> total loss path.
GradcheckReport gradcheck_suite(int seeds);

Pipeline pipeline_from_string(const std::string& s);
std::string to_string(Pipeline p);
std::string to_string(TrainPhase p);

uint64_t mix_seed(uint64_t seed, uint64_t salt);

}  // namespace dms
