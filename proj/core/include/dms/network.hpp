#pragma once
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dms/graph.hpp"
#include "dms/tensor.hpp"
#include "dms/topk.hpp"

namespace dms {

// ---- declarative model description ----------------------------------------

struct LinearSpec {
  int out_features = 0;
  bool relu = false;
  std::string width_slot;  // "" = fixed output width
  int min_width = 0;
  int step = 1;
};

// Stage of residual blocks x <- x + f(m_C * x) * m_L, each f a two-layer MLP
// on the stage dimension. A hidden slot is shared by every block in the stage.
struct StageSpec {
  int blocks = 0;
  int hidden = 0;
  std::string depth_slot;   // "" = fixed depth
  std::string hidden_slot;  // "" = fixed hidden width
  int min_blocks = 0;
  int min_hidden = 0;
  int hidden_step = 1;
};

// Multi-head self attention over (batch, seq, embed) with searchable head
// count and qk/v head dims, masked as Q' = Q*m_qk*m_head etc.
struct AttentionSpec {
  int heads = 0;
  int head_dim = 0;   // q/k dim per head
  int v_dim = 0;      // 0 = same as head_dim
  int score_dim = 0;  // dim under the 1/sqrt(D) score scale; 0 = head_dim.
                      // Pruned specs keep the supernet value so the searched
                      // attention function is preserved.
  std::string head_slot;
  std::string qk_slot;
  std::string v_slot;
  int min_heads = 0;
};

struct LayerSpec {
  enum class Kind { linear, stage, attention };
  Kind kind = Kind::linear;
  std::string name;
  LinearSpec linear;
  StageSpec stage;
  AttentionSpec attention;
};

struct ModelSpec {
  int input_dim = 0;
  std::string input_slot;  // "" = input features not searchable
  int input_min = 0;
  int input_step = 1;
  int seq_len = 1;  // > 1 feeds (batch, seq, features) through the layers
  // importance metric for every operator: taylor (moving average) or the
  // static index metric
  ImportanceMetric metric = ImportanceMetric::taylor;
  std::vector<LayerSpec> layers;
  // dependency groups: slots listed together share one operator
  std::vector<std::vector<std::string>> groups;

  int output_dim() const;
};

// ---- searchable / discrete model ------------------------------------------

struct Param {
  std::string name;
  Tensor value;
  Tensor bound;  // graph handle from the most recent forward
};

struct LinearState {
  std::string name;
  bool relu = false;
  Param weight, bias;  // weight (out, in)
  int in_op = -1, out_op = -1;
};

struct StageState {
  std::string name;
  int dim = 0, hidden = 0;
  struct Block {
    Param w1, b1, w2, b2;
  };
  std::vector<Block> blocks;
  int in_op = -1, hidden_op = -1, depth_op = -1;
};

struct AttentionState {
  std::string name;
  int embed = 0, heads = 0, qk_dim = 0, v_dim = 0;
  double score_scale = 0.0;
  Param wq, bq, wk, bk, wv, bv, wo, bo;
  int in_op = -1, head_op = -1, qk_op = -1, v_op = -1;
};

using LayerState = std::variant<LinearState, StageState, AttentionState>;

enum class MaskMode {
  soft,      // differentiable topk masks
  identity,  // exact 1.0 masks (mask-identity equivalence checks)
  plain,     // no mask nodes at all (discrete models, pretraining)
};

struct ForwardTrace {
  Tensor output;
  std::vector<TopkMask> masks;  // aligned with Network::ops; empty in plain mode
};

class Network {
 public:
  ModelSpec spec;
  std::vector<TopkOperator> ops;
  std::vector<LayerState> layers;
  std::vector<int> input_selection;  // discrete models: retained input coords
  int input_op = -1;
  bool rank_normalize = true;

  ForwardTrace forward(Graph& g, const Tensor& x, MaskMode mode = MaskMode::soft);

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  TopkOperator* find_op(const std::string& name);
};

// Builds the supernet: one operator per searchable slot (shared within
// dependency groups), seeded scaled-uniform fan-in weight init.
Network build_supernet(const ModelSpec& spec, uint64_t seed);

// The operators the spec's searchable slots map onto (group-merged), in
// creation order, with fresh default state.
std::vector<TopkOperator> model_operators(const ModelSpec& spec);

// ---- export ----------------------------------------------------------------

struct ArchEntry {
  std::string name;  // operator name
  int n_max = 0;
  int k = 0;
  std::vector<int> retained;  // ascending element indices
};

struct ArchitectureDescription {
  std::vector<ArchEntry> entries;
  std::string source;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> final_a;

  const ArchEntry* find(const std::string& name) const;
};

ArchitectureDescription describe_architecture(const Network& net, const std::string& source);
// All operators fully retained (the supernet itself).
ArchitectureDescription full_architecture(const ModelSpec& spec);

// Spec of the discrete model a description pins down: sizes reduced, slots cleared.
ModelSpec pruned_spec(const ModelSpec& spec, const ArchitectureDescription& desc);

// (description, discrete model): retained weight slices copied, dropped
// residual blocks removed, no operators left.
std::pair<ArchitectureDescription, Network> export_pruned(const Network& net,
                                                          const std::string& source = "");

// Discrete model with fresh seeded init (retraining).
Network build_discrete(const ModelSpec& spec, const ArchitectureDescription& desc, uint64_t seed);

enum class ResourceKind { macs, params, latency };

// Exact per-sample count over retained sizes; latency is measured, not counted.
double count_discrete_resource(const ModelSpec& spec, const ArchitectureDescription& desc,
                               ResourceKind kind);

ResourceKind resource_kind_from_string(const std::string& s);
std::string to_string(ResourceKind kind);

}  // namespace dms
