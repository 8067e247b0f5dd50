#include "dms/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dms/error.hpp"

namespace dms {

namespace {

// One searchable dimension as declared by the spec walk. Slots sharing a name
// (or grouped) collapse onto one operator.
struct SlotUse {
  std::string slot;
  int n = 0;
  DimensionKind kind = DimensionKind::width;
  int group_size = 1;
  int min_elements = 0;
};

struct SlotPlan {
  std::vector<TopkOperator> ops;          // creation order
  std::map<std::string, int> op_of_slot;  // every slot name -> op index
};

void register_slot(std::vector<SlotUse>& uses, const std::string& slot, int n, DimensionKind kind,
                   int group_size, int min_elements) {
  if (slot.empty()) return;
  require(n > 0, "slot '" + slot + "' gates a zero-size dimension");
  for (const SlotUse& u : uses) {
    if (u.slot != slot) continue;
    require(u.n == n && u.kind == kind && u.group_size == group_size &&
                u.min_elements == min_elements,
            "slot '" + slot + "' reused with mismatched declaration (N " + std::to_string(u.n) +
                " vs " + std::to_string(n) + ")");
    return;
  }
  uses.push_back({slot, n, kind, group_size, min_elements});
}

std::vector<SlotUse> walk_slots(const ModelSpec& spec) {
  std::vector<SlotUse> uses;
  register_slot(uses, spec.input_slot, spec.input_dim, DimensionKind::width, spec.input_step,
                spec.input_min);
  for (const LayerSpec& layer : spec.layers) {
    switch (layer.kind) {
      case LayerSpec::Kind::linear:
        register_slot(uses, layer.linear.width_slot, layer.linear.out_features,
                      DimensionKind::width, layer.linear.step, layer.linear.min_width);
        break;
      case LayerSpec::Kind::stage:
        register_slot(uses, layer.stage.hidden_slot, layer.stage.hidden, DimensionKind::width,
                      layer.stage.hidden_step, layer.stage.min_hidden);
        register_slot(uses, layer.stage.depth_slot, layer.stage.blocks, DimensionKind::depth, 1,
                      layer.stage.min_blocks);
        break;
      case LayerSpec::Kind::attention: {
        const AttentionSpec& att = layer.attention;
        register_slot(uses, att.head_slot, att.heads, DimensionKind::head_count, 1, att.min_heads);
        register_slot(uses, att.qk_slot, att.head_dim, DimensionKind::width, 1, 0);
        int vd = att.v_dim > 0 ? att.v_dim : att.head_dim;
        register_slot(uses, att.v_slot, vd, DimensionKind::width, 1, 0);
        break;
      }
    }
  }
  return uses;
}

SlotPlan plan_slots(const ModelSpec& spec) {
  std::vector<SlotUse> uses = walk_slots(spec);
  // map each slot to its group representative (first member)
  std::map<std::string, std::string> rep;
  for (const SlotUse& u : uses) rep[u.slot] = u.slot;
  for (const auto& group : spec.groups) {
    require(!group.empty(), "empty dependency group");
    for (const std::string& member : group) {
      require(rep.count(member), "dependency group names unknown slot '" + member + "'");
      rep[member] = group.front();
    }
  }
  SlotPlan plan;
  std::map<std::string, int> index_of_rep;
  for (const SlotUse& u : uses) {
    const std::string& r = rep.at(u.slot);
    auto it = index_of_rep.find(r);
    if (it == index_of_rep.end()) {
      TopkOperator op = make_topk(r, u.n, u.kind, u.group_size, u.min_elements, spec.metric);
      index_of_rep.emplace(r, static_cast<int>(plan.ops.size()));
      plan.op_of_slot[u.slot] = static_cast<int>(plan.ops.size());
      plan.ops.push_back(std::move(op));
    } else {
      const TopkOperator& existing = plan.ops[static_cast<size_t>(it->second)];
      require(existing.n == u.n, "dependency group '" + r + "' members have mismatched sizes: " +
                                     std::to_string(existing.n) + " vs " + std::to_string(u.n) +
                                     " ('" + u.slot + "')");
      require(existing.kind == u.kind,
              "dependency group '" + r + "' mixes width and depth slots ('" + u.slot + "')");
      plan.op_of_slot[u.slot] = it->second;
    }
  }
  return plan;
}

class ParamInit {
 public:
  explicit ParamInit(uint64_t seed) : rng_(seed) {}

  Param weight(const std::string& name, int out, int in, double gain = 1.0) {
    double bound = gain * std::sqrt(6.0 / in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    Param p;
    p.name = name;
    p.value = Tensor::zeros({out, in});
    for (double& v : p.value.values) v = dist(rng_);
    return p;
  }

  Param bias(const std::string& name, int out) {
    Param p;
    p.name = name;
    p.value = Tensor::zeros({out});
    return p;
  }

 private:
  std::mt19937_64 rng_;
};

int op_or_none(const SlotPlan& plan, const std::string& slot) {
  if (slot.empty()) return -1;
  return plan.op_of_slot.at(slot);
}

Shape ones_shape(int rank, int last) {
  Shape s(static_cast<size_t>(rank), 1);
  s[static_cast<size_t>(rank - 1)] = last;
  return s;
}

Tensor select_last_axis(const Tensor& t, const std::vector<int>& indices) {
  Shape out_shape = t.shape;
  int last = t.shape[static_cast<size_t>(t.rank() - 1)];
  out_shape[static_cast<size_t>(t.rank() - 1)] = static_cast<int>(indices.size());
  Tensor out = Tensor::zeros(out_shape);
  int64_t rows = t.size() / last;
  for (int64_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < indices.size(); ++j)
      out.values[r * static_cast<int64_t>(indices.size()) + static_cast<int64_t>(j)] =
          t.values[r * last + indices[j]];
  return out;
}

}  // namespace

int ModelSpec::output_dim() const {
  require(!layers.empty() && layers.back().kind == LayerSpec::Kind::linear,
          "model must end in a linear head");
  return layers.back().linear.out_features;
}

Network build_supernet(const ModelSpec& spec, uint64_t seed) {
  require(spec.input_dim > 0, "model input dimension must be positive");
  require(spec.seq_len >= 1, "sequence length must be >= 1");
  require(!spec.layers.empty(), "model needs at least one layer");

  Network net;
  net.spec = spec;
  SlotPlan plan = plan_slots(spec);
  net.ops = std::move(plan.ops);
  net.input_op = spec.input_slot.empty() ? -1 : plan.op_of_slot.at(spec.input_slot);

  ParamInit init(seed);
  int cur_dim = spec.input_dim;
  int cur_op = net.input_op;
  int index = 0;
  for (const LayerSpec& layer : spec.layers) {
    std::string name = layer.name.empty() ? "layer" + std::to_string(index) : layer.name;
    switch (layer.kind) {
      case LayerSpec::Kind::linear: {
        const LinearSpec& ls = layer.linear;
        require(ls.out_features > 0, "linear layer '" + name + "' has zero output width");
        LinearState state;
        state.name = name;
        state.relu = ls.relu;
        state.in_op = cur_op;
        state.out_op = op_or_none(plan, ls.width_slot);
        state.weight = init.weight(name + ".weight", ls.out_features, cur_dim);
        state.bias = init.bias(name + ".bias", ls.out_features);
        cur_dim = ls.out_features;
        cur_op = state.out_op;
        net.layers.emplace_back(std::move(state));
        break;
      }
      case LayerSpec::Kind::stage: {
        const StageSpec& ss = layer.stage;
        require(ss.blocks > 0 && ss.hidden > 0,
                "stage '" + name + "' needs positive block count and hidden width");
        StageState state;
        state.name = name;
        state.dim = cur_dim;
        state.hidden = ss.hidden;
        state.in_op = cur_op;
        state.hidden_op = op_or_none(plan, ss.hidden_slot);
        state.depth_op = op_or_none(plan, ss.depth_slot);
        for (int b = 0; b < ss.blocks; ++b) {
          StageState::Block block;
          std::string bn = name + ".b" + std::to_string(b);
          block.w1 = init.weight(bn + ".w1", ss.hidden, cur_dim);
          block.b1 = init.bias(bn + ".b1", ss.hidden);
          // residual branch output starts small so deep stacks train stably
          block.w2 = init.weight(bn + ".w2", cur_dim, ss.hidden, 0.25);
          block.b2 = init.bias(bn + ".b2", cur_dim);
          state.blocks.push_back(std::move(block));
        }
        net.layers.emplace_back(std::move(state));
        break;
      }
      case LayerSpec::Kind::attention: {
        const AttentionSpec& as = layer.attention;
        require(as.heads > 0 && as.head_dim > 0,
                "attention '" + name + "' needs positive head count and head dim");
        AttentionState state;
        state.name = name;
        state.embed = cur_dim;
        state.heads = as.heads;
        state.qk_dim = as.head_dim;
        state.v_dim = as.v_dim > 0 ? as.v_dim : as.head_dim;
        state.score_scale = 1.0 / std::sqrt(as.score_dim > 0 ? as.score_dim : as.head_dim);
        state.in_op = cur_op;
        state.head_op = op_or_none(plan, as.head_slot);
        state.qk_op = op_or_none(plan, as.qk_slot);
        state.v_op = op_or_none(plan, as.v_slot);
        int qk_total = state.heads * state.qk_dim;
        int v_total = state.heads * state.v_dim;
        state.wq = init.weight(name + ".wq", qk_total, cur_dim);
        state.bq = init.bias(name + ".bq", qk_total);
        state.wk = init.weight(name + ".wk", qk_total, cur_dim);
        state.bk = init.bias(name + ".bk", qk_total);
        state.wv = init.weight(name + ".wv", v_total, cur_dim);
        state.bv = init.bias(name + ".bv", v_total);
        state.wo = init.weight(name + ".wo", cur_dim, v_total);
        state.bo = init.bias(name + ".bo", cur_dim);
        // residual block: the embed basis (and its operator) flows through
        net.layers.emplace_back(std::move(state));
        break;
      }
    }
    ++index;
  }
  return net;
}

std::vector<TopkOperator> model_operators(const ModelSpec& spec) {
  return plan_slots(spec).ops;
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (LayerState& layer : layers) {
    if (auto* lin = std::get_if<LinearState>(&layer)) {
      out.push_back(&lin->weight);
      out.push_back(&lin->bias);
    } else if (auto* stage = std::get_if<StageState>(&layer)) {
      for (auto& b : stage->blocks) {
        out.push_back(&b.w1);
        out.push_back(&b.b1);
        out.push_back(&b.w2);
        out.push_back(&b.b2);
      }
    } else if (auto* att = std::get_if<AttentionState>(&layer)) {
      for (Param* p : {&att->wq, &att->bq, &att->wk, &att->bk, &att->wv, &att->bv, &att->wo,
                       &att->bo})
        out.push_back(p);
    }
  }
  return out;
}

std::vector<const Param*> Network::params() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<Network*>(this)->params()) out.push_back(p);
  return out;
}

TopkOperator* Network::find_op(const std::string& name) {
  for (TopkOperator& op : ops)
    if (op.name == name) return &op;
  return nullptr;
}

ForwardTrace Network::forward(Graph& g, const Tensor& x, MaskMode mode) {
  int expected_rank = spec.seq_len > 1 ? 3 : 2;
  require(x.rank() == expected_rank, "model expects input rank " +
                                         std::to_string(expected_rank) + ", got shape " +
                                         shape_str(x.shape));
  if (spec.seq_len > 1)
    require(x.shape[1] == spec.seq_len, "input sequence length mismatch: " + shape_str(x.shape));
  int last = x.shape[static_cast<size_t>(x.rank() - 1)];
  if (input_selection.empty()) {
    require(last == spec.input_dim, "input feature width mismatch: got " + shape_str(x.shape) +
                                        ", expected " + std::to_string(spec.input_dim));
  } else {
    int mx = *std::max_element(input_selection.begin(), input_selection.end());
    require(last > mx, "input too narrow for the retained input coordinates: " + shape_str(x.shape));
  }

  ForwardTrace trace;
  if (mode != MaskMode::plain) {
    for (TopkOperator& op : ops) {
      op.rank_normalize = rank_normalize;
      if (mode == MaskMode::soft) {
        trace.masks.push_back(build_mask(g, op));
      } else {
        TopkMask ones;
        ones.a = g.constant(Tensor::scalar(op.a));
        ones.unit_mask = g.constant(Tensor::full({op.units()}, 1.0));
        ones.mask = g.constant(Tensor::full({op.n}, 1.0));
        trace.masks.push_back(std::move(ones));
      }
    }
  }

  Tensor cur = input_selection.empty() ? x : select_last_axis(x, input_selection);
  cur = g.constant(cur);

  auto apply_mask = [&](const Tensor& t, int op_index) {
    if (op_index < 0 || mode == MaskMode::plain) return t;
    const Tensor& mask = trace.masks[static_cast<size_t>(op_index)].mask;
    return g.mul(t, g.reshape(mask, ones_shape(t.rank(), mask.shape[0])));
  };
  auto bias_add = [&](const Tensor& t, Param& bias) {
    Tensor b = g.leaf(bias.value);
    bias.bound = b;
    return g.add(t, g.reshape(b, ones_shape(t.rank(), bias.value.shape[0])));
  };
  auto bind = [&](Param& p) {
    Tensor t = g.leaf(p.value);
    p.bound = t;
    return t;
  };

  for (LayerState& layer : layers) {
    if (auto* lin = std::get_if<LinearState>(&layer)) {
      Tensor in = apply_mask(cur, lin->in_op);
      Tensor z = bias_add(g.matmul(in, bind(lin->weight), false, true), lin->bias);
      cur = lin->relu ? g.relu(z) : z;
    } else if (auto* stage = std::get_if<StageState>(&layer)) {
      for (size_t j = 0; j < stage->blocks.size(); ++j) {
        auto& blk = stage->blocks[j];
        Tensor bx = apply_mask(cur, stage->in_op);
        Tensor h = g.relu(bias_add(g.matmul(bx, bind(blk.w1), false, true), blk.b1));
        h = apply_mask(h, stage->hidden_op);
        Tensor f = bias_add(g.matmul(h, bind(blk.w2), false, true), blk.b2);
        if (stage->depth_op >= 0 && mode != MaskMode::plain) {
          Tensor dm = g.slice(trace.masks[static_cast<size_t>(stage->depth_op)].unit_mask, 0,
                              static_cast<int>(j), static_cast<int>(j) + 1);
          f = g.mul(f, g.reshape(dm, Shape(static_cast<size_t>(f.rank()), 1)));
        }
        cur = g.add(cur, f);
      }
    } else if (auto* att = std::get_if<AttentionState>(&layer)) {
      require(cur.rank() == 3, "attention layer '" + att->name + "' needs (batch, seq, embed)");
      int batch = cur.shape[0], len = cur.shape[1];
      Tensor in = apply_mask(cur, att->in_op);
      auto heads_view = [&](const Tensor& t, int dim) {
        Tensor r = g.reshape(t, {batch, len, att->heads, dim});
        return g.permute(r, {0, 2, 1, 3});
      };
      Tensor q = heads_view(bias_add(g.matmul(in, bind(att->wq), false, true), att->bq), att->qk_dim);
      Tensor k = heads_view(bias_add(g.matmul(in, bind(att->wk), false, true), att->bk), att->qk_dim);
      Tensor v = heads_view(bias_add(g.matmul(in, bind(att->wv), false, true), att->bv), att->v_dim);
      if (mode != MaskMode::plain) {
        auto unit_mask = [&](int op_index, const Shape& shape) {
          return g.reshape(trace.masks[static_cast<size_t>(op_index)].mask, shape);
        };
        if (att->qk_op >= 0) {
          Tensor mqk = unit_mask(att->qk_op, {1, 1, 1, att->qk_dim});
          q = g.mul(q, mqk);
          k = g.mul(k, mqk);
        }
        if (att->v_op >= 0) v = g.mul(v, unit_mask(att->v_op, {1, 1, 1, att->v_dim}));
        if (att->head_op >= 0) {
          Tensor mh = unit_mask(att->head_op, {1, att->heads, 1, 1});
          q = g.mul(q, mh);
          k = g.mul(k, mh);
          v = g.mul(v, mh);
        }
      }
      Tensor scores = g.scale(g.matmul(q, k, false, true), att->score_scale);
      Tensor ctx = g.matmul(g.softmax(scores), v);  // (B,H,L,Dv)
      Tensor merged = g.reshape(g.permute(ctx, {0, 2, 1, 3}), {batch, len, att->heads * att->v_dim});
      cur = g.add(cur, bias_add(g.matmul(merged, bind(att->wo), false, true), att->bo));
    }
  }
  trace.output = cur;
  return trace;
}

// ---- export -----------------------------------------------------------------

const ArchEntry* ArchitectureDescription::find(const std::string& name) const {
  for (const ArchEntry& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

ArchitectureDescription describe_architecture(const Network& net, const std::string& source) {
  ArchitectureDescription desc;
  desc.source = source;
  for (const TopkOperator& op : net.ops) {
    ArchEntry entry;
    entry.name = op.name;
    entry.n_max = op.n;
    entry.retained = retained_elements(op);
    entry.k = static_cast<int>(entry.retained.size());
    desc.entries.push_back(std::move(entry));
    desc.final_a.emplace_back(op.name, op.a);
  }
  return desc;
}

ArchitectureDescription full_architecture(const ModelSpec& spec) {
  ArchitectureDescription desc;
  desc.source = "supernet";
  SlotPlan plan = plan_slots(spec);
  for (const TopkOperator& op : plan.ops) {
    ArchEntry entry;
    entry.name = op.name;
    entry.n_max = op.n;
    entry.k = op.n;
    entry.retained.resize(static_cast<size_t>(op.n));
    for (int i = 0; i < op.n; ++i) entry.retained[static_cast<size_t>(i)] = i;
    desc.entries.push_back(std::move(entry));
    desc.final_a.emplace_back(op.name, 0.0);
  }
  return desc;
}

namespace {

// Resolves a slot to its retained count / indices under a description.
struct DescLookup {
  const ModelSpec& spec;
  const ArchitectureDescription& desc;
  SlotPlan plan;

  DescLookup(const ModelSpec& s, const ArchitectureDescription& d) : spec(s), desc(d), plan(plan_slots(s)) {}

  const ArchEntry* entry(const std::string& slot) const {
    if (slot.empty()) return nullptr;
    const TopkOperator& op = plan.ops[static_cast<size_t>(plan.op_of_slot.at(slot))];
    const ArchEntry* e = desc.find(op.name);
    require(e != nullptr, "architecture description lacks entry for '" + op.name + "'");
    require(e->n_max == op.n, "architecture entry '" + op.name + "' does not match the model (" +
                                  std::to_string(e->n_max) + " vs " + std::to_string(op.n) + ")");
    return e;
  }

  int k(const std::string& slot, int full) const {
    const ArchEntry* e = entry(slot);
    return e ? e->k : full;
  }

  std::vector<int> retained(const std::string& slot, int full) const {
    const ArchEntry* e = entry(slot);
    if (e) return e->retained;
    std::vector<int> all(static_cast<size_t>(full));
    for (int i = 0; i < full; ++i) all[static_cast<size_t>(i)] = i;
    return all;
  }
};

Tensor slice_matrix(const Tensor& w, const std::vector<int>& rows, const std::vector<int>& cols) {
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), static_cast<int>(cols.size())});
  int in_cols = w.shape[1];
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < cols.size(); ++c)
      out.values[r * cols.size() + c] =
          w.values[static_cast<size_t>(rows[r]) * in_cols + static_cast<size_t>(cols[c])];
  return out;
}

Tensor slice_vector(const Tensor& v, const std::vector<int>& keep) {
  Tensor out = Tensor::zeros({static_cast<int>(keep.size())});
  for (size_t i = 0; i < keep.size(); ++i) out.values[i] = v.values[static_cast<size_t>(keep[i])];
  return out;
}

std::vector<int> iota_indices(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
  return v;
}

// head-major row indices of retained (head, dim) pairs in a (H*D) projection
std::vector<int> head_rows(const std::vector<int>& heads, const std::vector<int>& dims, int full_dim) {
  std::vector<int> rows;
  for (int h : heads)
    for (int d : dims) rows.push_back(h * full_dim + d);
  return rows;
}

}  // namespace

ModelSpec pruned_spec(const ModelSpec& spec, const ArchitectureDescription& desc) {
  DescLookup look(spec, desc);
  ModelSpec out = spec;
  out.input_dim = look.k(spec.input_slot, spec.input_dim);
  out.input_slot.clear();
  out.input_min = 0;
  out.input_step = 1;
  out.groups.clear();
  for (LayerSpec& layer : out.layers) {
    switch (layer.kind) {
      case LayerSpec::Kind::linear:
        layer.linear.out_features = look.k(layer.linear.width_slot, layer.linear.out_features);
        layer.linear.width_slot.clear();
        layer.linear.min_width = 0;
        layer.linear.step = 1;
        break;
      case LayerSpec::Kind::stage:
        layer.stage.blocks = look.k(layer.stage.depth_slot, layer.stage.blocks);
        layer.stage.hidden = look.k(layer.stage.hidden_slot, layer.stage.hidden);
        layer.stage.depth_slot.clear();
        layer.stage.hidden_slot.clear();
        layer.stage.min_blocks = 0;
        layer.stage.min_hidden = 0;
        layer.stage.hidden_step = 1;
        break;
      case LayerSpec::Kind::attention: {
        int vd = layer.attention.v_dim > 0 ? layer.attention.v_dim : layer.attention.head_dim;
        if (layer.attention.score_dim == 0) layer.attention.score_dim = layer.attention.head_dim;
        layer.attention.heads = look.k(layer.attention.head_slot, layer.attention.heads);
        layer.attention.v_dim = look.k(layer.attention.v_slot, vd);
        layer.attention.head_dim = look.k(layer.attention.qk_slot, layer.attention.head_dim);
        layer.attention.head_slot.clear();
        layer.attention.qk_slot.clear();
        layer.attention.v_slot.clear();
        layer.attention.min_heads = 0;
        break;
      }
    }
  }
  return out;
}

std::pair<ArchitectureDescription, Network> export_pruned(const Network& net,
                                                          const std::string& source) {
  ArchitectureDescription desc = describe_architecture(net, source);
  ModelSpec target = pruned_spec(net.spec, desc);
  Network out = build_supernet(target, /*seed=*/0);
  DescLookup look(net.spec, desc);

  if (!net.spec.input_slot.empty())
    out.input_selection = look.retained(net.spec.input_slot, net.spec.input_dim);

  std::vector<int> cur_keep = look.retained(net.spec.input_slot, net.spec.input_dim);
  for (size_t spec_i = 0; spec_i < net.spec.layers.size(); ++spec_i) {
    const LayerSpec& ls = net.spec.layers[spec_i];
    const LayerState& src = net.layers[spec_i];
    LayerState& dst = out.layers[spec_i];
    switch (ls.kind) {
      case LayerSpec::Kind::linear: {
        const auto& s = std::get<LinearState>(src);
        auto& d = std::get<LinearState>(dst);
        std::vector<int> rows = look.retained(ls.linear.width_slot, ls.linear.out_features);
        d.weight.value = slice_matrix(s.weight.value, rows, cur_keep);
        d.bias.value = slice_vector(s.bias.value, rows);
        cur_keep = rows;
        break;
      }
      case LayerSpec::Kind::stage: {
        const auto& s = std::get<StageState>(src);
        auto& d = std::get<StageState>(dst);
        std::vector<int> keep_blocks = look.retained(ls.stage.depth_slot, ls.stage.blocks);
        std::vector<int> keep_hidden = look.retained(ls.stage.hidden_slot, ls.stage.hidden);
        for (size_t b = 0; b < keep_blocks.size(); ++b) {
          const auto& sb = s.blocks[static_cast<size_t>(keep_blocks[b])];
          auto& db = d.blocks[b];
          db.w1.value = slice_matrix(sb.w1.value, keep_hidden, cur_keep);
          db.b1.value = slice_vector(sb.b1.value, keep_hidden);
          db.w2.value = slice_matrix(sb.w2.value, cur_keep, keep_hidden);
          db.b2.value = slice_vector(sb.b2.value, cur_keep);
        }
        break;
      }
      case LayerSpec::Kind::attention: {
        const auto& s = std::get<AttentionState>(src);
        auto& d = std::get<AttentionState>(dst);
        std::vector<int> keep_heads = look.retained(ls.attention.head_slot, s.heads);
        std::vector<int> keep_qk = look.retained(ls.attention.qk_slot, s.qk_dim);
        std::vector<int> keep_v = look.retained(ls.attention.v_slot, s.v_dim);
        std::vector<int> qk_rows = head_rows(keep_heads, keep_qk, s.qk_dim);
        std::vector<int> v_rows = head_rows(keep_heads, keep_v, s.v_dim);
        d.wq.value = slice_matrix(s.wq.value, qk_rows, cur_keep);
        d.bq.value = slice_vector(s.bq.value, qk_rows);
        d.wk.value = slice_matrix(s.wk.value, qk_rows, cur_keep);
        d.bk.value = slice_vector(s.bk.value, qk_rows);
        d.wv.value = slice_matrix(s.wv.value, v_rows, cur_keep);
        d.bv.value = slice_vector(s.bv.value, v_rows);
        d.wo.value = slice_matrix(s.wo.value, cur_keep, v_rows);
        d.bo.value = slice_vector(s.bo.value, cur_keep);
        break;
      }
    }
  }
  return {std::move(desc), std::move(out)};
}

Network build_discrete(const ModelSpec& spec, const ArchitectureDescription& desc, uint64_t seed) {
  ModelSpec target = pruned_spec(spec, desc);
  Network net = build_supernet(target, seed);
  if (!spec.input_slot.empty()) {
    DescLookup look(spec, desc);
    net.input_selection = look.retained(spec.input_slot, spec.input_dim);
  }
  return net;
}

double count_discrete_resource(const ModelSpec& spec, const ArchitectureDescription& desc,
                               ResourceKind kind) {
  require(kind != ResourceKind::latency, "latency is measured through a fitted model, not counted");
  DescLookup look(spec, desc);
  bool macs = kind == ResourceKind::macs;
  double seq = spec.seq_len;
  double total = 0.0;
  double cur = look.k(spec.input_slot, spec.input_dim);
  for (const LayerSpec& layer : spec.layers) {
    switch (layer.kind) {
      case LayerSpec::Kind::linear: {
        double out = look.k(layer.linear.width_slot, layer.linear.out_features);
        total += macs ? seq * cur * out : cur * out + out;
        cur = out;
        break;
      }
      case LayerSpec::Kind::stage: {
        double blocks = look.k(layer.stage.depth_slot, layer.stage.blocks);
        double hidden = look.k(layer.stage.hidden_slot, layer.stage.hidden);
        double per_block = macs ? seq * (cur * hidden + hidden * cur)
                                : (cur * hidden + hidden) + (hidden * cur + cur);
        total += blocks * per_block;
        break;
      }
      case LayerSpec::Kind::attention: {
        const AttentionSpec& att = layer.attention;
        int vd_full = att.v_dim > 0 ? att.v_dim : att.head_dim;
        double heads = look.k(att.head_slot, att.heads);
        double qk = look.k(att.qk_slot, att.head_dim);
        double vd = look.k(att.v_slot, vd_full);
        double embed = cur;
        if (macs) {
          total += seq * embed * heads * qk * 2.0;       // q and k projections
          total += seq * embed * heads * vd;             // v projection
          total += seq * heads * vd * embed;             // output projection
          total += heads * seq * seq * (qk + vd);        // scores and context
        } else {
          total += 2.0 * (embed * heads * qk + heads * qk);
          total += embed * heads * vd + heads * vd;
          total += heads * vd * embed + embed;
        }
        // residual block: embed width unchanged
        break;
      }
    }
  }
  return total;
}

ResourceKind resource_kind_from_string(const std::string& s) {
  if (s == "macs") return ResourceKind::macs;
  if (s == "params") return ResourceKind::params;
  if (s == "latency") return ResourceKind::latency;
  fail("unknown resource kind '" + s + "' (expected macs, params or latency)");
}

std::string to_string(ResourceKind kind) {
  switch (kind) {
    case ResourceKind::macs: return "macs";
    case ResourceKind::params: return "params";
    case ResourceKind::latency: return "latency";
  }
  return "?";
}

}  // namespace dms
