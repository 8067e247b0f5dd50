#include "dms/resource.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "dms/error.hpp"
#include "dms/topk.hpp"

namespace dms {

double LatencyFit::eval(double a_in, double a_out) const {
  return latency_max * (coeffs[0] + coeffs[1] * a_in + coeffs[2] * a_out + coeffs[3] * a_in * a_in +
                        coeffs[4] * a_in * a_out + coeffs[5] * a_out * a_out);
}

const LatencyFit& LatencyModel::at(const std::string& id) const {
  for (const LatencyFit& f : layers)
    if (f.layer_id == id) return f;
  fail("no fitted latency model for layer '" + id + "'");
}

LatencyTable load_latency_table(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open latency table '" + path + "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "latency table '" + path + "' is empty");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string field;
    while (std::getline(ss, field, ',')) {
      size_t b = field.find_first_not_of(" \t\r");
      size_t e = field.find_last_not_of(" \t\r");
      out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
    }
    return out;
  };
  std::vector<std::string> header = split(line);
  require(header == std::vector<std::string>{"layer_id", "a_in", "a_out", "latency_seconds"},
          "latency table '" + path + "' must start with header: layer_id, a_in, a_out, latency_seconds");
  LatencyTable table;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string> f = split(line);
    require(f.size() == 4, "latency table row " + std::to_string(row) + " has " +
                               std::to_string(f.size()) + " fields, expected 4");
    LatencySample s;
    s.layer_id = f[0];
    try {
      s.a_in = std::stod(f[1]);
      s.a_out = std::stod(f[2]);
      s.latency = std::stod(f[3]);
    } catch (const std::exception&) {
      fail("latency table row " + std::to_string(row) + " has unparseable numbers");
    }
    require(s.latency > 0.0, "latency table row " + std::to_string(row) + " has non-positive latency");
    table.samples.push_back(std::move(s));
  }
  return table;
}

namespace {

// 6x6 linear solve, Gaussian elimination with partial pivoting.
std::array<double, 6> solve6(std::array<std::array<double, 6>, 6> A, std::array<double, 6> b) {
  for (int col = 0; col < 6; ++col) {
    int piv = col;
    for (int r = col + 1; r < 6; ++r)
      if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
    require(std::abs(A[piv][col]) > 1e-12,
            "rank-deficient latency design: samples do not span the quadratic terms");
    std::swap(A[col], A[piv]);
    std::swap(b[col], b[piv]);
    for (int r = col + 1; r < 6; ++r) {
      double f = A[r][col] / A[col][col];
      for (int c = col; c < 6; ++c) A[r][c] -= f * A[col][c];
      b[r] -= f * b[col];
    }
  }
  std::array<double, 6> x{};
  for (int r = 5; r >= 0; --r) {
    double acc = b[r];
    for (int c = r + 1; c < 6; ++c) acc -= A[r][c] * x[c];
    x[r] = acc / A[r][r];
  }
  return x;
}

std::array<double, 6> quad_terms(double a_in, double a_out) {
  return {1.0, a_in, a_out, a_in * a_in, a_in * a_out, a_out * a_out};
}

}  // namespace

LatencyModel fit_latency_model(const LatencyTable& table) {
  // group by layer, preserving first-appearance order
  std::vector<std::string> order;
  std::map<std::string, std::vector<const LatencySample*>> groups;
  for (const LatencySample& s : table.samples) {
    if (!groups.count(s.layer_id)) order.push_back(s.layer_id);
    groups[s.layer_id].push_back(&s);
  }
  require(!order.empty(), "latency table has no samples");

  LatencyModel model;
  for (const std::string& id : order) {
    const auto& samples = groups[id];
    require(samples.size() >= 6, "layer '" + id + "' has " + std::to_string(samples.size()) +
                                     " latency samples; the quadratic fit needs at least 6");
    std::array<std::array<double, 6>, 6> xtx{};
    std::array<double, 6> xty{};
    for (const LatencySample* s : samples) {
      auto t = quad_terms(s->a_in, s->a_out);
      for (int i = 0; i < 6; ++i) {
        xty[i] += t[i] * s->latency;
        for (int j = 0; j < 6; ++j) xtx[i][j] += t[i] * t[j];
      }
    }
    std::array<double, 6> beta = solve6(xtx, xty);

    LatencyFit fit;
    fit.layer_id = id;
    fit.latency_max = beta[0];  // fitted latency at a_in = a_out = 0
    require(fit.latency_max > 0.0, "layer '" + id + "' fits a non-positive unpruned latency");
    for (int i = 0; i < 6; ++i) fit.coeffs[static_cast<size_t>(i)] = beta[i] / beta[0];

    double ss_res = 0.0, mean_y = 0.0;
    for (const LatencySample* s : samples) mean_y += s->latency;
    mean_y /= static_cast<double>(samples.size());
    double ss_tot = 0.0;
    for (const LatencySample* s : samples) {
      auto t = quad_terms(s->a_in, s->a_out);
      double pred = 0.0;
      for (int i = 0; i < 6; ++i) pred += beta[i] * t[i];
      ss_res += (pred - s->latency) * (pred - s->latency);
      ss_tot += (s->latency - mean_y) * (s->latency - mean_y);
    }
    fit.mse = ss_res / static_cast<double>(samples.size());
    fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
    model.layers.push_back(std::move(fit));
  }
  return model;
}

std::vector<std::string> latency_layer_ids(const ModelSpec& spec) {
  std::vector<std::string> ids;
  int index = 0;
  for (const LayerSpec& layer : spec.layers) {
    std::string name = layer.name.empty() ? "layer" + std::to_string(index) : layer.name;
    switch (layer.kind) {
      case LayerSpec::Kind::linear:
        ids.push_back(name);
        break;
      case LayerSpec::Kind::stage:
        for (int b = 0; b < layer.stage.blocks; ++b) {
          ids.push_back(name + ".b" + std::to_string(b) + ".w1");
          ids.push_back(name + ".b" + std::to_string(b) + ".w2");
        }
        break;
      case LayerSpec::Kind::attention:
        ids.push_back(name + ".wq");
        ids.push_back(name + ".wk");
        ids.push_back(name + ".wv");
        ids.push_back(name + ".wo");
        break;
    }
    ++index;
  }
  return ids;
}

namespace {

// retained fraction and pruning ratio of one operator, as graph expressions
struct OpExpr {
  Tensor a;    // (1,)
  Tensor rho;  // (1,) = 1 - a
};

struct ConsumptionBuilder {
  Graph& g;
  const Network& net;
  const ForwardTrace& trace;
  const ResourceModel& rm;
  std::vector<OpExpr> exprs;
  Tensor one;
  Tensor zero;
  Tensor total;

  ConsumptionBuilder(Graph& gr, const Network& n, const ForwardTrace& t, const ResourceModel& r)
      : g(gr), net(n), trace(t), rm(r) {
    one = g.constant(Tensor::scalar(1.0));
    zero = g.constant(Tensor::scalar(0.0));
    total = zero;
    require(trace.masks.size() == net.ops.size(),
            "resource model needs the soft forward trace of the same network");
    for (size_t i = 0; i < net.ops.size(); ++i) {
      OpExpr e;
      e.a = trace.masks[i].a;
      e.rho = g.sub(one, e.a);
      exprs.push_back(std::move(e));
    }
  }

  Tensor rho(int op) { return op < 0 ? one : exprs[static_cast<size_t>(op)].rho; }
  Tensor a_of(int op) { return op < 0 ? zero : exprs[static_cast<size_t>(op)].a; }

  void add(const Tensor& t) { total = g.add(total, t); }

  // cost of one weight application under macs/params, batch 1
  Tensor linear_cost(double rows, double cols, int in_op, int out_op, double seq) {
    double flat = rows * cols * (rm.kind == ResourceKind::macs ? seq : 1.0);
    return g.scale(g.mul(rho(in_op), rho(out_op)), flat);
  }

  Tensor latency_cost(const std::string& id, const Tensor& a_in, const Tensor& a_out) {
    const LatencyFit& fit = rm.latency.at(id);
    Tensor f = g.constant(Tensor::scalar(fit.coeffs[0]));
    f = g.add(f, g.scale(a_in, fit.coeffs[1]));
    f = g.add(f, g.scale(a_out, fit.coeffs[2]));
    f = g.add(f, g.scale(g.mul(a_in, a_in), fit.coeffs[3]));
    f = g.add(f, g.scale(g.mul(a_in, a_out), fit.coeffs[4]));
    f = g.add(f, g.scale(g.mul(a_out, a_out), fit.coeffs[5]));
    return g.scale(f, fit.latency_max);
  }

  Tensor depth_gate(int depth_op, int block) {
    return g.slice(trace.masks[static_cast<size_t>(depth_op)].unit_mask, 0, block, block + 1);
  }
};

}  // namespace

Tensor current_consumption(Graph& g, const Network& net, const ForwardTrace& trace,
                           const ResourceModel& rm) {
  ConsumptionBuilder cb(g, net, trace, rm);
  bool latency = rm.kind == ResourceKind::latency;
  double seq = net.spec.seq_len;
  int index = 0;
  for (const LayerState& layer : net.layers) {
    std::string name = net.spec.layers[static_cast<size_t>(index)].name.empty()
                           ? "layer" + std::to_string(index)
                           : net.spec.layers[static_cast<size_t>(index)].name;
    if (const auto* lin = std::get_if<LinearState>(&layer)) {
      double rows = lin->weight.value.shape[0];
      double cols = lin->weight.value.shape[1];
      if (latency)
        cb.add(cb.latency_cost(name, cb.a_of(lin->in_op), cb.a_of(lin->out_op)));
      else
        cb.add(cb.linear_cost(rows, cols, lin->in_op, lin->out_op, seq));
    } else if (const auto* stage = std::get_if<StageState>(&layer)) {
      for (size_t b = 0; b < stage->blocks.size(); ++b) {
        Tensor w1, w2;
        std::string bn = name + ".b" + std::to_string(b);
        if (latency) {
          w1 = cb.latency_cost(bn + ".w1", cb.a_of(stage->in_op), cb.a_of(stage->hidden_op));
          w2 = cb.latency_cost(bn + ".w2", cb.a_of(stage->hidden_op), cb.a_of(stage->in_op));
        } else {
          w1 = cb.linear_cost(stage->hidden, stage->dim, stage->in_op, stage->hidden_op, seq);
          w2 = cb.linear_cost(stage->dim, stage->hidden, stage->hidden_op, stage->in_op, seq);
        }
        Tensor cost = g.add(w1, w2);
        if (stage->depth_op >= 0)
          cost = g.mul(cost, cb.depth_gate(stage->depth_op, static_cast<int>(b)));
        cb.add(cost);
      }
    } else if (const auto* att = std::get_if<AttentionState>(&layer)) {
      Tensor rho_head = cb.rho(att->head_op);
      Tensor rho_qk = cb.rho(att->qk_op);
      Tensor rho_v = cb.rho(att->v_op);
      Tensor rho_in = cb.rho(att->in_op);
      double e = att->embed, h = att->heads, dq = att->qk_dim, dv = att->v_dim;
      if (latency) {
        Tensor a_qk = g.sub(cb.one, g.mul(rho_head, rho_qk));
        Tensor a_v = g.sub(cb.one, g.mul(rho_head, rho_v));
        cb.add(cb.latency_cost(name + ".wq", cb.a_of(att->in_op), a_qk));
        cb.add(cb.latency_cost(name + ".wk", cb.a_of(att->in_op), a_qk));
        cb.add(cb.latency_cost(name + ".wv", cb.a_of(att->in_op), a_v));
        cb.add(cb.latency_cost(name + ".wo", a_v, cb.a_of(att->in_op)));
      } else {
        bool macs = rm.kind == ResourceKind::macs;
        double proj_seq = macs ? seq : 1.0;
        Tensor hq = g.mul(rho_head, rho_qk);
        Tensor hv = g.mul(rho_head, rho_v);
        cb.add(g.scale(g.mul(rho_in, hq), 2.0 * proj_seq * e * h * dq));  // q and k
        cb.add(g.scale(g.mul(rho_in, hv), proj_seq * e * h * dv));       // v
        cb.add(g.scale(g.mul(hv, rho_in), proj_seq * h * dv * e));       // output
        if (macs) {
          cb.add(g.scale(g.mul(rho_head, rho_qk), h * seq * seq * dq));  // scores
          cb.add(g.scale(g.mul(rho_head, rho_v), h * seq * seq * dv));   // context
        }
      }
    }
    ++index;
  }
  return cb.total;
}

Tensor resource_loss(Graph& g, const Tensor& r_c, double r_t) {
  require(r_c.is_scalar(), "resource consumption must be scalar");
  double rc = r_c.scalar_value();
  require(rc > 0.0 && r_t > 0.0, "resource loss needs positive consumption and target");
  if (rc > r_t) return g.log(g.scale(r_c, 1.0 / r_t));
  return g.constant(Tensor::scalar(0.0));
}

double resource_loss_value(double r_c, double r_t) {
  require(r_c > 0.0 && r_t > 0.0, "resource loss needs positive consumption and target");
  return r_c > r_t ? std::log(r_c / r_t) : 0.0;
}

double target_schedule(int epoch, int epochs, double r_final, double r_supernet) {
  require(epochs >= 1, "target schedule needs at least one epoch");
  require(epoch >= 0 && epoch <= epochs, "epoch outside [0, epochs]");
  require(r_final > 0.0 && r_supernet > 0.0, "schedule endpoints must be positive");
  require(r_final < r_supernet, "the final target must lie below the supernet consumption");
  if (epoch == 0) return r_supernet;
  if (epoch == epochs) return r_final;
  double ratio = r_final / r_supernet;
  return std::pow(ratio, static_cast<double>(epoch) / static_cast<double>(epochs)) * r_supernet;
}

double supernet_consumption(const ModelSpec& spec, const ResourceModel& rm) {
  if (rm.kind != ResourceKind::latency)
    return count_discrete_resource(spec, full_architecture(spec), rm.kind);
  double total = 0.0;
  for (const std::string& id : latency_layer_ids(spec)) total += rm.latency.at(id).eval(0.0, 0.0);
  return total;
}

double discrete_consumption(const ModelSpec& spec, const ArchitectureDescription& desc,
                            const ResourceModel& rm) {
  if (rm.kind != ResourceKind::latency) return count_discrete_resource(spec, desc, rm.kind);

  // evaluate the fitted model at the architecture's equivalent pruning ratios
  Network net = build_supernet(spec, /*seed=*/0);
  for (TopkOperator& op : net.ops) {
    const ArchEntry* e = desc.find(op.name);
    require(e != nullptr, "architecture description lacks entry for '" + op.name + "'");
    op.a = 1.0 - static_cast<double>(e->k) / op.n;
  }
  auto a_of = [&](int op) { return op < 0 ? 0.0 : net.ops[static_cast<size_t>(op)].a; };
  auto retained_blocks = [&](int op, int full) {
    std::vector<int> all;
    if (op < 0) {
      for (int b = 0; b < full; ++b) all.push_back(b);
      return all;
    }
    return desc.find(net.ops[static_cast<size_t>(op)].name)->retained;
  };
  double total = 0.0;
  int index = 0;
  for (const LayerState& layer : net.layers) {
    std::string name = spec.layers[static_cast<size_t>(index)].name.empty()
                           ? "layer" + std::to_string(index)
                           : spec.layers[static_cast<size_t>(index)].name;
    if (const auto* lin = std::get_if<LinearState>(&layer)) {
      total += rm.latency.at(name).eval(a_of(lin->in_op), a_of(lin->out_op));
    } else if (const auto* stage = std::get_if<StageState>(&layer)) {
      for (int b : retained_blocks(stage->depth_op, static_cast<int>(stage->blocks.size()))) {
        std::string bn = name + ".b" + std::to_string(b);
        total += rm.latency.at(bn + ".w1").eval(a_of(stage->in_op), a_of(stage->hidden_op));
        total += rm.latency.at(bn + ".w2").eval(a_of(stage->hidden_op), a_of(stage->in_op));
      }
    } else if (const auto* att = std::get_if<AttentionState>(&layer)) {
      double a_qk = 1.0 - (1.0 - a_of(att->head_op)) * (1.0 - a_of(att->qk_op));
      double a_v = 1.0 - (1.0 - a_of(att->head_op)) * (1.0 - a_of(att->v_op));
      total += rm.latency.at(name + ".wq").eval(a_of(att->in_op), a_qk);
      total += rm.latency.at(name + ".wk").eval(a_of(att->in_op), a_qk);
      total += rm.latency.at(name + ".wv").eval(a_of(att->in_op), a_v);
      total += rm.latency.at(name + ".wo").eval(a_v, a_of(att->in_op));
    }
    ++index;
  }
  return total;
}

}  // namespace dms
