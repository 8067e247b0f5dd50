#include "dms/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "dms/gradcheck.hpp"

namespace dms {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void Hyperparams::validate() const {
  require(lambda_resource > 0, "lambda_resource must be positive");
  require(lr_structure > 0 && lr_weights > 0, "learning rates must be positive");
  require(decay > 0 && decay < 1, "decay must lie in (0,1)");
  require(search_epochs >= 0 && retrain_epochs >= 0, "epoch counts must be non-negative");
  require(width_only_epochs >= 0 && width_only_epochs <= search_epochs,
          "width-only epochs must fit inside the search epochs");
  require(batch_size > 0, "batch size must be positive");
}

void PipelineConfig::validate() const {
  hp.validate();
  if (pipeline == Pipeline::np)
    require(pretrained.empty(), "pipeline np searches from random init and takes no checkpoint");
  else
    require(!pretrained.empty(), "pipeline " + to_string(pipeline) + " needs a pretrained checkpoint");
  require((target_fraction > 0) != (target_value > 0),
          "exactly one of target_fraction / target_value must be set");
  if (target_fraction > 0)
    require(target_fraction < 1.0, "target_fraction must lie in (0,1)");
  if (resource_kind == ResourceKind::latency)
    require(!latency.layers.empty(), "latency-constrained runs need a fitted latency model");
}

double PipelineConfig::resolve_target(double r_supernet) const {
  double r_final = target_value > 0 ? target_value : target_fraction * r_supernet;
  require(r_final > 0 && r_final < r_supernet,
          "resource target " + std::to_string(r_final) + " must lie in (0, r_supernet=" +
              std::to_string(r_supernet) + ")");
  return r_final;
}

void AdamOptimizer::step(const std::vector<Param*>& params, const Gradients& grads) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
  }
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    Tensor g = grads.wrt(p.bound);
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(p.value.values.size(), 0.0);
      v.assign(p.value.values.size(), 0.0);
    }
    for (size_t j = 0; j < p.value.values.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g.values[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g.values[j] * g.values[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p.value.values[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

OptimizerState AdamOptimizer::state() const {
  OptimizerState s;
  s.step = t_;
  s.m = m_;
  s.v = v_;
  return s;
}

void AdamOptimizer::restore(const OptimizerState& s) {
  t_ = s.step;
  m_ = s.m;
  v_ = s.v;
}

void structure_step(TopkOperator& op, double g_task, double g_resource, const Hyperparams& hp,
                    std::vector<std::string>* events) {
  double g = g_task + hp.lambda_resource * g_resource;
  if (!std::isfinite(g)) {
    if (events)
      events->push_back("operator '" + op.name + "': non-finite structure gradient, step skipped");
    return;
  }
  op.a = std::clamp(op.a - hp.lr_structure * g, op.a_min, op.a_max);
}

namespace {

Tensor take_rows(const Tensor& t, const std::vector<int>& order, int begin, int count) {
  int cols = t.rank() == 1 ? 1 : t.shape[1];
  Shape shape = t.rank() == 1 ? Shape{count} : Shape{count, cols};
  Tensor out = Tensor::zeros(shape);
  for (int r = 0; r < count; ++r) {
    int src = order[static_cast<size_t>(begin + r)];
    for (int c = 0; c < cols; ++c)
      out.values[static_cast<size_t>(r) * cols + c] =
          t.values[static_cast<size_t>(src) * cols + c];
  }
  return out;
}

Tensor task_loss(Graph& g, const Tensor& out, const Tensor& y, bool classification) {
  if (classification) return g.softmax_cross_entropy(out, g.constant(y));
  Tensor d = g.sub(out, g.constant(y));
  return g.mean(g.mul(d, d));
}

std::string dump_state(const Network& net, int epoch, int batch) {
  std::ostringstream os;
  os << "epoch " << epoch << " batch " << batch << ";";
  for (const TopkOperator& op : net.ops) os << " " << op.name << ".a=" << op.a;
  return os.str();
}

}  // namespace

double consumption_value(Network& net, const ResourceModel& rm) {
  Graph g;
  ForwardTrace trace;
  for (TopkOperator& op : net.ops) {
    op.rank_normalize = net.rank_normalize;
    trace.masks.push_back(build_mask(g, op));
  }
  return current_consumption(g, net, trace, rm).scalar_value();
}

double scheduled_target(int epoch, const Hyperparams& hp, double r_final, double r_supernet) {
  int schedule_end = std::max(hp.search_epochs - 1 - hp.width_only_epochs, 0);
  if (schedule_end == 0) return r_final;
  return target_schedule(std::min(epoch, schedule_end), schedule_end, r_final, r_supernet);
}

EpochMetrics train_epoch(SearchContext& ctx, TrainPhase phase, int epoch, double r_t) {
  Network& net = ctx.net;
  bool has_ops = !net.ops.empty();
  require(phase != TrainPhase::structure_only || has_ops,
          "structure-only training needs searchable operators");
  bool update_weights =
      !ctx.weights_frozen && phase != TrainPhase::structure_only;
  bool update_structure = has_ops && phase != TrainPhase::weights_only;
  bool freeze_depth = phase == TrainPhase::width_only;
  MaskMode mode = has_ops ? MaskMode::soft : MaskMode::plain;

  int n = ctx.data.x_train.shape[0];
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), ctx.rng);

  EpochMetrics metrics;
  metrics.epoch = epoch;
  metrics.phase = to_string(phase);
  metrics.r_t = r_t;
  double loss_sum = 0.0, res_sum = 0.0;
  int batches = 0;

  auto params = net.params();
  for (int begin = 0; begin < n; begin += ctx.hp.batch_size) {
    int count = std::min(ctx.hp.batch_size, n - begin);
    Tensor xb = take_rows(ctx.data.x_train, order, begin, count);
    Tensor yb = take_rows(ctx.data.y_train, order, begin, count);

    try {
      Graph g;
      ForwardTrace trace = net.forward(g, xb, mode);
      Tensor loss = task_loss(g, trace.output, yb, ctx.data.classification);
      double loss_value = loss.scalar_value();
      require(std::isfinite(loss_value), "task loss is not finite");

      Tensor r_c, res_loss;
      bool resource_active = false;
      if (update_structure) {
        r_c = current_consumption(g, net, trace, ctx.rm);
        res_loss = resource_loss(g, r_c, r_t);
        resource_active = res_loss.scalar_value() > 0.0;
        res_sum += res_loss.scalar_value();
      }

      Gradients task_grads = g.backward(loss);
      if (update_weights) ctx.weights.step(params, task_grads);

      if (update_structure) {
        std::optional<Gradients> res_grads;
        if (resource_active) res_grads = g.backward(res_loss);
        for (size_t i = 0; i < net.ops.size(); ++i) {
          TopkOperator& op = net.ops[i];
          const TopkMask& tm = trace.masks[i];
          if (op.metric == ImportanceMetric::taylor) {
            Tensor mg = task_grads.wrt(tm.unit_mask);
            update_importance(op, tm.unit_mask.values, mg.values);
          }
          if (freeze_depth && op.kind == DimensionKind::depth) continue;
          double gt = task_grads.wrt(tm.a).values[0];
          double gr = res_grads ? res_grads->wrt(tm.a).values[0] : 0.0;
          structure_step(op, gt, gr, ctx.hp, &ctx.events);
        }
      }

      loss_sum += loss_value;
      ++batches;
    } catch (const Divergence&) {
      throw;
    } catch (const Error& e) {
      throw Divergence(std::string("training diverged: ") + e.what() + " [" +
                       dump_state(net, epoch, batches) + "]");
    }
  }

  metrics.task_loss = loss_sum / std::max(batches, 1);
  metrics.resource_loss = res_sum / std::max(batches, 1);
  metrics.r_c = has_ops ? consumption_value(net, ctx.rm) : 0.0;
  for (const TopkOperator& op : net.ops) metrics.a_values.emplace_back(op.name, op.a);
  return metrics;
}

EvalMetrics evaluate(Network& net, const Tensor& x, const Tensor& y, bool classification,
                     int batch_size, MaskMode mode) {
  int n = x.shape[0];
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  int64_t correct = 0;
  for (int begin = 0; begin < n; begin += batch_size) {
    int count = std::min(batch_size, n - begin);
    Tensor xb = take_rows(x, order, begin, count);
    Tensor yb = take_rows(y, order, begin, count);
    Graph g;
    ForwardTrace trace = net.forward(g, xb, mode);
    Tensor loss = task_loss(g, trace.output, yb, classification);
    loss_sum += loss.scalar_value() * count;
    if (classification) {
      int classes = trace.output.shape[1];
      for (int r = 0; r < count; ++r) {
        const double* row = trace.output.values.data() + static_cast<int64_t>(r) * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        if (best == static_cast<int>(yb.values[static_cast<size_t>(r)])) ++correct;
      }
    }
  }
  EvalMetrics out;
  out.loss = loss_sum / n;
  if (classification) out.accuracy = static_cast<double>(correct) / n;
  return out;
}

RetrainResult retrain(const ModelSpec& spec, const ArchitectureDescription& desc,
                      const Dataset& data, const Hyperparams& hp, uint64_t seed) {
  RetrainResult out;
  out.model = build_discrete(spec, desc, seed);
  Hyperparams rhp = hp;
  rhp.seed = seed;
  SearchContext ctx(out.model, data, ResourceModel{}, rhp);
  for (int e = 0; e < hp.retrain_epochs; ++e) {
    EpochMetrics m = train_epoch(ctx, TrainPhase::weights_only, e, 0.0);
    m.phase = "retrain";
    out.trace.push_back(std::move(m));
  }
  out.eval = evaluate(out.model, data.x_test, data.y_test, data.classification, hp.batch_size);
  return out;
}

RunResult run_pipeline(const PipelineConfig& cfg, const EpochSink& on_epoch) {
  cfg.validate();
  Dataset data = make_dataset(cfg.task);
  require(cfg.model.input_dim == data.x_train.shape[1],
          "model input_dim " + std::to_string(cfg.model.input_dim) + " does not match task input " +
              std::to_string(data.x_train.shape[1]));
  int expected_out = data.classification ? cfg.task.classes : cfg.task.output_dim;
  require(cfg.model.output_dim() == expected_out,
          "model head emits " + std::to_string(cfg.model.output_dim()) + " features, task needs " +
              std::to_string(expected_out));

  RunResult out;
  out.supernet = build_supernet(cfg.model, cfg.hp.seed);
  Network& net = out.supernet;
  net.rank_normalize = cfg.rank_normalize;
  for (TopkOperator& op : net.ops) op.decay = cfg.hp.decay;

  ResourceModel rm;
  rm.kind = cfg.resource_kind;
  rm.latency = cfg.latency;
  out.r_supernet = supernet_consumption(cfg.model, rm);
  out.r_final = cfg.resolve_target(out.r_supernet);

  if (cfg.pipeline != Pipeline::np) load_weights(net, cfg.pretrained);

  SearchContext ctx(net, data, rm, cfg.hp);
  ctx.rng.seed(mix_seed(cfg.hp.seed, /*salt=*/1));
  ctx.weights_frozen = cfg.pipeline == Pipeline::p_minus;

  double r_t = out.r_final;
  for (int e = 0; e < cfg.hp.search_epochs; ++e) {
    bool width_tail = e >= cfg.hp.search_epochs - cfg.hp.width_only_epochs;
    // p- keeps weights frozen via the context flag, so its width tail is the
    // same width-only phase with no weight updates
    TrainPhase phase = width_tail ? TrainPhase::width_only
                                  : (cfg.pipeline == Pipeline::p_minus ? TrainPhase::structure_only
                                                                       : TrainPhase::joint);
    r_t = scheduled_target(e, cfg.hp, out.r_final, out.r_supernet);
    EpochMetrics m = train_epoch(ctx, phase, e, r_t);
    if (on_epoch) on_epoch(m);
    out.search_trace.push_back(std::move(m));
  }
  out.events = ctx.events;
  out.final_r_c = net.ops.empty() ? 0.0 : consumption_value(net, rm);

  auto exported = export_pruned(net, "seed " + std::to_string(cfg.hp.seed));
  out.arch = std::move(exported.first);
  out.arch.seed = cfg.hp.seed;
  Network discrete = std::move(exported.second);
  out.exported_resource = discrete_consumption(cfg.model, out.arch, rm);
  out.target_reached = out.exported_resource <= 1.02 * out.r_final;

  // soft vs discrete probe on held-out data
  {
    const Tensor& xs = cfg.task.val > 0 ? data.x_val : data.x_test;
    const Tensor& ys = cfg.task.val > 0 ? data.y_val : data.y_test;
    int probe = std::min(cfg.hp.batch_size, xs.shape[0]);
    std::vector<int> order(static_cast<size_t>(xs.shape[0]));
    std::iota(order.begin(), order.end(), 0);
    Tensor xb = take_rows(xs, order, 0, probe);
    Tensor yb = take_rows(ys, order, 0, probe);
    out.soft_loss = evaluate(net, xb, yb, data.classification, probe, MaskMode::soft).loss;
    out.discrete_loss = evaluate(discrete, xb, yb, data.classification, probe).loss;
  }

  std::ostringstream rng_state;
  rng_state << ctx.rng;
  out.final_state.epoch = cfg.hp.search_epochs;
  out.final_state.r_t = r_t;
  out.final_state.rng = rng_state.str();
  out.final_state.opt = ctx.weights.state();

  if (cfg.pipeline == Pipeline::p_minus) {
    out.final_model = std::move(discrete);
    out.final_eval =
        evaluate(out.final_model, data.x_test, data.y_test, data.classification, cfg.hp.batch_size);
  } else {
    RetrainResult rr = retrain(cfg.model, out.arch, data, cfg.hp, mix_seed(cfg.hp.seed, 2));
    for (EpochMetrics& m : rr.trace) {
      if (on_epoch) on_epoch(m);
      out.retrain_trace.push_back(std::move(m));
    }
    out.final_model = std::move(rr.model);
    out.final_eval = rr.eval;
  }
  return out;
}

ArchitectureDescription uniform_baseline(const ModelSpec& spec, double budget, ResourceKind kind) {
  std::vector<TopkOperator> ops = model_operators(spec);
  auto describe = [&](double s) {
    ArchitectureDescription desc;
    desc.source = "uniform multiplier " + std::to_string(s);
    for (TopkOperator op : ops) {
      op.a = std::clamp(1.0 - s, op.a_min, op.a_max);
      ArchEntry e;
      e.name = op.name;
      e.n_max = op.n;
      e.k = element_count(op);
      for (int i = 0; i < e.k; ++i) e.retained.push_back(i);
      desc.entries.push_back(std::move(e));
      desc.final_a.emplace_back(op.name, op.a);
    }
    return desc;
  };
  auto counted = [&](double s) { return count_discrete_resource(spec, describe(s), kind); };

  double full = counted(1.0);
  require(budget <= full, "uniform baseline budget exceeds the supernet consumption");
  require(budget >= counted(0.0),
          "uniform baseline budget lies below the minimum architecture");
  if (budget == full) return describe(1.0);

  double lo = 0.0, hi = 1.0;
  for (int iter = 0; iter < 80; ++iter) {
    double mid = 0.5 * (lo + hi);
    if (counted(mid) <= budget)
      lo = mid;
    else
      hi = mid;
  }
  ArchitectureDescription desc = describe(lo);
  double got = count_discrete_resource(spec, desc, kind);
  require(std::abs(got - budget) <= 0.02 * budget,
          "uniform baseline cannot match the budget within 2% (closest " + std::to_string(got) +
              " vs " + std::to_string(budget) + ")");
  return desc;
}

GradcheckReport gradcheck_suite(int seeds) {
  GradcheckReport report;
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-2.0, 2.0);

  auto rand_tensor = [&](Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values) v = dist(rng);
    return t;
  };

  for (int seed = 0; seed < seeds; ++seed) {
    Tensor x = rand_tensor({2, 3}, -2, 2);
    Tensor w = rand_tensor({4, 3}, -2, 2);
    Tensor m = rand_tensor({1, 3}, -2, 2);
    Tensor pos = rand_tensor({2, 3}, 0.2, 3.0);
    auto check = [&](const ScalarFn& fn, const Tensor& p) {
      report.max_primitive = std::max(report.max_primitive, grad_check(fn, p, 1e-5));
    };
    check([&](Graph& g, const Tensor& t) { return g.sum(g.add(t, g.constant(m))); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.sub(g.constant(m), t)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.mul(t, g.constant(m))); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.matmul(t, g.constant(w), false, true)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.sigmoid(t)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.exp(t)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.log(t)); }, pos);
    check([&](Graph& g, const Tensor& t) { return g.mean(g.mul(t, t)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.scale(t, 1.3)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.reshape(t, {6})); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.slice(t, 1, 0, 2)); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.permute(t, {1, 0})); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.mul(g.softmax(t), g.constant(m))); }, x);
    check([&](Graph& g, const Tensor& t) { return g.sum(g.sum_axis(g.mul(t, t), 0)); }, x);
    check(
        [&](Graph& g, const Tensor& t) {
          Tensor labels = g.constant(Tensor({2}, {1.0, 2.0}));
          return g.softmax_cross_entropy(t, labels);
        },
        rand_tensor({2, 4}, -2, 2));
  }

  // composite: a -> soft mask -> masked forward -> task + resource loss,
  // finite differences taken through the real network path
  ModelSpec spec;
  spec.input_dim = 8;
  spec.input_slot = "in";
  LayerSpec l1;
  l1.kind = LayerSpec::Kind::linear;
  l1.name = "fc1";
  l1.linear = {16, true, "h", 0, 1};
  LayerSpec l2;
  l2.kind = LayerSpec::Kind::linear;
  l2.name = "fc2";
  l2.linear = {3, false, "", 0, 1};
  spec.layers = {l1, l2};

  for (int seed = 0; seed < std::max(1, seeds / 10); ++seed) {
    Network net = build_supernet(spec, static_cast<uint64_t>(seed));
    std::mt19937_64 drng(seed + 1000);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Tensor xb = Tensor::zeros({4, 8});
    for (double& v : xb.values) v = gauss(drng);
    Tensor yb = Tensor::zeros({4});
    for (double& v : yb.values) v = static_cast<double>(drng() % 3);
    for (TopkOperator& op : net.ops) {
      op.a = 0.2 + 0.5 * unit(rng);
      for (double& c : op.importance) c = unit(rng);
    }
    ResourceModel rm;
    rm.kind = ResourceKind::macs;

    double r_t_fixed = -1.0;  // pinned on the first evaluation
    std::optional<Gradients> grads;
    std::vector<Tensor> a_handles;
    auto total_loss = [&](bool capture) {
      Graph g;
      ForwardTrace tr = net.forward(g, xb, MaskMode::soft);
      Tensor loss = task_loss(g, tr.output, yb, true);
      Tensor r_c = current_consumption(g, net, tr, rm);
      if (r_t_fixed < 0) r_t_fixed = 0.5 * r_c.scalar_value();
      Tensor total = g.add(loss, resource_loss(g, r_c, r_t_fixed));
      if (capture) {
        grads = g.backward(total);
        a_handles.clear();
        for (const TopkMask& tm : tr.masks) a_handles.push_back(tm.a);
      }
      return total.scalar_value();
    };

    total_loss(true);
    for (size_t i = 0; i < net.ops.size(); ++i) {
      double analytic = grads->wrt(a_handles[i]).values[0];
      double keep = net.ops[i].a;
      double eps = 1e-6;
      net.ops[i].a = keep + eps;
      double hi = total_loss(false);
      net.ops[i].a = keep - eps;
      double lo = total_loss(false);
      net.ops[i].a = keep;
      double numeric = (hi - lo) / (2 * eps);
      double err =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      report.max_composite = std::max(report.max_composite, err);
    }
  }
  return report;
}

Pipeline pipeline_from_string(const std::string& s) {
  if (s == "np") return Pipeline::np;
  if (s == "p") return Pipeline::p;
  if (s == "p-") return Pipeline::p_minus;
  fail("unknown pipeline '" + s + "' (expected np, p or p-)");
}

std::string to_string(Pipeline p) {
  switch (p) {
    case Pipeline::np: return "np";
    case Pipeline::p: return "p";
    case Pipeline::p_minus: return "p-";
  }
  return "?";
}

std::string to_string(TrainPhase p) {
  switch (p) {
    case TrainPhase::joint: return "joint";
    case TrainPhase::width_only: return "width-only";
    case TrainPhase::weights_only: return "weights-only";
    case TrainPhase::structure_only: return "structure-only";
  }
  return "?";
}

}  // namespace dms
