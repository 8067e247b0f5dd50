#include "dms/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dms/error.hpp"

namespace dms {

namespace {

Tensor gaussian(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = dist(rng);
  return t;
}

void check_splits(const TaskSpec& spec) {
  require(spec.train > 0 && spec.val > 0 && spec.test > 0,
          "task needs positive train, val and test split sizes");
}

struct SplitView {
  Tensor x_train, x_val, x_test;
  Tensor y_train, y_val, y_test;
};

// pool rows are already i.i.d. in generation order; split sequentially
SplitView split_pool(const Tensor& x, const Tensor& y, const TaskSpec& spec) {
  int cols = x.shape[1];
  bool labels_flat = y.rank() == 1;
  int ycols = labels_flat ? 1 : y.shape[1];
  auto take = [&](int begin, int count) {
    Tensor xs = Tensor::zeros({count, cols});
    Tensor ys = labels_flat ? Tensor::zeros({count}) : Tensor::zeros({count, ycols});
    for (int r = 0; r < count; ++r) {
      for (int c = 0; c < cols; ++c)
        xs.values[static_cast<size_t>(r) * cols + c] =
            x.values[static_cast<size_t>(begin + r) * cols + c];
      for (int c = 0; c < ycols; ++c)
        ys.values[static_cast<size_t>(r) * ycols + c] =
            y.values[static_cast<size_t>(begin + r) * ycols + c];
    }
    return std::make_pair(xs, ys);
  };
  SplitView out;
  auto [xt, yt] = take(0, spec.train);
  auto [xv, yv] = take(spec.train, spec.val);
  auto [xs, ys] = take(spec.train + spec.val, spec.test);
  out.x_train = xt;
  out.y_train = yt;
  out.x_val = xv;
  out.y_val = yv;
  out.x_test = xs;
  out.y_test = ys;
  return out;
}

}  // namespace

Dataset gen_planted_features(const TaskSpec& spec) {
  require(spec.kind == TaskKind::planted_features, "task kind mismatch");
  check_splits(spec);
  require(spec.input_dim > 0, "planted-features task needs a positive input dimension");
  require(spec.informative > 0, "planted-features task needs a non-empty informative set");
  require(spec.informative <= spec.input_dim,
          "informative feature count exceeds the input dimension");
  require(spec.classes >= 2, "planted-features task needs at least two classes");

  std::mt19937_64 rng(spec.seed);
  int d = spec.input_dim, s = spec.informative;
  int n = spec.train + spec.val + spec.test;

  std::vector<int> coords(static_cast<size_t>(d));
  std::iota(coords.begin(), coords.end(), 0);
  std::shuffle(coords.begin(), coords.end(), rng);
  std::vector<int> informative(coords.begin(), coords.begin() + s);
  std::sort(informative.begin(), informative.end());

  const int hidden = 16;
  Tensor mix = gaussian({hidden, s}, rng, 1.0 / std::sqrt(static_cast<double>(s)));
  Tensor head = gaussian({hidden}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));

  Tensor x = gaussian({n, d}, rng);
  std::vector<double> score(static_cast<size_t>(n));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int r = 0; r < n; ++r) {
    double acc = 0.0;
    for (int hUnit = 0; hUnit < hidden; ++hUnit) {
      double z = 0.0;
      for (int j = 0; j < s; ++j)
        z += mix.values[static_cast<size_t>(hUnit) * s + j] *
             x.values[static_cast<size_t>(r) * d + informative[static_cast<size_t>(j)]];
      acc += head.values[static_cast<size_t>(hUnit)] * std::tanh(z);
    }
    score[static_cast<size_t>(r)] = acc + spec.noise * noise(rng);
  }

  // quantile bins over the pool keep classes balanced by construction
  std::vector<double> sorted = score;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  for (int c = 1; c < spec.classes; ++c)
    edges.push_back(sorted[static_cast<size_t>(static_cast<int64_t>(c) * n / spec.classes)]);
  Tensor y = Tensor::zeros({n});
  for (int r = 0; r < n; ++r) {
    int label = 0;
    while (label < spec.classes - 1 && score[static_cast<size_t>(r)] >= edges[static_cast<size_t>(label)]) ++label;
    y.values[static_cast<size_t>(r)] = label;
  }

  SplitView split = split_pool(x, y, spec);
  Dataset out;
  out.classification = true;
  out.x_train = split.x_train;
  out.y_train = split.y_train;
  out.x_val = split.x_val;
  out.y_val = split.y_val;
  out.x_test = split.x_test;
  out.y_test = split.y_test;
  out.informative = informative;
  return out;
}

namespace {

// plain-loop residual teacher; independent of the graph engine. Biased relu
// blocks keep the nonlinear part of the target essential, so depth matters.
struct Teacher {
  int dim = 0, hidden = 0, blocks = 0, in = 0, out = 0;
  std::vector<double> w_in, w_out;              // (dim,in), (out,dim)
  std::vector<std::vector<double>> w1s, b1s, w2s;  // per block

  std::vector<double> eval(const double* x) const {
    std::vector<double> h(static_cast<size_t>(dim), 0.0);
    for (int i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (int j = 0; j < in; ++j) acc += w_in[static_cast<size_t>(i) * in + j] * x[j];
      h[static_cast<size_t>(i)] = acc;
    }
    std::vector<double> mid(static_cast<size_t>(hidden));
    for (int b = 0; b < blocks; ++b) {
      for (int m = 0; m < hidden; ++m) {
        double acc = b1s[static_cast<size_t>(b)][static_cast<size_t>(m)];
        for (int j = 0; j < dim; ++j) acc += w1s[static_cast<size_t>(b)][static_cast<size_t>(m) * dim + j] * h[static_cast<size_t>(j)];
        mid[static_cast<size_t>(m)] = std::max(0.0, acc);
      }
      for (int i = 0; i < dim; ++i) {
        double acc = 0.0;
        for (int m = 0; m < hidden; ++m) acc += w2s[static_cast<size_t>(b)][static_cast<size_t>(i) * hidden + m] * mid[static_cast<size_t>(m)];
        h[static_cast<size_t>(i)] += acc;
      }
    }
    std::vector<double> yv(static_cast<size_t>(out));
    for (int o = 0; o < out; ++o) {
      double acc = 0.0;
      for (int j = 0; j < dim; ++j) acc += w_out[static_cast<size_t>(o) * dim + j] * h[static_cast<size_t>(j)];
      yv[static_cast<size_t>(o)] = acc;
    }
    return yv;
  }
};

Teacher make_teacher(const TaskSpec& spec, std::mt19937_64& rng) {
  Teacher t;
  t.in = spec.input_dim;
  t.dim = spec.teacher_dim;
  t.hidden = spec.teacher_hidden;
  t.blocks = spec.teacher_blocks;
  t.out = spec.output_dim;
  auto fill = [&](std::vector<double>& w, int rows, int cols, double gain) {
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(cols)));
    w.resize(static_cast<size_t>(rows) * cols);
    for (double& v : w) v = dist(rng);
  };
  fill(t.w_in, t.dim, t.in, 1.0);
  fill(t.w_out, t.out, t.dim, 1.0);
  t.w1s.resize(static_cast<size_t>(t.blocks));
  t.b1s.resize(static_cast<size_t>(t.blocks));
  t.w2s.resize(static_cast<size_t>(t.blocks));
  std::normal_distribution<double> bias(0.0, 0.5);
  for (int b = 0; b < t.blocks; ++b) {
    fill(t.w1s[static_cast<size_t>(b)], t.hidden, t.dim, 2.0);
    t.b1s[static_cast<size_t>(b)].resize(static_cast<size_t>(t.hidden));
    for (double& v : t.b1s[static_cast<size_t>(b)]) v = bias(rng);
    fill(t.w2s[static_cast<size_t>(b)], t.dim, t.hidden, 1.0);
  }
  return t;
}

}  // namespace

Dataset gen_teacher_student(const TaskSpec& spec) {
  require(spec.kind == TaskKind::teacher_student, "task kind mismatch");
  check_splits(spec);
  require(spec.input_dim > 0 && spec.output_dim > 0, "teacher-student task needs input and output dims");
  require(spec.teacher_blocks > 0 && spec.teacher_hidden > 0 && spec.teacher_dim > 0,
          "teacher-student task needs teacher blocks, hidden width and stage dim");

  std::mt19937_64 rng(spec.seed);
  Teacher teacher = make_teacher(spec, rng);
  int n = spec.train + spec.val + spec.test;
  Tensor x = gaussian({n, spec.input_dim}, rng);
  Tensor y = Tensor::zeros({n, spec.output_dim});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int r = 0; r < n; ++r) {
    std::vector<double> t = teacher.eval(x.values.data() + static_cast<int64_t>(r) * spec.input_dim);
    for (int o = 0; o < spec.output_dim; ++o)
      y.values[static_cast<size_t>(r) * spec.output_dim + o] =
          t[static_cast<size_t>(o)] + spec.noise * noise(rng);
  }

  SplitView split = split_pool(x, y, spec);
  Dataset out;
  out.classification = false;
  out.x_train = split.x_train;
  out.y_train = split.y_train;
  out.x_val = split.x_val;
  out.y_val = split.y_val;
  out.x_test = split.x_test;
  out.y_test = split.y_test;
  out.teacher_blocks = spec.teacher_blocks;
  return out;
}

Dataset load_csv_dataset(const TaskSpec& spec) {
  require(spec.kind == TaskKind::csv_classification, "task kind mismatch");
  check_splits(spec);

  std::ifstream in(spec.csv_path);
  require(in.good(), "cannot open dataset '" + spec.csv_path + "'");

  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "dataset '" + spec.csv_path + "' is empty");
  size_t columns = static_cast<size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  require(columns >= 2, "dataset needs at least one feature column and a label column");

  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<double> row;
    while (std::getline(ss, field, ',')) {
      try {
        row.push_back(std::stod(field));
      } catch (const std::exception&) {
        fail("dataset row " + std::to_string(lineno) + ": cell '" + field + "' does not parse");
      }
    }
    require(row.size() == columns, "dataset row " + std::to_string(lineno) + " has " +
                                       std::to_string(row.size()) + " cells, expected " +
                                       std::to_string(columns));
    double label = row.back();
    require(label == std::floor(label) && label >= 0,
            "dataset row " + std::to_string(lineno) + ": label must be a non-negative integer");
    row.pop_back();
    rows.push_back(std::move(row));
    labels.push_back(label);
  }
  int n = static_cast<int>(rows.size());
  require(n > 0, "dataset '" + spec.csv_path + "' has no data rows");
  require(spec.train + spec.val + spec.test <= n,
          "requested splits exceed the " + std::to_string(n) + " rows of '" + spec.csv_path + "'");
  std::set<int> classes(labels.begin(), labels.end());
  require(classes.size() >= 2, "dataset '" + spec.csv_path + "' has a single class label");

  int d = static_cast<int>(columns) - 1;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);

  Tensor x = Tensor::zeros({n, d});
  Tensor y = Tensor::zeros({n});
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c)
      x.values[static_cast<size_t>(r) * d + c] = rows[static_cast<size_t>(order[static_cast<size_t>(r)])][static_cast<size_t>(c)];
    y.values[static_cast<size_t>(r)] = labels[static_cast<size_t>(order[static_cast<size_t>(r)])];
  }

  TaskSpec view = spec;
  SplitView split = split_pool(x, y, view);

  // standardize with train statistics only
  std::vector<double> mean(static_cast<size_t>(d), 0.0), var(static_cast<size_t>(d), 0.0);
  int nt = split.x_train.shape[0];
  for (int r = 0; r < nt; ++r)
    for (int c = 0; c < d; ++c) mean[static_cast<size_t>(c)] += split.x_train.values[static_cast<size_t>(r) * d + c];
  for (double& m : mean) m /= nt;
  for (int r = 0; r < nt; ++r)
    for (int c = 0; c < d; ++c) {
      double dv = split.x_train.values[static_cast<size_t>(r) * d + c] - mean[static_cast<size_t>(c)];
      var[static_cast<size_t>(c)] += dv * dv;
    }
  for (double& v : var) v = std::max(v / nt, 1e-8);  // variance floor for constant columns
  auto standardize = [&](Tensor& t) {
    int rows_n = t.shape[0];
    for (int r = 0; r < rows_n; ++r)
      for (int c = 0; c < d; ++c) {
        double& v = t.values[static_cast<size_t>(r) * d + c];
        v = (v - mean[static_cast<size_t>(c)]) / std::sqrt(var[static_cast<size_t>(c)]);
      }
  };
  standardize(split.x_train);
  standardize(split.x_val);
  standardize(split.x_test);

  Dataset out;
  out.classification = true;
  out.x_train = split.x_train;
  out.y_train = split.y_train;
  out.x_val = split.x_val;
  out.y_val = split.y_val;
  out.x_test = split.x_test;
  out.y_test = split.y_test;
  return out;
}

Dataset make_dataset(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::planted_features: return gen_planted_features(spec);
    case TaskKind::teacher_student: return gen_teacher_student(spec);
    case TaskKind::csv_classification: return load_csv_dataset(spec);
  }
  fail("unknown task kind");
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "planted_features") return TaskKind::planted_features;
  if (s == "teacher_student") return TaskKind::teacher_student;
  if (s == "csv_classification") return TaskKind::csv_classification;
  fail("unknown task kind '" + s + "'");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::planted_features: return "planted_features";
    case TaskKind::teacher_student: return "teacher_student";
    case TaskKind::csv_classification: return "csv_classification";
  }
  return "?";
}

}  // namespace dms
