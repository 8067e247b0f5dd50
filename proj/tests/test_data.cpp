#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>
#include <map>

#include "dms/data.hpp"
#include "dms/error.hpp"
#include "dms/network.hpp"
#include "dms/search.hpp"
#include "doctest.h"

using namespace dms;

namespace {

TaskSpec planted(int d, int s, int classes, uint64_t seed) {
  TaskSpec t;
  t.kind = TaskKind::planted_features;
  t.input_dim = d;
  t.classes = classes;
  t.informative = s;
  t.train = 8000;
  t.val = 1000;
  t.test = 1000;
  t.noise = 0.0;
  t.seed = seed;
  return t;
}

}  // namespace

TEST_CASE("planted features is bitwise reproducible per seed") {
  Dataset a = gen_planted_features(planted(64, 8, 4, 3));
  Dataset b = gen_planted_features(planted(64, 8, 4, 3));
  CHECK(a.x_train.values == b.x_train.values);
  CHECK(a.y_train.values == b.y_train.values);
  CHECK(a.informative == b.informative);

  Dataset c = gen_planted_features(planted(64, 8, 4, 4));
  CHECK(a.x_train.values != c.x_train.values);
}

TEST_CASE("planted labels are balanced within ten percent of uniform") {
  TaskSpec t = planted(64, 8, 4, 9);
  Dataset d = gen_planted_features(t);
  std::map<int, int> counts;
  int n = d.y_train.shape[0];
  for (int r = 0; r < n; ++r) counts[static_cast<int>(d.y_train.values[static_cast<size_t>(r)])]++;
  REQUIRE(counts.size() == 4);
  double uniform = n / 4.0;
  for (auto& [label, count] : counts) {
    CHECK(count > 0.9 * uniform);
    CHECK(count < 1.1 * uniform);
  }
}

TEST_CASE("planted metadata records the informative subset") {
  Dataset d = gen_planted_features(planted(64, 8, 4, 1));
  REQUIRE(d.informative.size() == 8);
  for (size_t i = 1; i < d.informative.size(); ++i)
    CHECK(d.informative[i] > d.informative[i - 1]);
  for (int s : d.informative) {
    CHECK(s >= 0);
    CHECK(s < 64);
  }
}

TEST_CASE("an empty informative set is rejected") {
  TaskSpec t = planted(64, 0, 4, 1);
  CHECK_THROWS_AS(gen_planted_features(t), Error);
  t.informative = 65;
  CHECK_THROWS_AS(gen_planted_features(t), Error);
}

TEST_CASE("splits are disjoint and cover the declared counts") {
  TaskSpec t = planted(16, 4, 2, 5);
  t.train = 100;
  t.val = 50;
  t.test = 25;
  Dataset d = gen_planted_features(t);
  CHECK(d.x_train.shape == Shape{100, 16});
  CHECK(d.x_val.shape == Shape{50, 16});
  CHECK(d.x_test.shape == Shape{25, 16});
  // rows drawn from disjoint stretches of one pool: no duplicated rows
  auto row = [&](const Tensor& x, int r) {
    return std::vector<double>(x.values.begin() + r * 16, x.values.begin() + (r + 1) * 16);
  };
  CHECK(row(d.x_train, 0) != row(d.x_val, 0));
  CHECK(row(d.x_val, 0) != row(d.x_test, 0));
}

TEST_CASE("teacher targets are deterministic and noiseless at noise zero") {
  TaskSpec t;
  t.kind = TaskKind::teacher_student;
  t.input_dim = 8;
  t.output_dim = 4;
  t.teacher_blocks = 2;
  t.teacher_hidden = 8;
  t.teacher_dim = 8;
  t.train = 128;
  t.val = 32;
  t.test = 32;
  t.noise = 0.0;
  t.seed = 11;
  Dataset a = gen_teacher_student(t);
  Dataset b = gen_teacher_student(t);
  CHECK(a.x_train.values == b.x_train.values);
  CHECK(a.y_train.values == b.y_train.values);
  CHECK(a.teacher_blocks == 2);
  CHECK_FALSE(a.classification);

  t.noise = 0.1;
  Dataset noisy = gen_teacher_student(t);
  CHECK(noisy.y_train.values != a.y_train.values);
  CHECK(noisy.x_train.values == a.x_train.values);
}

TEST_CASE("a student with teacher capacity fits the targets to small error") {
  TaskSpec t;
  t.kind = TaskKind::teacher_student;
  t.input_dim = 8;
  t.output_dim = 4;
  t.teacher_blocks = 1;
  t.teacher_hidden = 8;
  t.teacher_dim = 8;
  t.train = 512;
  t.val = 64;
  t.test = 128;
  t.noise = 0.0;
  t.seed = 5;
  Dataset d = gen_teacher_student(t);

  ModelSpec model;
  model.input_dim = 8;
  LayerSpec stem;
  stem.kind = LayerSpec::Kind::linear;
  stem.name = "stem";
  stem.linear = {8, false, "", 0, 1};
  LayerSpec stage;
  stage.kind = LayerSpec::Kind::stage;
  stage.name = "stage";
  stage.stage.blocks = 2;
  stage.stage.hidden = 16;
  LayerSpec head;
  head.kind = LayerSpec::Kind::linear;
  head.name = "head";
  head.linear = {4, false, "", 0, 1};
  model.layers = {stem, stage, head};

  Hyperparams hp;
  hp.lr_weights = 1e-2;
  hp.retrain_epochs = 1000;
  hp.batch_size = 64;
  hp.seed = 3;
  RetrainResult rr = retrain(model, full_architecture(model), d, hp, 42);
  EvalMetrics train_fit = evaluate(rr.model, d.x_train, d.y_train, false, 64);
  CHECK(train_fit.loss < 1e-3);
}

TEST_CASE("csv datasets load, standardize and split deterministically") {
  std::string path = "/tmp/dms_test_data.csv";
  {
    std::ofstream out(path, std::ios::trunc);
    out << "f0,f1,f2,label\n";
    for (int i = 0; i < 30; ++i)
      out << 0.1 * i << "," << (i % 2 ? 5.0 : -5.0) << ",7.0," << i % 3 << "\n";
  }
  TaskSpec t;
  t.kind = TaskKind::csv_classification;
  t.csv_path = path;
  t.train = 20;
  t.val = 5;
  t.test = 5;
  t.seed = 2;
  Dataset a = load_csv_dataset(t);
  CHECK(a.x_train.shape == Shape{20, 3});
  CHECK(a.y_train.shape == Shape{20});

  // constant column standardizes to zeros under the variance floor
  for (int r = 0; r < 20; ++r) CHECK(a.x_train.values[static_cast<size_t>(r) * 3 + 2] == 0.0);

  // train columns have mean ~0, variance ~1
  for (int c = 0; c < 2; ++c) {
    double mean = 0;
    for (int r = 0; r < 20; ++r) mean += a.x_train.values[static_cast<size_t>(r) * 3 + c];
    CHECK(std::abs(mean / 20) < 1e-12);
  }

  Dataset b = load_csv_dataset(t);
  CHECK(a.x_train.values == b.x_train.values);
  CHECK(a.y_test.values == b.y_test.values);

  TaskSpec shuffled = t;
  shuffled.seed = 3;
  Dataset c = load_csv_dataset(shuffled);
  CHECK(a.y_train.values != c.y_train.values);
}

TEST_CASE("csv rejects ragged rows, bad cells and single-class labels by row") {
  std::string path = "/tmp/dms_test_bad.csv";
  TaskSpec t;
  t.kind = TaskKind::csv_classification;
  t.csv_path = path;
  t.train = 2;
  t.val = 1;
  t.test = 1;
  t.seed = 0;

  {
    std::ofstream out(path, std::ios::trunc);
    out << "a,b,label\n1,2,0\n3,4\n";
  }
  CHECK_THROWS_WITH_AS(load_csv_dataset(t), doctest::Contains("row 3"), Error);

  {
    std::ofstream out(path, std::ios::trunc);
    out << "a,b,label\n1,2,0\n3,oops,1\n";
  }
  CHECK_THROWS_WITH_AS(load_csv_dataset(t), doctest::Contains("row 3"), Error);

  {
    std::ofstream out(path, std::ios::trunc);
    out << "a,b,label\n1,2,1\n3,4,1\n5,6,1\n7,8,1\n";
  }
  CHECK_THROWS_WITH_AS(load_csv_dataset(t), doctest::Contains("single class"), Error);

  {
    std::ofstream out(path, std::ios::trunc);
    out << "a,b,label\n1,2,0\n3,4,1\n";
  }
  CHECK_THROWS_AS(load_csv_dataset(t), Error);  // splits exceed rows
}

TEST_CASE("a three-row toy file loads into (3, D) tensors") {
  std::string path = "/tmp/dms_test_tiny.csv";
  {
    std::ofstream out(path, std::ios::trunc);
    out << "a,b,label\n1,2,0\n3,4,1\n5,6,0\n";
  }
  TaskSpec t;
  t.kind = TaskKind::csv_classification;
  t.csv_path = path;
  t.train = 1;
  t.val = 1;
  t.test = 1;
  t.seed = 1;
  Dataset d = load_csv_dataset(t);
  CHECK(d.x_train.shape == Shape{1, 2});
  CHECK(d.x_val.shape == Shape{1, 2});
  CHECK(d.x_test.shape == Shape{1, 2});
}
