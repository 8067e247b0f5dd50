#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "dms/error.hpp"
#include "dms/network.hpp"
#include "doctest.h"

using namespace dms;

namespace {

ModelSpec mlp_spec(int in, int hidden, int out, const std::string& hidden_slot) {
  ModelSpec spec;
  spec.input_dim = in;
  LayerSpec l1;
  l1.kind = LayerSpec::Kind::linear;
  l1.name = "fc1";
  l1.linear = {hidden, true, hidden_slot, 0, 1};
  LayerSpec l2;
  l2.kind = LayerSpec::Kind::linear;
  l2.name = "head";
  l2.linear = {out, false, "", 0, 1};
  spec.layers = {l1, l2};
  return spec;
}

Tensor random_batch(int rows, int cols, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0, 1);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.values) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("two-layer MLP with searchable hidden gets one width operator") {
  ModelSpec spec = mlp_spec(784, 256, 10, "hidden");
  Network net = build_supernet(spec, 0);
  REQUIRE(net.ops.size() == 1);
  CHECK(net.ops[0].name == "hidden");
  CHECK(net.ops[0].n == 256);
  CHECK(net.ops[0].kind == DimensionKind::width);
  CHECK(net.ops[0].lambda == 256.0);
}

TEST_CASE("a stage of eight blocks gets a depth operator with lambda 4N") {
  ModelSpec spec;
  spec.input_dim = 16;
  LayerSpec stem;
  stem.kind = LayerSpec::Kind::linear;
  stem.linear = {16, false, "", 0, 1};
  LayerSpec stage;
  stage.kind = LayerSpec::Kind::stage;
  stage.name = "stage";
  stage.stage.blocks = 8;
  stage.stage.hidden = 32;
  stage.stage.depth_slot = "depth";
  LayerSpec head;
  head.kind = LayerSpec::Kind::linear;
  head.linear = {4, false, "", 0, 1};
  spec.layers = {stem, stage, head};
  Network net = build_supernet(spec, 0);
  REQUIRE(net.ops.size() == 1);
  CHECK(net.ops[0].n == 8);
  CHECK(net.ops[0].kind == DimensionKind::depth);
  CHECK(net.ops[0].lambda == 32.0);
}

TEST_CASE("grouped slots share a single operator") {
  ModelSpec spec;
  spec.input_dim = 32;
  LayerSpec l1;
  l1.kind = LayerSpec::Kind::linear;
  l1.name = "a";
  l1.linear = {64, true, "wa", 0, 1};
  LayerSpec l2;
  l2.kind = LayerSpec::Kind::linear;
  l2.name = "b";
  l2.linear = {64, true, "wb", 0, 1};
  LayerSpec l3;
  l3.kind = LayerSpec::Kind::linear;
  l3.name = "head";
  l3.linear = {4, false, "", 0, 1};
  spec.layers = {l1, l2, l3};
  spec.groups = {{"wa", "wb"}};
  Network net = build_supernet(spec, 0);
  REQUIRE(net.ops.size() == 1);
  CHECK(net.ops[0].name == "wa");
  auto& fc1 = std::get<LinearState>(net.layers[0]);
  auto& fc2 = std::get<LinearState>(net.layers[1]);
  CHECK(fc1.out_op == 0);
  CHECK(fc2.out_op == 0);
  CHECK(fc2.in_op == 0);
}

TEST_CASE("group members with mismatched sizes are rejected") {
  ModelSpec spec;
  spec.input_dim = 32;
  LayerSpec l1;
  l1.kind = LayerSpec::Kind::linear;
  l1.linear = {64, true, "wa", 0, 1};
  LayerSpec l2;
  l2.kind = LayerSpec::Kind::linear;
  l2.linear = {48, true, "wb", 0, 1};
  LayerSpec head;
  head.kind = LayerSpec::Kind::linear;
  head.linear = {4, false, "", 0, 1};
  spec.layers = {l1, l2, head};
  spec.groups = {{"wa", "wb"}};
  CHECK_THROWS_AS(build_supernet(spec, 0), Error);
}

TEST_CASE("zero-size searchable dimension is rejected") {
  ModelSpec spec = mlp_spec(8, 16, 2, "h");
  spec.layers[0].linear.out_features = 0;
  CHECK_THROWS_AS(build_supernet(spec, 0), Error);
}

TEST_CASE("identity masks reproduce the plain forward bitwise, gradients included") {
  ModelSpec spec = mlp_spec(12, 24, 3, "h");
  spec.input_slot = "in";
  Network net = build_supernet(spec, 3);
  Tensor x = random_batch(5, 12, 9);

  Graph g1;
  ForwardTrace plain = net.forward(g1, x, MaskMode::plain);
  Tensor w_plain = net.params()[0]->bound;
  Tensor g_plain = g1.backward(g1.mean(g1.mul(plain.output, plain.output))).wrt(w_plain);

  Graph g2;
  ForwardTrace gated = net.forward(g2, x, MaskMode::identity);
  Tensor w_gated = net.params()[0]->bound;
  Tensor g_gated = g2.backward(g2.mean(g2.mul(gated.output, gated.output))).wrt(w_gated);

  REQUIRE(plain.output.values.size() == gated.output.values.size());
  for (size_t i = 0; i < plain.output.values.size(); ++i)
    CHECK(plain.output.values[i] == gated.output.values[i]);
  for (size_t i = 0; i < g_plain.values.size(); ++i) CHECK(g_plain.values[i] == g_gated.values[i]);
}

TEST_CASE("fully closed depth masks reduce a stage to its skip path") {
  ModelSpec spec;
  spec.input_dim = 6;
  LayerSpec stage;
  stage.kind = LayerSpec::Kind::stage;
  stage.name = "stage";
  stage.stage.blocks = 3;
  stage.stage.hidden = 8;
  stage.stage.depth_slot = "depth";
  LayerSpec head;
  head.kind = LayerSpec::Kind::linear;
  head.name = "head";
  head.linear = {6, false, "", 0, 1};
  spec.layers = {stage, head};
  Network net = build_supernet(spec, 1);
  // saturate the sigmoid far below every rank
  net.find_op("depth")->lambda = 1e4;
  net.find_op("depth")->a = 1.0;

  Tensor x = random_batch(4, 6, 2);
  Graph g;
  ForwardTrace tr = net.forward(g, x, MaskMode::soft);
  // stage output == input, so the model is just the head applied to x
  auto& head_state = std::get<LinearState>(net.layers[1]);
  Graph g2;
  Tensor ref = g2.add(g2.matmul(g2.constant(x), g2.constant(head_state.weight.value), false, true),
                      g2.reshape(g2.constant(head_state.bias.value), {1, 6}));
  for (size_t i = 0; i < ref.values.size(); ++i)
    CHECK(tr.output.values[i] == doctest::Approx(ref.values[i]).epsilon(1e-12));
}

TEST_CASE("masked forward matches an independent straight-line evaluation") {
  ModelSpec spec = mlp_spec(10, 14, 3, "h");
  spec.input_slot = "in";
  Network net = build_supernet(spec, 0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0, 1);
  for (TopkOperator& op : net.ops) {
    op.a = 0.5;
    for (double& c : op.importance) c = unit(rng);
  }
  Tensor x = random_batch(6, 10, 11);

  Graph g;
  ForwardTrace tr = net.forward(g, x, MaskMode::soft);

  // plain-loop reference, no graph machinery
  auto mask_in = soft_mask(*net.find_op("in"));
  auto mask_h = soft_mask(*net.find_op("h"));
  auto& fc1 = std::get<LinearState>(net.layers[0]);
  auto& head = std::get<LinearState>(net.layers[1]);
  for (int r = 0; r < 6; ++r) {
    std::vector<double> masked_x(10), hidden(14), out(3);
    for (int c = 0; c < 10; ++c) masked_x[c] = x.values[r * 10 + c] * mask_in[c];
    for (int hidx = 0; hidx < 14; ++hidx) {
      double acc = fc1.bias.value.values[hidx];
      for (int c = 0; c < 10; ++c) acc += fc1.weight.value.values[hidx * 10 + c] * masked_x[c];
      hidden[hidx] = std::max(0.0, acc) * mask_h[hidx];
    }
    for (int o = 0; o < 3; ++o) {
      double acc = head.bias.value.values[o];
      for (int hidx = 0; hidx < 14; ++hidx) acc += head.weight.value.values[o * 14 + hidx] * hidden[hidx];
      out[o] = acc;
    }
    for (int o = 0; o < 3; ++o)
      CHECK(tr.output.values[r * 3 + o] == doctest::Approx(out[o]).epsilon(1e-12));
  }
}

TEST_CASE("export with a = 0 reproduces the supernet weights bitwise") {
  ModelSpec spec = mlp_spec(10, 14, 3, "h");
  Network net = build_supernet(spec, 7);
  auto [desc, discrete] = export_pruned(net);
  CHECK(desc.find("h")->k == 14);
  auto supernet_params = net.params();
  auto discrete_params = discrete.params();
  REQUIRE(supernet_params.size() == discrete_params.size());
  for (size_t i = 0; i < supernet_params.size(); ++i) {
    REQUIRE(supernet_params[i]->value.shape == discrete_params[i]->value.shape);
    for (size_t j = 0; j < supernet_params[i]->value.values.size(); ++j)
      CHECK(supernet_params[i]->value.values[j] == discrete_params[i]->value.values[j]);
  }
}

TEST_CASE("export keeps round((1-a)N) units") {
  ModelSpec spec = mlp_spec(10, 256, 3, "h");
  Network net = build_supernet(spec, 7);
  net.find_op("h")->a = 0.75;
  auto [desc, discrete] = export_pruned(net);
  CHECK(desc.find("h")->k == 64);
  CHECK(std::get<LinearState>(discrete.layers[0]).weight.value.shape == Shape{64, 10});
  CHECK(std::get<LinearState>(discrete.layers[1]).weight.value.shape == Shape{3, 64});
}

TEST_CASE("exported model matches the soft forward once masks saturate") {
  ModelSpec spec = mlp_spec(10, 32, 3, "h");
  spec.input_slot = "in";
  Network net = build_supernet(spec, 13);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0, 1);
  for (TopkOperator& op : net.ops) {
    for (double& c : op.importance) c = unit(rng);
    // sit between rank slots so round((1-a)N) equals the saturated-on count
    op.a = (std::floor(0.4 * op.units()) + 0.7) / op.units();
    op.lambda = 200.0 * op.units();  // push every mask out of the fuzzy zone
  }
  Tensor x = random_batch(8, 10, 21);

  Graph g;
  ForwardTrace soft = net.forward(g, x, MaskMode::soft);
  auto [desc, discrete] = export_pruned(net);
  Graph g2;
  ForwardTrace hard = discrete.forward(g2, x, MaskMode::plain);
  REQUIRE(soft.output.values.size() == hard.output.values.size());
  double max_diff = 0;
  for (size_t i = 0; i < soft.output.values.size(); ++i)
    max_diff = std::max(max_diff, std::abs(soft.output.values[i] - hard.output.values[i]));
  CHECK(max_diff < 1e-6);
}

TEST_CASE("export monotonicity: larger a never yields a larger k") {
  ModelSpec spec = mlp_spec(10, 64, 3, "h");
  Network net = build_supernet(spec, 3);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unit(0, 1);
  for (double& c : net.find_op("h")->importance) c = unit(rng);
  int prev_k = 65;
  for (double a = 0.0; a <= 1.0001; a += 0.01) {
    net.find_op("h")->a = std::min(a, 1.0);
    auto [desc, discrete] = export_pruned(net);
    int k = desc.find("h")->k;
    CHECK(k <= prev_k);
    prev_k = k;
  }
}

TEST_CASE("group members prune to identical retained sets") {
  ModelSpec spec;
  spec.input_dim = 16;
  LayerSpec l1;
  l1.kind = LayerSpec::Kind::linear;
  l1.name = "a";
  l1.linear = {32, true, "wa", 0, 1};
  LayerSpec l2;
  l2.kind = LayerSpec::Kind::linear;
  l2.name = "b";
  l2.linear = {32, true, "wb", 0, 1};
  LayerSpec head;
  head.kind = LayerSpec::Kind::linear;
  head.name = "head";
  head.linear = {4, false, "", 0, 1};
  spec.layers = {l1, l2, head};
  spec.groups = {{"wa", "wb"}};
  Network net = build_supernet(spec, 1);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> unit(0, 1);
  for (double& c : net.ops[0].importance) c = unit(rng);
  net.ops[0].a = 0.5;
  auto [desc, discrete] = export_pruned(net);
  // one shared entry drives both consumers: fc1 rows, fc2 rows and cols
  auto& fc1 = std::get<LinearState>(discrete.layers[0]);
  auto& fc2 = std::get<LinearState>(discrete.layers[1]);
  int k = desc.find("wa")->k;
  CHECK(fc1.weight.value.shape == Shape{k, 16});
  CHECK(fc2.weight.value.shape == Shape{k, k});
}

TEST_CASE("resource counting oracles for a lone linear layer") {
  ModelSpec spec;
  spec.input_dim = 100;
  LayerSpec l;
  l.kind = LayerSpec::Kind::linear;
  l.name = "only";
  l.linear = {200, false, "", 0, 1};
  spec.layers = {l};
  ArchitectureDescription full = full_architecture(spec);
  CHECK(count_discrete_resource(spec, full, ResourceKind::macs) == 20000.0);
  CHECK(count_discrete_resource(spec, full, ResourceKind::params) == 20200.0);
  CHECK_THROWS_AS(count_discrete_resource(spec, full, ResourceKind::latency), Error);
}

TEST_CASE("counting respects the one-unit floor") {
  ModelSpec spec = mlp_spec(10, 64, 3, "h");
  Network net = build_supernet(spec, 3);
  net.find_op("h")->a = 1.0;
  auto [desc, discrete] = export_pruned(net);
  CHECK(desc.find("h")->k == 1);
  CHECK(count_discrete_resource(spec, desc, ResourceKind::macs) == 10.0 + 3.0);
}

TEST_CASE("attention masks follow the head and dim axes") {
  ModelSpec spec;
  spec.input_dim = 12;
  spec.seq_len = 5;
  LayerSpec att;
  att.kind = LayerSpec::Kind::attention;
  att.name = "attn";
  att.attention.heads = 4;
  att.attention.head_dim = 6;
  att.attention.head_slot = "heads";
  att.attention.qk_slot = "qk";
  att.attention.v_slot = "v";
  LayerSpec head;
  head.kind = LayerSpec::Kind::linear;
  head.name = "head";
  head.linear = {3, false, "", 0, 1};
  spec.layers = {att, head};
  Network net = build_supernet(spec, 5);
  REQUIRE(net.ops.size() == 3);
  CHECK(net.find_op("heads")->lambda == 16.0);  // 4N for head counts
  CHECK(net.find_op("qk")->lambda == 6.0);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> dist(0, 1);
  Tensor x = Tensor::zeros({2, 5, 12});
  for (double& v : x.values) v = dist(rng);

  // identity masks match the plain forward exactly
  Graph g1;
  ForwardTrace plain = net.forward(g1, x, MaskMode::plain);
  Graph g2;
  ForwardTrace gated = net.forward(g2, x, MaskMode::identity);
  for (size_t i = 0; i < plain.output.values.size(); ++i)
    CHECK(plain.output.values[i] == gated.output.values[i]);

  // pruning heads then exporting matches the saturated soft forward
  std::uniform_real_distribution<double> unit(0, 1);
  for (TopkOperator& op : net.ops) {
    for (double& c : op.importance) c = unit(rng);
    op.a = (std::floor(0.4 * op.units()) + 0.7) / op.units();
    op.lambda = 500.0 * op.units();
  }
  Graph g3;
  ForwardTrace soft = net.forward(g3, x, MaskMode::soft);
  auto [desc, discrete] = export_pruned(net);
  CHECK(desc.find("heads")->k == 2);  // round((1 - 1.7/4) * 4)
  Graph g4;
  ForwardTrace hard = discrete.forward(g4, x, MaskMode::plain);
  double max_diff = 0;
  for (size_t i = 0; i < soft.output.values.size(); ++i)
    max_diff = std::max(max_diff, std::abs(soft.output.values[i] - hard.output.values[i]));
  CHECK(max_diff < 1e-6);
}

TEST_CASE("task gradient reaches a when masks sit in the fuzzy zone") {
  ModelSpec spec = mlp_spec(10, 16, 3, "h");
  Network net = build_supernet(spec, 19);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> unit(0, 1);
  for (double& c : net.find_op("h")->importance) c = unit(rng);
  net.find_op("h")->a = 0.5;
  Tensor x = random_batch(4, 10, 3);
  Graph g;
  ForwardTrace tr = net.forward(g, x, MaskMode::soft);
  Tensor loss = g.mean(g.mul(tr.output, tr.output));
  double ga = g.backward(loss).wrt(tr.masks[0].a).values[0];
  CHECK(ga != 0.0);
}
