#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dms/checkpoint.hpp"
#include "dms/cli.hpp"
#include "dms/config.hpp"
#include "dms/error.hpp"
#include "dms/search.hpp"
#include "doctest.h"

using namespace dms;
namespace fs = std::filesystem;

namespace {

const char* kMinimalConfig = R"({
  "schema": "dms-run/1",
  "pipeline": "np",
  "seed": 3,
  "model": {
    "input_dim": 16,
    "input_slot": "in",
    "layers": [
      {"type": "linear", "name": "fc1", "out_features": 32, "relu": true, "width_slot": "h"},
      {"type": "linear", "name": "head", "out_features": 3}
    ]
  },
  "task": {
    "kind": "planted_features",
    "input_dim": 16,
    "classes": 3,
    "train": 256,
    "val": 64,
    "test": 64,
    "informative": 4,
    "noise": 0.05,
    "seed": 5
  },
  "resource": {"kind": "macs", "target_fraction": 0.5}
})";

std::string write_temp(const std::string& name, const std::string& text) {
  std::string path = "/tmp/" + name;
  std::ofstream out(path, std::ios::trunc);
  out << text;
  return path;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::path("/tmp") / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("a minimal config fills in the documented defaults") {
  RunConfig cfg = parse_config_text(kMinimalConfig, "inline");
  CHECK(cfg.pipeline.hp.lambda_resource == 1.0);
  CHECK(cfg.pipeline.hp.lr_structure == 5e-3);
  CHECK(cfg.pipeline.hp.lr_weights == 1e-3);
  CHECK(cfg.pipeline.hp.decay == 0.99);
  CHECK(cfg.pipeline.hp.search_epochs == 10);
  CHECK(cfg.pipeline.hp.width_only_epochs == 2);   // 20% of the search epochs
  CHECK(cfg.pipeline.hp.retrain_epochs == 100);    // 10x the search epochs
  CHECK(cfg.pipeline.hp.batch_size == 128);
  CHECK(cfg.pipeline.rank_normalize);

  std::string echoed = echo_config(cfg);
  CHECK(echoed.find("\"lambda_resource\": 1.0") != std::string::npos);
  CHECK(echoed.find("\"lr_structure\": 0.005") != std::string::npos);
  CHECK(echoed.find("\"decay\": 0.99") != std::string::npos);
}

TEST_CASE("parse, echo, parse is the identity") {
  RunConfig first = parse_config_text(kMinimalConfig, "inline");
  std::string echo1 = echo_config(first);
  RunConfig second = parse_config_text(echo1, "echo");
  std::string echo2 = echo_config(second);
  CHECK(echo1 == echo2);
}

TEST_CASE("unknown keys are fatal and carry their path") {
  std::string bad = kMinimalConfig;
  bad.replace(bad.find("\"seed\": 3"), 9, "\"seed\": 3, \"lr_structur\": 0.01");
  CHECK_THROWS_WITH_AS(parse_config_text(bad, "inline"), doctest::Contains("lr_structur"), Error);

  std::string bad_nested = kMinimalConfig;
  bad_nested.replace(bad_nested.find("\"target_fraction\": 0.5"), 22,
                     "\"target_fraction\": 0.5, \"targe_value\": 2");
  CHECK_THROWS_WITH_AS(parse_config_text(bad_nested, "inline"),
                       doctest::Contains("config.resource"), Error);
}

TEST_CASE("missing keys, bad types and bad enums are rejected with paths") {
  std::string no_model = R"({"schema": "dms-run/1", "pipeline": "np", "seed": 1})";
  CHECK_THROWS_WITH_AS(parse_config_text(no_model, "inline"), doctest::Contains("model"), Error);

  std::string bad_pipe = kMinimalConfig;
  bad_pipe.replace(bad_pipe.find("\"np\""), 4, "\"pq\"");
  CHECK_THROWS_WITH_AS(parse_config_text(bad_pipe, "inline"), doctest::Contains("pq"), Error);

  std::string bad_type = kMinimalConfig;
  bad_type.replace(bad_type.find("\"seed\": 3"), 9, "\"seed\": \"three\"");
  CHECK_THROWS_WITH_AS(parse_config_text(bad_type, "inline"), doctest::Contains("seed"), Error);

  std::string bad_schema = kMinimalConfig;
  bad_schema.replace(bad_schema.find("dms-run/1"), 9, "dms-run/9");
  CHECK_THROWS_AS(parse_config_text(bad_schema, "inline"), Error);
}

TEST_CASE("pipeline p- without a checkpoint is rejected at parse time") {
  std::string pminus = kMinimalConfig;
  pminus.replace(pminus.find("\"np\""), 4, "\"p-\"");
  CHECK_THROWS_WITH_AS(parse_config_text(pminus, "inline"), doctest::Contains("checkpoint"), Error);
}

TEST_CASE("architecture files round-trip") {
  ArchitectureDescription desc;
  desc.source = "test run";
  desc.seed = 42;
  desc.final_a = {{"in", 0.25}, {"h", 0.5}};
  desc.entries.push_back({"in", 16, 3, {0, 5, 9}});
  desc.entries.push_back({"h", 32, 2, {7, 8}});
  std::string path = "/tmp/dms_test_arch.txt";
  write_architecture(desc, path);
  ArchitectureDescription back = read_architecture(path);
  CHECK(back.source == "test run");
  CHECK(back.seed == 42);
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].name == "in");
  CHECK(back.entries[0].n_max == 16);
  CHECK(back.entries[0].retained == std::vector<int>{0, 5, 9});
  CHECK(back.entries[1].retained == std::vector<int>{7, 8});
  REQUIRE(back.final_a.size() == 2);
  CHECK(back.final_a[1].second == 0.5);

  std::string header = format_architecture(desc);
  CHECK(header.find("name, N_max, k_retained, retained_indices") != std::string::npos);
}

TEST_CASE("metrics lines round-trip through the reader") {
  EpochMetrics m;
  m.epoch = 3;
  m.phase = "joint";
  m.task_loss = 0.5;
  m.resource_loss = 0.125;
  m.r_c = 1000.0;
  m.r_t = 900.0;
  m.a_values = {{"in", 0.25}, {"h", 0.125}};
  std::string path = write_temp("dms_test_metrics.jsonl", format_metrics_line(m) + "\n");
  auto rows = read_metrics(path);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].epoch == 3);
  CHECK(rows[0].r_t == 900.0);
  REQUIRE(rows[0].a_values.size() == 2);
  CHECK(rows[0].a_values[0].first == "in");
}

TEST_CASE("latency model files round-trip") {
  LatencyModel model;
  LatencyFit f;
  f.layer_id = "fc1";
  f.latency_max = 4e-3;
  f.coeffs = {1.0, -0.5, -0.4, 0.05, 0.3, 0.01};
  f.mse = 1e-9;
  f.r2 = 0.999;
  model.layers.push_back(f);
  std::string path = "/tmp/dms_test_latfit.json";
  write_latency_model(model, path);
  LatencyModel back = read_latency_model(path);
  REQUIRE(back.layers.size() == 1);
  CHECK(back.layers[0].latency_max == 4e-3);
  CHECK(back.layers[0].coeffs == f.coeffs);
}

TEST_CASE("the search subcommand writes a complete run directory") {
  std::string config = write_temp("dms_cli_config.json", kMinimalConfig);
  // shrink the run so the test stays fast
  RunConfig cfg = parse_config_text(kMinimalConfig, "inline");
  cfg.pipeline.hp.search_epochs = 3;
  cfg.pipeline.hp.width_only_epochs = 1;
  cfg.pipeline.hp.retrain_epochs = 3;
  cfg.pipeline.hp.batch_size = 64;
  cfg.pipeline.hp.lr_structure = 5e-2;  // few steps, so drive the ratios hard
  cfg.pipeline.target_fraction = 0.8;
  config = write_temp("dms_cli_config.json", echo_config(cfg));

  fs::path out = fresh_dir("dms_cli_run");
  int rc = cli::run_command({"search", "--config", config, "--out", out.string()});
  CHECK(rc == 0);
  for (const char* f : {"config_echo.json", "architecture.txt", "metrics.jsonl",
                        "search_state.ckpt", "model.ckpt", "eval.json"})
    CHECK(fs::exists(out / f));
  CHECK_FALSE(fs::exists(out / ".dms.lock"));  // released on exit

  // echoed config reparses to the same echo
  RunConfig echoed = parse_config_text(slurp(out / "config_echo.json"), "echo");
  CHECK(echo_config(echoed) == slurp(out / "config_echo.json"));

  // metrics cover the search epochs plus retraining
  auto rows = read_metrics((out / "metrics.jsonl").string());
  CHECK(rows.size() == 3 + 3);

  SUBCASE("eval rereads the saved artifacts") {
    CHECK(cli::run_command({"eval", "--run", out.string()}) == 0);
  }

  SUBCASE("export rebuilds the architecture from the checkpoint") {
    std::string before = slurp(out / "architecture.txt");
    CHECK(cli::run_command({"export", "--run", out.string()}) == 0);
    CHECK(slurp(out / "architecture.txt") == before);
  }

  SUBCASE("retrain consumes the run directory") {
    fs::path out2 = fresh_dir("dms_cli_retrain");
    CHECK(cli::run_command({"retrain", "--run", out.string(), "--out", out2.string()}) == 0);
    CHECK(fs::exists(out2 / "model.ckpt"));
    CHECK(fs::exists(out2 / "eval.json"));
  }

  SUBCASE("report output is byte-identical across invocations") {
    fs::path t1 = fs::path("/tmp") / "dms_report1.txt";
    fs::path t2 = fs::path("/tmp") / "dms_report2.txt";
    CHECK(cli::run_command({"report", "--run", out.string(), "--out", t1.string()}) == 0);
    CHECK(cli::run_command({"report", "--run", out.string(), "--out", t2.string()}) == 0);
    CHECK(slurp(t1) == slurp(t2));
    CHECK(slurp(t1).find("pipeline") != std::string::npos);
  }

  SUBCASE("a held lock rejects concurrent runs into the same directory") {
    std::ofstream lock(out / ".dms.lock");
    lock.close();
    CHECK(cli::run_command({"search", "--config", config, "--out", out.string()}) == 1);
    fs::remove(out / ".dms.lock");
  }
}

TEST_CASE("fit-latency writes a loadable model") {
  std::ostringstream table;
  table << "layer_id, a_in, a_out, latency_seconds\n";
  for (double ai = 0.0; ai <= 0.81; ai += 0.2)
    for (double ao = 0.0; ao <= 0.81; ao += 0.2)
      table << "fc1, " << ai << ", " << ao << ", " << 4e-3 * (1.0 - 0.4 * ai - 0.4 * ao + 0.2 * ai * ao)
            << "\n";
  std::string tpath = write_temp("dms_cli_table.csv", table.str());
  std::string fpath = "/tmp/dms_cli_fit.json";
  CHECK(cli::run_command({"fit-latency", "--table", tpath, "--out", fpath}) == 0);
  LatencyModel model = read_latency_model(fpath);
  REQUIRE(model.layers.size() == 1);
  CHECK(model.layers[0].r2 > 0.999);
}

TEST_CASE("the index importance metric is selectable per model") {
  std::string cfg = kMinimalConfig;
  const std::string probe = "\"input_slot\": \"in\",";
  cfg.replace(cfg.find(probe), probe.size(), probe + " \"importance_metric\": \"index\",");
  RunConfig parsed = parse_config_text(cfg, "inline");
  CHECK(parsed.pipeline.model.metric == ImportanceMetric::index);
  Network net = build_supernet(parsed.pipeline.model, 0);
  for (const TopkOperator& op : net.ops) {
    CHECK(op.metric == ImportanceMetric::index);
    for (size_t i = 1; i < op.importance.size(); ++i)
      CHECK(op.importance[i] < op.importance[i - 1]);
  }
  // a short index-metric search runs and keeps the lowest indices
  parsed.pipeline.hp.search_epochs = 2;
  parsed.pipeline.hp.width_only_epochs = 0;
  parsed.pipeline.hp.retrain_epochs = 1;
  parsed.pipeline.hp.lr_structure = 5e-2;
  parsed.pipeline.target_fraction = 0.8;
  RunResult r = run_pipeline(parsed.pipeline);
  const ArchEntry* h = r.arch.find("h");
  for (size_t i = 0; i < h->retained.size(); ++i) CHECK(h->retained[i] == static_cast<int>(i));

  std::string bad = kMinimalConfig;
  bad.replace(bad.find(probe), probe.size(), probe + " \"importance_metric\": \"fisher\",");
  CHECK_THROWS_WITH_AS(parse_config_text(bad, "inline"), doctest::Contains("fisher"), Error);
}

TEST_CASE("latency configs load their fitted model at parse time") {
  std::ostringstream table;
  table << "layer_id, a_in, a_out, latency_seconds\n";
  for (const char* id : {"fc1", "head"})
    for (double ai = 0.0; ai <= 0.81; ai += 0.2)
      for (double ao = 0.0; ao <= 0.81; ao += 0.2)
        table << id << ", " << ai << ", " << ao << ", "
              << 2e-3 * (1.0 - 0.4 * ai - 0.4 * ao + 0.2 * ai * ao) << "\n";
  std::string tpath = write_temp("dms_cli_lat_table.csv", table.str());
  std::string fpath = "/tmp/dms_cli_lat_fit.json";
  REQUIRE(cli::run_command({"fit-latency", "--table", tpath, "--out", fpath}) == 0);

  std::string cfg = kMinimalConfig;
  const std::string macs_resource = "{\"kind\": \"macs\", \"target_fraction\": 0.5}";
  cfg.replace(cfg.find(macs_resource), macs_resource.size(),
              "{\"kind\": \"latency\", \"target_fraction\": 0.5, \"latency_model\": \"" + fpath +
                  "\"}");
  RunConfig parsed = parse_config_text(cfg, "inline");
  CHECK(parsed.pipeline.resource_kind == ResourceKind::latency);
  REQUIRE(parsed.pipeline.latency.layers.size() == 2);

  std::string no_model = kMinimalConfig;
  no_model.replace(no_model.find("\"macs\""), 6, "\"latency\"");
  CHECK_THROWS_WITH_AS(parse_config_text(no_model, "inline"), doctest::Contains("latency_model"),
                       Error);
}

TEST_CASE("gradcheck subcommand passes its own thresholds") {
  CHECK(cli::run_command({"gradcheck", "--seeds", "5"}) == 0);
}

TEST_CASE("unknown subcommands and bad flags exit nonzero") {
  CHECK(cli::run_command({"frobnicate"}) != 0);
  CHECK(cli::run_command({}) != 0);
  CHECK(cli::run_command({"search", "--config", "/nonexistent.json", "--out", "/tmp/dms_x"}) == 1);
}

TEST_CASE("a validation failure surfaces as exit code 1") {
  std::string bad = kMinimalConfig;
  bad.replace(bad.find("\"informative\": 4"), 16, "\"informative\": 64000");
  std::string path = write_temp("dms_cli_bad.json", bad);
  fs::path out = fresh_dir("dms_cli_bad_run");
  CHECK(cli::run_command({"search", "--config", path, "--out", out.string()}) == 1);
}
