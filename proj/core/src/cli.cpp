#include "dms/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dms/checkpoint.hpp"
#include "dms/config.hpp"
#include "dms/search.hpp"
#include "json.hpp"

namespace dms::cli {

namespace {

namespace fs = std::filesystem;

// One run per directory; the lock file rejects concurrent writers.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".dms.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    require(fd_ >= 0, "output directory '" + dir.string() +
                          "' is locked by another run (remove " + path_.string() +
                          " if that run is dead)");
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write '" + path.string() + "'");
  out << text;
  require(out.good(), "failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_search(const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg = parse_config(config_path);
  fs::path out(out_dir);
  DirLock lock(out);
  write_text(out / "config_echo.json", echo_config(cfg));

  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  require(metrics.good(), "cannot write metrics under '" + out_dir + "'");
  RunResult result = run_pipeline(cfg.pipeline, [&](const EpochMetrics& m) {
    metrics << format_metrics_line(m) << "\n";
    metrics.flush();
  });
  for (const std::string& e : result.events) std::cerr << "event: " << e << "\n";

  ArchitectureDescription arch = result.arch;
  arch.source = (out / "config_echo.json").string();
  write_architecture(arch, (out / "architecture.txt").string());
  save_search_state(result.supernet, result.final_state, (out / "search_state.ckpt").string());
  save_weights(result.final_model, (out / "model.ckpt").string());
  write_text(out / "eval.json",
             format_eval(result.final_eval, result.exported_resource, result.r_final));

  std::cout << "r_supernet " << result.r_supernet << "\n";
  std::cout << "r_final " << result.r_final << "\n";
  std::cout << "exported " << result.exported_resource << "\n";
  std::cout << "eval_loss " << result.final_eval.loss << "\n";
  if (std::isfinite(result.final_eval.accuracy))
    std::cout << "eval_accuracy " << result.final_eval.accuracy << "\n";
  if (!result.target_reached) {
    std::cerr << "resource target missed: final r_c " << result.final_r_c << ", exported "
              << result.exported_resource << " > 1.02 * " << result.r_final << "\n";
    return 2;
  }
  return 0;
}

int cmd_retrain(const std::string& run_dir, const std::string& out_dir) {
  fs::path run(run_dir);
  RunConfig cfg = parse_config_text(read_text(run / "config_echo.json"), run_dir);
  ArchitectureDescription arch = read_architecture((run / "architecture.txt").string());
  Dataset data = make_dataset(cfg.pipeline.task);

  fs::path out(out_dir);
  DirLock lock(out);
  RetrainResult rr = retrain(cfg.pipeline.model, arch, data, cfg.pipeline.hp,
                             mix_seed(cfg.pipeline.hp.seed, 2));
  write_text(out / "config_echo.json", echo_config(cfg));
  write_architecture(arch, (out / "architecture.txt").string());
  std::ofstream metrics(out / "metrics.jsonl", std::ios::trunc);
  for (const EpochMetrics& m : rr.trace) metrics << format_metrics_line(m) << "\n";
  save_weights(rr.model, (out / "model.ckpt").string());
  ResourceModel rm;
  rm.kind = cfg.pipeline.resource_kind;
  rm.latency = cfg.pipeline.latency;
  double exported = discrete_consumption(cfg.pipeline.model, arch, rm);
  double r_final = cfg.pipeline.resolve_target(supernet_consumption(cfg.pipeline.model, rm));
  write_text(out / "eval.json", format_eval(rr.eval, exported, r_final));
  std::cout << "eval_loss " << rr.eval.loss << "\n";
  if (std::isfinite(rr.eval.accuracy)) std::cout << "eval_accuracy " << rr.eval.accuracy << "\n";
  return 0;
}

int cmd_eval(const std::string& run_dir) {
  fs::path run(run_dir);
  RunConfig cfg = parse_config_text(read_text(run / "config_echo.json"), run_dir);
  ArchitectureDescription arch = read_architecture((run / "architecture.txt").string());
  Dataset data = make_dataset(cfg.pipeline.task);
  Network model = build_discrete(cfg.pipeline.model, arch, 0);
  load_weights(model, (run / "model.ckpt").string());
  EvalMetrics eval = evaluate(model, data.x_test, data.y_test, data.classification,
                              cfg.pipeline.hp.batch_size);
  ResourceModel rm;
  rm.kind = cfg.pipeline.resource_kind;
  rm.latency = cfg.pipeline.latency;
  double exported = discrete_consumption(cfg.pipeline.model, arch, rm);
  double r_final = cfg.pipeline.resolve_target(supernet_consumption(cfg.pipeline.model, rm));
  std::cout << format_eval(eval, exported, r_final);
  return 0;
}

int cmd_export(const std::string& run_dir) {
  fs::path run(run_dir);
  RunConfig cfg = parse_config_text(read_text(run / "config_echo.json"), run_dir);
  Network net = build_supernet(cfg.pipeline.model, cfg.pipeline.hp.seed);
  net.rank_normalize = cfg.pipeline.rank_normalize;
  load_search_state(net, (run / "search_state.ckpt").string());
  auto [arch, discrete] = export_pruned(net, (run / "config_echo.json").string());
  arch.seed = cfg.pipeline.hp.seed;
  write_architecture(arch, (run / "architecture.txt").string());
  save_weights(discrete, (run / "model.ckpt").string());
  for (const ArchEntry& e : arch.entries)
    std::cout << e.name << " " << e.k << "/" << e.n_max << "\n";
  return 0;
}

int cmd_fit_latency(const std::string& table_path, const std::string& out_path) {
  LatencyTable table = load_latency_table(table_path);
  LatencyModel model = fit_latency_model(table);
  write_latency_model(model, out_path);
  for (const LatencyFit& f : model.layers) {
    std::printf("%s latency_max %.6g mse %.6g r2 %.6f\n", f.layer_id.c_str(), f.latency_max,
                f.mse, f.r2);
  }
  return 0;
}

int cmd_gradcheck(int seeds) {
  GradcheckReport report = gradcheck_suite(seeds);
  std::printf("max primitive relative error %.3e\n", report.max_primitive);
  std::printf("max composite relative error %.3e\n", report.max_composite);
  bool ok = report.max_primitive < 1e-5 && report.max_composite < 1e-4;
  std::printf("%s\n", ok ? "ok" : "FAILED");
  return ok ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_path) {
  std::ostringstream os;
  os << "run, pipeline, resource, exported, r_final, eval_loss, eval_accuracy\n";
  for (const std::string& dir : runs) {
    fs::path run(dir);
    RunConfig cfg = parse_config_text(read_text(run / "config_echo.json"), dir);
    nlohmann::json eval;
    try {
      eval = nlohmann::json::parse(read_text(run / "eval.json"));
    } catch (const std::exception& e) {
      fail(dir + "/eval.json: " + e.what());
    }
    char line[512];
    double acc = eval.contains("accuracy") ? eval.at("accuracy").get<double>() : std::nan("");
    std::snprintf(line, sizeof line, "%s, %s, %s, %.6g, %.6g, %.6g, %s\n",
                  run.filename().string().c_str(), to_string(cfg.pipeline.pipeline).c_str(),
                  to_string(cfg.pipeline.resource_kind).c_str(),
                  eval.at("exported_resource").get<double>(), eval.at("r_final").get<double>(),
                  eval.at("loss").get<double>(),
                  std::isfinite(acc) ? std::to_string(acc).c_str() : "-");
    os << line;
  }
  if (out_path.empty())
    std::cout << os.str();
  else
    write_text(out_path, os.str());
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"differentiable model scaling"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir, table_path, out_path;
  int seeds = 100;
  std::vector<std::string> runs;

  CLI::App* search = app.add_subcommand("search", "run a search pipeline from a config");
  search->add_option("--config", config_path, "run config (json)")->required();
  search->add_option("--out", out_dir, "output directory")->required();

  CLI::App* retrain_cmd = app.add_subcommand("retrain", "retrain a searched architecture");
  retrain_cmd->add_option("--run", run_dir, "search run directory")->required();
  retrain_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a saved model on its test split");
  eval_cmd->add_option("--run", run_dir, "run directory")->required();

  CLI::App* export_cmd = app.add_subcommand("export", "re-export the architecture from a checkpoint");
  export_cmd->add_option("--run", run_dir, "run directory")->required();

  CLI::App* fit = app.add_subcommand("fit-latency", "fit per-layer latency quadratics");
  fit->add_option("--table", table_path, "latency table (csv)")->required();
  fit->add_option("--out", out_path, "fitted model output (json)")->required();

  CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck_cmd->add_option("--seeds", seeds, "random seeds to sweep");

  CLI::App* report_cmd = app.add_subcommand("report", "aggregate runs into a comparison table");
  report_cmd->add_option("--run", runs, "run directory (repeatable)")->required();
  report_cmd->add_option("--out", out_path, "write the table here instead of stdout");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (search->parsed()) return cmd_search(config_path, out_dir);
    if (retrain_cmd->parsed()) return cmd_retrain(run_dir, out_dir);
    if (eval_cmd->parsed()) return cmd_eval(run_dir);
    if (export_cmd->parsed()) return cmd_export(run_dir);
    if (fit->parsed()) return cmd_fit_latency(table_path, out_path);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(seeds);
    if (report_cmd->parsed()) return cmd_report(runs, out_path);
  } catch (const Divergence& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace dms::cli
