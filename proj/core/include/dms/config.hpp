#pragma once
#include <string>
#include <vector>

#include "dms/resource.hpp"
#include "dms/search.hpp"

namespace dms {

inline constexpr const char* kConfigSchema = "dms-run/1";
inline constexpr const char* kArchSchema = "dms-architecture/1";
inline constexpr const char* kLatencyFitSchema = "dms-latency-fit/1";

// A fully resolved run description: the pipeline config plus provenance.
// Parsing is strict — unknown keys, bad types and bad enum values are fatal,
// reported with their key path.
struct RunConfig {
  PipelineConfig pipeline;
  std::string source_path;
  std::string latency_model_path;  // echoed verbatim; loaded into pipeline.latency
};

RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);

// All defaults filled in explicitly; parse(echo(cfg)) == cfg.
std::string echo_config(const RunConfig& cfg);

// Architecture file: provenance comments, then ordered per-dimension lines
// `name, N_max, k_retained, retained_indices`.
std::string format_architecture(const ArchitectureDescription& desc);
void write_architecture(const ArchitectureDescription& desc, const std::string& path);
ArchitectureDescription read_architecture(const std::string& path);

// Per-epoch metrics as line-delimited JSON records.
std::string format_metrics_line(const EpochMetrics& m);
std::vector<EpochMetrics> read_metrics(const std::string& path);

void write_latency_model(const LatencyModel& model, const std::string& path);
LatencyModel read_latency_model(const std::string& path);

std::string format_eval(const EvalMetrics& eval, double exported_resource, double r_final);

}  // namespace dms
