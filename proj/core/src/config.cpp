#include "dms/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "dms/error.hpp"
#include "json.hpp"

namespace dms {

namespace {

using json = nlohmann::ordered_json;

// Strict object view: every access marks a key consumed; leftovers are fatal.
class Strict {
 public:
  Strict(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    require(obj_.is_object(), path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const json& raw(const std::string& key) {
    require(obj_.contains(key), path_ + ": missing required key '" + key + "'");
    seen_.insert(key);
    return obj_.at(key);
  }

  std::string str(const std::string& key) {
    const json& v = raw(key);
    require(v.is_string(), path_ + "." + key + ": expected a string");
    return v.get<std::string>();
  }
  std::string str_or(const std::string& key, const std::string& fallback) {
    return has(key) ? str(key) : fallback;
  }
  int integer(const std::string& key) {
    const json& v = raw(key);
    require(v.is_number_integer(), path_ + "." + key + ": expected an integer");
    return v.get<int>();
  }
  int integer_or(const std::string& key, int fallback) {
    return has(key) ? integer(key) : fallback;
  }
  double number(const std::string& key) {
    const json& v = raw(key);
    require(v.is_number(), path_ + "." + key + ": expected a number");
    return v.get<double>();
  }
  double number_or(const std::string& key, double fallback) {
    return has(key) ? number(key) : fallback;
  }
  bool boolean_or(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    require(v.is_boolean(), path_ + "." + key + ": expected a boolean");
    return v.get<bool>();
  }
  uint64_t seed(const std::string& key) {
    const json& v = raw(key);
    require(v.is_number_integer() && v.get<int64_t>() >= 0,
            path_ + "." + key + ": expected a non-negative integer");
    return v.get<uint64_t>();
  }

  void finish() {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      require(seen_.count(it.key()), path_ + ": unknown key '" + it.key() + "'");
  }

  const std::string& path() const { return path_; }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

ModelSpec parse_model(const json& j, const std::string& path) {
  Strict m(j, path);
  ModelSpec spec;
  spec.input_dim = m.integer("input_dim");
  spec.input_slot = m.str_or("input_slot", "");
  spec.input_min = m.integer_or("input_min", 0);
  spec.input_step = m.integer_or("input_step", 1);
  spec.seq_len = m.integer_or("seq_len", 1);
  std::string metric = m.str_or("importance_metric", "taylor");
  require(metric == "taylor" || metric == "index",
          path + ".importance_metric: expected 'taylor' or 'index', got '" + metric + "'");
  spec.metric = metric == "taylor" ? ImportanceMetric::taylor : ImportanceMetric::index;
  const json& layers = m.raw("layers");
  require(layers.is_array() && !layers.empty(), path + ".layers: expected a non-empty array");
  int index = 0;
  for (const json& lj : layers) {
    std::string lpath = path + ".layers[" + std::to_string(index) + "]";
    Strict l(lj, lpath);
    LayerSpec layer;
    layer.name = l.str_or("name", "");
    std::string type = l.str("type");
    if (type == "linear") {
      layer.kind = LayerSpec::Kind::linear;
      layer.linear.out_features = l.integer("out_features");
      layer.linear.relu = l.boolean_or("relu", false);
      layer.linear.width_slot = l.str_or("width_slot", "");
      layer.linear.min_width = l.integer_or("min_width", 0);
      layer.linear.step = l.integer_or("step", 1);
    } else if (type == "stage") {
      layer.kind = LayerSpec::Kind::stage;
      layer.stage.blocks = l.integer("blocks");
      layer.stage.hidden = l.integer("hidden");
      layer.stage.depth_slot = l.str_or("depth_slot", "");
      layer.stage.hidden_slot = l.str_or("hidden_slot", "");
      layer.stage.min_blocks = l.integer_or("min_blocks", 0);
      layer.stage.min_hidden = l.integer_or("min_hidden", 0);
      layer.stage.hidden_step = l.integer_or("hidden_step", 1);
    } else if (type == "attention") {
      layer.kind = LayerSpec::Kind::attention;
      layer.attention.heads = l.integer("heads");
      layer.attention.head_dim = l.integer("head_dim");
      layer.attention.v_dim = l.integer_or("v_dim", 0);
      layer.attention.score_dim = l.integer_or("score_dim", 0);
      layer.attention.head_slot = l.str_or("head_slot", "");
      layer.attention.qk_slot = l.str_or("qk_slot", "");
      layer.attention.v_slot = l.str_or("v_slot", "");
      layer.attention.min_heads = l.integer_or("min_heads", 0);
    } else {
      fail(lpath + ".type: unknown layer type '" + type + "'");
    }
    l.finish();
    spec.layers.push_back(std::move(layer));
    ++index;
  }
  if (m.has("groups")) {
    const json& groups = m.raw("groups");
    require(groups.is_array(), path + ".groups: expected an array of arrays");
    for (const json& gj : groups) {
      require(gj.is_array(), path + ".groups: expected an array of arrays");
      std::vector<std::string> group;
      for (const json& s : gj) {
        require(s.is_string(), path + ".groups: slot names must be strings");
        group.push_back(s.get<std::string>());
      }
      spec.groups.push_back(std::move(group));
    }
  }
  m.finish();
  return spec;
}

TaskSpec parse_task(const json& j, const std::string& path) {
  Strict t(j, path);
  TaskSpec spec;
  spec.kind = task_kind_from_string(t.str("kind"));
  spec.input_dim = t.integer_or("input_dim", 0);
  spec.classes = t.integer_or("classes", 0);
  spec.output_dim = t.integer_or("output_dim", 0);
  spec.train = t.integer("train");
  spec.val = t.integer("val");
  spec.test = t.integer("test");
  spec.informative = t.integer_or("informative", 0);
  spec.teacher_blocks = t.integer_or("teacher_blocks", 0);
  spec.teacher_hidden = t.integer_or("teacher_hidden", 0);
  spec.teacher_dim = t.integer_or("teacher_dim", 0);
  spec.noise = t.number_or("noise", 0.0);
  spec.seed = t.seed("seed");
  spec.csv_path = t.str_or("csv_path", "");
  t.finish();
  if (spec.kind == TaskKind::csv_classification)
    require(!spec.csv_path.empty(), path + ": csv_classification needs csv_path");
  return spec;
}

Hyperparams parse_hyperparams(const json* j, const std::string& path, uint64_t seed) {
  Hyperparams hp;
  hp.seed = seed;
  if (!j) {
    hp.width_only_epochs = static_cast<int>(std::lround(0.2 * hp.search_epochs));
    hp.retrain_epochs = 10 * hp.search_epochs;
    return hp;
  }
  Strict h(*j, path);
  hp.lambda_resource = h.number_or("lambda_resource", 1.0);
  hp.lr_structure = h.number_or("lr_structure", 5e-3);
  hp.lr_weights = h.number_or("lr_weights", 1e-3);
  hp.decay = h.number_or("decay", 0.99);
  hp.search_epochs = h.integer_or("search_epochs", 10);
  // the width-only tail defaults to 20% of the search, retraining to 10x
  hp.width_only_epochs = h.integer_or("width_only_epochs",
                                      static_cast<int>(std::lround(0.2 * hp.search_epochs)));
  hp.retrain_epochs = h.integer_or("retrain_epochs", 10 * hp.search_epochs);
  hp.batch_size = h.integer_or("batch_size", 128);
  h.finish();
  return hp;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail(origin + ": not well-formed JSON: " + e.what());
  }
  Strict root(j, "config");
  RunConfig cfg;
  cfg.source_path = origin;
  std::string schema = root.str("schema");
  require(schema == kConfigSchema,
          "config.schema: this build supports '" + std::string(kConfigSchema) + "', got '" + schema + "'");
  cfg.pipeline.pipeline = pipeline_from_string(root.str("pipeline"));
  uint64_t seed = root.seed("seed");
  cfg.pipeline.model = parse_model(root.raw("model"), "config.model");
  cfg.pipeline.task = parse_task(root.raw("task"), "config.task");

  Strict r(root.raw("resource"), "config.resource");
  cfg.pipeline.resource_kind = resource_kind_from_string(r.str("kind"));
  cfg.pipeline.target_fraction = r.number_or("target_fraction", 0.0);
  cfg.pipeline.target_value = r.number_or("target_value", 0.0);
  cfg.latency_model_path = r.str_or("latency_model", "");
  r.finish();

  const json* hj = root.has("hyperparams") ? &root.raw("hyperparams") : nullptr;
  cfg.pipeline.hp = parse_hyperparams(hj, "config.hyperparams", seed);
  cfg.pipeline.pretrained = root.str_or("pretrained", "");
  std::string norm = root.str_or("normalization", "rank");
  require(norm == "rank" || norm == "identity",
          "config.normalization: expected 'rank' or 'identity', got '" + norm + "'");
  cfg.pipeline.rank_normalize = norm == "rank";
  root.finish();

  if (cfg.pipeline.resource_kind == ResourceKind::latency) {
    require(!cfg.latency_model_path.empty(),
            "config.resource: the latency kind needs a fitted latency_model file");
    cfg.pipeline.latency = read_latency_model(cfg.latency_model_path);
  }
  cfg.pipeline.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string echo_config(const RunConfig& cfg) {
  const PipelineConfig& pc = cfg.pipeline;
  json j;
  j["schema"] = kConfigSchema;
  j["pipeline"] = to_string(pc.pipeline);
  j["seed"] = pc.hp.seed;
  json model;
  model["input_dim"] = pc.model.input_dim;
  if (!pc.model.input_slot.empty()) {
    model["input_slot"] = pc.model.input_slot;
    model["input_min"] = pc.model.input_min;
    model["input_step"] = pc.model.input_step;
  }
  model["seq_len"] = pc.model.seq_len;
  model["importance_metric"] =
      pc.model.metric == ImportanceMetric::taylor ? "taylor" : "index";
  model["layers"] = json::array();
  for (const LayerSpec& layer : pc.model.layers) {
    json l;
    switch (layer.kind) {
      case LayerSpec::Kind::linear:
        l["type"] = "linear";
        if (!layer.name.empty()) l["name"] = layer.name;
        l["out_features"] = layer.linear.out_features;
        l["relu"] = layer.linear.relu;
        if (!layer.linear.width_slot.empty()) {
          l["width_slot"] = layer.linear.width_slot;
          l["min_width"] = layer.linear.min_width;
          l["step"] = layer.linear.step;
        }
        break;
      case LayerSpec::Kind::stage:
        l["type"] = "stage";
        if (!layer.name.empty()) l["name"] = layer.name;
        l["blocks"] = layer.stage.blocks;
        l["hidden"] = layer.stage.hidden;
        if (!layer.stage.depth_slot.empty()) {
          l["depth_slot"] = layer.stage.depth_slot;
          l["min_blocks"] = layer.stage.min_blocks;
        }
        if (!layer.stage.hidden_slot.empty()) {
          l["hidden_slot"] = layer.stage.hidden_slot;
          l["min_hidden"] = layer.stage.min_hidden;
          l["hidden_step"] = layer.stage.hidden_step;
        }
        break;
      case LayerSpec::Kind::attention:
        l["type"] = "attention";
        if (!layer.name.empty()) l["name"] = layer.name;
        l["heads"] = layer.attention.heads;
        l["head_dim"] = layer.attention.head_dim;
        if (layer.attention.v_dim > 0) l["v_dim"] = layer.attention.v_dim;
        if (layer.attention.score_dim > 0) l["score_dim"] = layer.attention.score_dim;
        if (!layer.attention.head_slot.empty()) {
          l["head_slot"] = layer.attention.head_slot;
          l["min_heads"] = layer.attention.min_heads;
        }
        if (!layer.attention.qk_slot.empty()) l["qk_slot"] = layer.attention.qk_slot;
        if (!layer.attention.v_slot.empty()) l["v_slot"] = layer.attention.v_slot;
        break;
    }
    model["layers"].push_back(std::move(l));
  }
  if (!pc.model.groups.empty()) model["groups"] = pc.model.groups;
  j["model"] = std::move(model);

  json task;
  task["kind"] = to_string(pc.task.kind);
  if (pc.task.input_dim > 0) task["input_dim"] = pc.task.input_dim;
  if (pc.task.classes > 0) task["classes"] = pc.task.classes;
  if (pc.task.output_dim > 0) task["output_dim"] = pc.task.output_dim;
  task["train"] = pc.task.train;
  task["val"] = pc.task.val;
  task["test"] = pc.task.test;
  if (pc.task.informative > 0) task["informative"] = pc.task.informative;
  if (pc.task.teacher_blocks > 0) {
    task["teacher_blocks"] = pc.task.teacher_blocks;
    task["teacher_hidden"] = pc.task.teacher_hidden;
    task["teacher_dim"] = pc.task.teacher_dim;
  }
  task["noise"] = pc.task.noise;
  task["seed"] = pc.task.seed;
  if (!pc.task.csv_path.empty()) task["csv_path"] = pc.task.csv_path;
  j["task"] = std::move(task);

  json resource;
  resource["kind"] = to_string(pc.resource_kind);
  if (pc.target_fraction > 0) resource["target_fraction"] = pc.target_fraction;
  if (pc.target_value > 0) resource["target_value"] = pc.target_value;
  if (!cfg.latency_model_path.empty()) resource["latency_model"] = cfg.latency_model_path;
  j["resource"] = std::move(resource);

  json hp;
  hp["lambda_resource"] = pc.hp.lambda_resource;
  hp["lr_structure"] = pc.hp.lr_structure;
  hp["lr_weights"] = pc.hp.lr_weights;
  hp["decay"] = pc.hp.decay;
  hp["search_epochs"] = pc.hp.search_epochs;
  hp["width_only_epochs"] = pc.hp.width_only_epochs;
  hp["retrain_epochs"] = pc.hp.retrain_epochs;
  hp["batch_size"] = pc.hp.batch_size;
  j["hyperparams"] = std::move(hp);

  if (!pc.pretrained.empty()) j["pretrained"] = pc.pretrained;
  j["normalization"] = pc.rank_normalize ? "rank" : "identity";
  return j.dump(2) + "\n";
}

std::string format_architecture(const ArchitectureDescription& desc) {
  std::ostringstream os;
  os << "# " << kArchSchema << "\n";
  os << "# source: " << (desc.source.empty() ? "-" : desc.source) << "\n";
  os << "# seed: " << desc.seed << "\n";
  os << "# final_a:";
  os.precision(17);
  for (const auto& [name, a] : desc.final_a) os << " " << name << "=" << a;
  os << "\n";
  os << "name, N_max, k_retained, retained_indices\n";
  for (const ArchEntry& e : desc.entries) {
    os << e.name << ", " << e.n_max << ", " << e.k << ",";
    for (int i : e.retained) os << " " << i;
    os << "\n";
  }
  return os.str();
}

void write_architecture(const ArchitectureDescription& desc, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write architecture file '" + path + "'");
  out << format_architecture(desc);
  require(out.good(), "failed writing architecture file '" + path + "'");
}

ArchitectureDescription read_architecture(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open architecture file '" + path + "'");
  ArchitectureDescription desc;
  std::string line;
  bool schema_seen = false, header_seen = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string body = line.substr(1);
      size_t start = body.find_first_not_of(' ');
      if (start == std::string::npos) continue;
      body = body.substr(start);
      if (lineno == 1) {
        require(body == kArchSchema, path + ": expected schema '" + kArchSchema + "', got '" + body + "'");
        schema_seen = true;
      } else if (body.rfind("source:", 0) == 0) {
        desc.source = body.substr(7);
        if (!desc.source.empty() && desc.source[0] == ' ') desc.source.erase(0, 1);
      } else if (body.rfind("seed:", 0) == 0) {
        desc.seed = std::stoull(body.substr(5));
      } else if (body.rfind("final_a:", 0) == 0) {
        std::stringstream ss(body.substr(8));
        std::string pair;
        while (ss >> pair) {
          size_t eq = pair.find('=');
          require(eq != std::string::npos, path + ": malformed final_a entry '" + pair + "'");
          desc.final_a.emplace_back(pair.substr(0, eq), std::stod(pair.substr(eq + 1)));
        }
      }
      continue;
    }
    if (!header_seen) {
      require(line == "name, N_max, k_retained, retained_indices",
              path + " line " + std::to_string(lineno) + ": unexpected column header");
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string name_field, n_field, k_field, rest;
    require(static_cast<bool>(std::getline(ss, name_field, ',')) &&
                static_cast<bool>(std::getline(ss, n_field, ',')) &&
                static_cast<bool>(std::getline(ss, k_field, ',')),
            path + " line " + std::to_string(lineno) + ": expected 4 comma-separated fields");
    std::getline(ss, rest);
    ArchEntry e;
    e.name = name_field;
    try {
      e.n_max = std::stoi(n_field);
      e.k = std::stoi(k_field);
      std::stringstream ri(rest);
      int idx;
      while (ri >> idx) e.retained.push_back(idx);
    } catch (const std::exception&) {
      fail(path + " line " + std::to_string(lineno) + ": unparseable numbers");
    }
    require(static_cast<int>(e.retained.size()) == e.k,
            path + " line " + std::to_string(lineno) + ": k_retained does not match the index list");
    desc.entries.push_back(std::move(e));
  }
  require(schema_seen && header_seen, path + ": not a dms architecture file");
  return desc;
}

std::string format_metrics_line(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["phase"] = m.phase;
  j["task_loss"] = m.task_loss;
  j["resource_loss"] = m.resource_loss;
  j["r_c"] = m.r_c;
  j["r_t"] = m.r_t;
  json a = json::object();
  for (const auto& [name, value] : m.a_values) a[name] = value;
  j["a"] = std::move(a);
  return j.dump();
}

std::vector<EpochMetrics> read_metrics(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open metrics file '" + path + "'");
  std::vector<EpochMetrics> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      fail(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int>();
    m.phase = j.at("phase").get<std::string>();
    m.task_loss = j.at("task_loss").get<double>();
    m.resource_loss = j.at("resource_loss").get<double>();
    m.r_c = j.at("r_c").get<double>();
    m.r_t = j.at("r_t").get<double>();
    for (auto it = j.at("a").begin(); it != j.at("a").end(); ++it)
      m.a_values.emplace_back(it.key(), it.value().get<double>());
    out.push_back(std::move(m));
  }
  return out;
}

void write_latency_model(const LatencyModel& model, const std::string& path) {
  json j;
  j["schema"] = kLatencyFitSchema;
  j["layers"] = json::array();
  for (const LatencyFit& f : model.layers) {
    json l;
    l["layer_id"] = f.layer_id;
    l["latency_max"] = f.latency_max;
    l["coeffs"] = f.coeffs;
    l["mse"] = f.mse;
    l["r2"] = f.r2;
    j["layers"].push_back(std::move(l));
  }
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write latency model '" + path + "'");
  out << j.dump(2) << "\n";
}

LatencyModel read_latency_model(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open latency model '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    fail(path + ": not well-formed JSON: " + std::string(e.what()));
  }
  require(j.value("schema", "") == kLatencyFitSchema, path + ": wrong schema tag");
  LatencyModel model;
  for (const json& l : j.at("layers")) {
    LatencyFit f;
    f.layer_id = l.at("layer_id").get<std::string>();
    f.latency_max = l.at("latency_max").get<double>();
    auto c = l.at("coeffs");
    require(c.is_array() && c.size() == 6, path + ": coeffs must hold 6 numbers");
    for (size_t i = 0; i < 6; ++i) f.coeffs[i] = c[i].get<double>();
    f.mse = l.at("mse").get<double>();
    f.r2 = l.at("r2").get<double>();
    model.layers.push_back(std::move(f));
  }
  return model;
}

std::string format_eval(const EvalMetrics& eval, double exported_resource, double r_final) {
  json j;
  j["loss"] = eval.loss;
  if (std::isfinite(eval.accuracy)) j["accuracy"] = eval.accuracy;
  j["exported_resource"] = exported_resource;
  j["r_final"] = r_final;
  return j.dump(2) + "\n";
}

}  // namespace dms
