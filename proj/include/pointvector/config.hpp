#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointvector/train.hpp"

namespace pointvector {

using json = nlohmann::json;

/// Axes of an ablation sweep; an empty axis keeps the base model's value.
struct AblateConfig {
  std::vector<Aggregation> aggregation;
  std::vector<EncoderKind> encoder;
  std::vector<std::size_t> vector_dim;
  std::vector<std::uint64_t> seeds;  // empty: the train seed only
};

struct RunConfig {
  std::string name = "run";
  ModelConfig model = presets::toy_segmentation(3);
  TrainConfig train;
  DataConfig data;
  AblateConfig ablate;

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..")
      throw ConfigError("name must be a plain directory name, got '" + name + "'");
    model.validate();
    train.validate();
    data.validate();
    if (model.task != data.task) throw ConfigError("model.task and data.task disagree");
    if (model.num_classes != kPrimitiveKinds && !data.manifest)
      throw ConfigError("synthetic data has " + std::to_string(kPrimitiveKinds) + " classes, model.num_classes is " +
                        std::to_string(model.num_classes));
    for (auto m : ablate.vector_dim)
      if (m < 1 || m > 3) throw ConfigError("ablate.vector_dim entries must be 1, 2 or 3");
  }
};

namespace config_detail {

inline void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + section);
}

template <class V>
V get(const json& j, const std::string& section, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + " has the wrong type");
  }
}

inline std::size_t count(const json& j, const std::string& section, const char* key) {
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(section + "." + key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

inline std::vector<std::size_t> counts(const json& j, const std::string& section, const char* key) {
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError(section + "." + key + " must be an array of non-negative integers");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer() || e.get<long long>() < 0)
      throw ConfigError(section + "." + key + " must be an array of non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
  return out;
}

template <class F>
void maybe(const json& j, const char* key, F&& f) {
  if (j.contains(key)) f();
}

}  // namespace config_detail

inline ModelConfig parse_model_config(const json& j) {
  using namespace config_detail;
  const std::string s = "model";
  check_keys(j, s,
             {"preset", "task", "num_classes", "embed_channels", "sa_per_stage", "vpsa_per_stage", "strides", "k_sa",
              "k_vpsa", "radius", "radius_scaling", "vpsa_grouper", "reduction", "encoder", "vector_dim", "aggregation",
              "projection_bias", "sa_layers", "fp_layers", "derive_features", "in_channels"});
  Task task = j.contains("task") ? parse_task(get<std::string>(j, s, "task")) : Task::segmentation;
  std::size_t classes = j.contains("num_classes") ? count(j, s, "num_classes") : kPrimitiveKinds;
  ModelConfig c = presets::by_name(j.contains("preset") ? get<std::string>(j, s, "preset") : "toy", task, classes);
  maybe(j, "embed_channels", [&] { c.embed_channels = count(j, s, "embed_channels"); });
  maybe(j, "sa_per_stage", [&] { c.sa_per_stage = counts(j, s, "sa_per_stage"); });
  maybe(j, "vpsa_per_stage", [&] { c.vpsa_per_stage = counts(j, s, "vpsa_per_stage"); });
  maybe(j, "strides", [&] { c.strides = counts(j, s, "strides"); });
  maybe(j, "k_sa", [&] { c.k_sa = count(j, s, "k_sa"); });
  maybe(j, "k_vpsa", [&] { c.k_vpsa = count(j, s, "k_vpsa"); });
  maybe(j, "radius", [&] {
    if (j.at("radius").is_null()) c.radius.reset();
    else c.radius = get<double>(j, s, "radius");
  });
  maybe(j, "radius_scaling", [&] { c.radius_scaling = get<double>(j, s, "radius_scaling"); });
  maybe(j, "vpsa_grouper", [&] {
    const auto g = get<std::string>(j, s, "vpsa_grouper");
    if (g == "knn") c.vpsa_grouper = Grouper::knn;
    else if (g == "ball") c.vpsa_grouper = Grouper::ball;
    else throw ConfigError("model.vpsa_grouper must be knn or ball, got '" + g + "'");
  });
  maybe(j, "reduction", [&] { c.reduction = parse_reduction(get<std::string>(j, s, "reduction")); });
  maybe(j, "encoder", [&] { c.encoder = parse_encoder(get<std::string>(j, s, "encoder")); });
  maybe(j, "vector_dim", [&] { c.vector_dim = count(j, s, "vector_dim"); });
  maybe(j, "aggregation", [&] { c.aggregation = parse_aggregation(get<std::string>(j, s, "aggregation")); });
  maybe(j, "projection_bias", [&] { c.projection_bias = get<bool>(j, s, "projection_bias"); });
  maybe(j, "sa_layers", [&] { c.sa_layers = count(j, s, "sa_layers"); });
  maybe(j, "fp_layers", [&] { c.fp_layers = count(j, s, "fp_layers"); });
  maybe(j, "derive_features", [&] { c.derive_features = get<bool>(j, s, "derive_features"); });
  maybe(j, "in_channels", [&] { c.in_channels = count(j, s, "in_channels"); });
  c.validate();
  return c;
}

inline TrainConfig parse_train_config(const json& j) {
  using namespace config_detail;
  const std::string s = "train";
  check_keys(j, s,
             {"lr0", "weight_decay", "epochs", "batch_size", "label_smoothing", "seed", "augment_rotate",
              "augment_jitter", "jitter_sigma", "jitter_clip", "timing_in_csv"});
  TrainConfig c;
  maybe(j, "lr0", [&] { c.lr0 = get<double>(j, s, "lr0"); });
  maybe(j, "weight_decay", [&] { c.weight_decay = get<double>(j, s, "weight_decay"); });
  maybe(j, "epochs", [&] { c.epochs = count(j, s, "epochs"); });
  maybe(j, "batch_size", [&] { c.batch_size = count(j, s, "batch_size"); });
  maybe(j, "label_smoothing", [&] { c.label_smoothing = get<double>(j, s, "label_smoothing"); });
  maybe(j, "seed", [&] { c.seed = get<std::uint64_t>(j, s, "seed"); });
  maybe(j, "augment_rotate", [&] { c.augment_rotate = get<bool>(j, s, "augment_rotate"); });
  maybe(j, "augment_jitter", [&] { c.augment_jitter = get<bool>(j, s, "augment_jitter"); });
  maybe(j, "jitter_sigma", [&] { c.jitter_sigma = get<double>(j, s, "jitter_sigma"); });
  maybe(j, "jitter_clip", [&] { c.jitter_clip = get<double>(j, s, "jitter_clip"); });
  maybe(j, "timing_in_csv", [&] { c.timing_in_csv = get<bool>(j, s, "timing_in_csv"); });
  c.validate();
  return c;
}

inline DataConfig parse_data_config(const json& j, Task task) {
  using namespace config_detail;
  const std::string s = "data";
  check_keys(j, s,
             {"train_scenes", "val_scenes", "test_scenes", "num_points", "num_primitives", "kinds", "noise", "seed",
              "manifest"});
  DataConfig c;
  c.task = task;
  if (task == Task::classification) c.scene.num_primitives = 1;
  maybe(j, "train_scenes", [&] { c.train_scenes = count(j, s, "train_scenes"); });
  maybe(j, "val_scenes", [&] { c.val_scenes = count(j, s, "val_scenes"); });
  maybe(j, "test_scenes", [&] { c.test_scenes = count(j, s, "test_scenes"); });
  maybe(j, "num_points", [&] { c.scene.num_points = count(j, s, "num_points"); });
  maybe(j, "num_primitives", [&] { c.scene.num_primitives = count(j, s, "num_primitives"); });
  maybe(j, "kinds", [&] {
    c.scene.kinds.clear();
    for (const auto& k : get<std::vector<std::string>>(j, s, "kinds")) c.scene.kinds.push_back(parse_primitive(k));
  });
  maybe(j, "noise", [&] { c.scene.noise = get<double>(j, s, "noise"); });
  maybe(j, "seed", [&] { c.scene.seed = get<std::uint64_t>(j, s, "seed"); });
  maybe(j, "manifest", [&] { c.manifest = get<std::string>(j, s, "manifest"); });
  c.validate();
  return c;
}

inline AblateConfig parse_ablate_config(const json& j) {
  using namespace config_detail;
  const std::string s = "ablate";
  check_keys(j, s, {"aggregation", "encoder", "vector_dim", "seeds"});
  AblateConfig c;
  maybe(j, "aggregation", [&] {
    for (const auto& a : get<std::vector<std::string>>(j, s, "aggregation")) c.aggregation.push_back(parse_aggregation(a));
  });
  maybe(j, "encoder", [&] {
    for (const auto& e : get<std::vector<std::string>>(j, s, "encoder")) c.encoder.push_back(parse_encoder(e));
  });
  maybe(j, "vector_dim", [&] { c.vector_dim = counts(j, s, "vector_dim"); });
  maybe(j, "seeds", [&] { c.seeds = get<std::vector<std::uint64_t>>(j, s, "seeds"); });
  return c;
}

inline RunConfig parse_run_config(const json& j) {
  config_detail::check_keys(j, "config", {"name", "model", "train", "data", "ablate"});
  RunConfig c;
  if (j.contains("name")) c.name = config_detail::get<std::string>(j, "config", "name");
  c.model = parse_model_config(j.value("model", json::object()));
  c.train = parse_train_config(j.value("train", json::object()));
  c.data = parse_data_config(j.value("data", json::object()), c.model.task);
  c.ablate = parse_ablate_config(j.value("ablate", json::object()));
  c.validate();
  return c;
}

inline RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": invalid JSON: " + e.what());
  }
  try {
    return parse_run_config(j);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

/// Fully expanded model section (no preset), so it rebuilds the same network.
inline json to_json(const ModelConfig& c) {
  json j;
  j["task"] = to_string(c.task);
  j["num_classes"] = c.num_classes;
  j["embed_channels"] = c.embed_channels;
  j["sa_per_stage"] = c.sa_per_stage;
  j["vpsa_per_stage"] = c.vpsa_per_stage;
  j["strides"] = c.strides;
  j["k_sa"] = c.k_sa;
  j["k_vpsa"] = c.k_vpsa;
  j["radius"] = c.radius ? json(*c.radius) : json(nullptr);
  j["radius_scaling"] = c.radius_scaling;
  j["vpsa_grouper"] = c.vpsa_grouper == Grouper::knn ? "knn" : "ball";
  j["reduction"] = to_string(c.effective_reduction());
  j["encoder"] = to_string(c.encoder);
  j["vector_dim"] = c.vector_dim;
  j["aggregation"] = to_string(c.effective_aggregation());
  j["projection_bias"] = c.projection_bias;
  j["sa_layers"] = c.sa_layers;
  j["fp_layers"] = c.fp_layers;
  j["derive_features"] = c.derive_features;
  j["in_channels"] = c.in_channels;
  return j;
}

inline json to_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"label_smoothing", c.label_smoothing},
              {"seed", c.seed},
              {"augment_rotate", c.augment_rotate},
              {"augment_jitter", c.augment_jitter},
              {"jitter_sigma", c.jitter_sigma},
              {"jitter_clip", c.jitter_clip},
              {"timing_in_csv", c.timing_in_csv}};
}

inline json to_json(const DataConfig& c) {
  json kinds = json::array();
  for (auto k : c.scene.kinds) kinds.push_back(to_string(k));
  json j{{"train_scenes", c.train_scenes}, {"val_scenes", c.val_scenes},         {"test_scenes", c.test_scenes},
         {"num_points", c.scene.num_points}, {"num_primitives", c.scene.num_primitives}, {"kinds", kinds},
         {"noise", c.scene.noise},           {"seed", c.scene.seed}};
  if (c.manifest) j["manifest"] = *c.manifest;
  return j;
}

inline json to_json(const AblateConfig& c) {
  json j = json::object();
  if (!c.aggregation.empty()) {
    j["aggregation"] = json::array();
    for (auto a : c.aggregation) j["aggregation"].push_back(to_string(a));
  }
  if (!c.encoder.empty()) {
    j["encoder"] = json::array();
    for (auto e : c.encoder) j["encoder"].push_back(to_string(e));
  }
  if (!c.vector_dim.empty()) j["vector_dim"] = c.vector_dim;
  if (!c.seeds.empty()) j["seeds"] = c.seeds;
  return j;
}

inline json to_json(const RunConfig& c) {
  return json{{"name", c.name},
              {"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)},
              {"ablate", to_json(c.ablate)}};
}

}  // namespace pointvector
