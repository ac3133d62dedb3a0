#include "experiment_config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace modeseg::cli {

using nlohmann::json;

namespace {

// Reads fields of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception&) {
      throw ConfigError(path(key) + " has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const {
    return where_.empty() ? key : where_ + "." + key;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path(k) + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename E, typename Parse>
void get_enum(Section& s, const char* key, E& out, Parse parse) {
  std::string text;
  bool present = false;
  if (const json* c = s.child(key)) {
    if (!c->is_string()) throw ConfigError(s.path(key) + " must be a string");
    text = c->get<std::string>();
    present = true;
  }
  if (present) out = parse(text);
}

void parse_norm(const json& j, NormConfig& n) {
  Section s(j, "model.norm");
  get_enum(s, "kind", n.kind, parse_norm_kind);
  s.get("modes", n.modes);
  s.get("epsilon", n.epsilon);
  s.get("momentum", n.momentum);
  s.get("em_iters", n.em_iters);
  s.get("min_mode_weight", n.min_mode_weight);
  s.finish();
}

void parse_model(const json& j, ModelSpec& m) {
  Section s(j, "model");
  get_enum(s, "arch", m.arch, parse_arch);
  s.get("depth", m.depth);
  s.get("base_channels", m.base_channels);
  s.get("dropout", m.dropout_rate);
  if (const json* n = s.child("norm")) parse_norm(*n, m.norm);
  s.finish();
}

void parse_train(const json& j, TrainConfig& t) {
  Section s(j, "train");
  s.get("batch_size", t.batch_size);
  s.get("max_epochs", t.max_epochs);
  s.get("patience", t.patience);
  s.get("restore_best", t.restore_best);
  s.get("min_delta", t.min_delta);
  s.get("threshold", t.threshold);
  s.finish();
}

void parse_optimizer(const json& j, OptimizerConfig& o) {
  Section s(j, "optimizer");
  get_enum(s, "kind", o.kind, parse_optimizer_kind);
  s.get("learning_rate", o.learning_rate);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("epsilon", o.epsilon);
  s.get("momentum", o.momentum);
  s.finish();
}

void parse_loss(const json& j, LossConfig& l) {
  Section s(j, "loss");
  get_enum(s, "kind", l.kind, parse_loss_kind);
  s.get("alpha", l.alpha);
  s.get("focal_gamma", l.focal_gamma);
  s.get("smooth_eps", l.smooth_eps);
  s.get("dice_weight", l.dice_weight);
  s.get("focal_weight", l.focal_weight);
  s.finish();
}

void parse_synth(const json& j, DataConfig& d) {
  Section s(j, "data.synth");
  s.get("width", d.synth_width);
  s.get("height", d.synth_height);
  s.get("seed", d.synth_seed);
  s.get("coverage", d.synth.coverage);
  s.get("water_mean_db", d.synth.water_mean_db);
  s.get("water_std_db", d.synth.water_std_db);
  s.get("land_mean_db", d.synth.land_mean_db);
  s.get("land_std_db", d.synth.land_std_db);
  s.get("blob_scale", d.synth.blob_scale);
  s.get("speckle_looks", d.synth.speckle_looks);
  s.get("min_db", d.synth.min_db);
  s.get("max_db", d.synth.max_db);
  s.finish();
}

void parse_data(const json& j, DataConfig& d) {
  Section s(j, "data");
  s.get("raster", d.raster);
  s.get("mask", d.mask);
  s.get("tile_size", d.tile_size);
  s.get("split", d.split);
  s.get("cv_val_fraction", d.cv_val_fraction);
  if (const json* c = s.child("synth")) parse_synth(*c, d);
  s.finish();
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  optimizer.validate();
  loss.validate();
  if (data.tile_size == 0) throw ConfigError("data.tile_size must be positive");
  model.check_extent(data.tile_size, data.tile_size);
  double total = 0.0;
  for (double f : data.split) {
    if (!(f >= 0.0)) throw ConfigError("data.split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("data.split fractions must sum to 1");
  if (data.split[0] <= 0.0 || data.split[1] <= 0.0) {
    throw ConfigError("data.split needs non-empty train and validation parts");
  }
  if (!(data.cv_val_fraction > 0.0 && data.cv_val_fraction < 1.0)) {
    throw ConfigError("data.cv_val_fraction must lie in (0, 1)");
  }
  if (data.synthetic()) {
    data.synth.validate();
    if (data.synth_width < data.tile_size || data.synth_height < data.tile_size) {
      throw ConfigError("data.synth extent is smaller than one tile");
    }
  } else if (data.mask.empty()) {
    throw ConfigError("data.mask is required when data.raster is set");
  }
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  Section s(doc, "");
  s.get("seed", cfg.seed);
  s.get("run_id", cfg.run_id);
  if (const json* c = s.child("model")) parse_model(*c, cfg.model);
  if (const json* c = s.child("train")) parse_train(*c, cfg.train);
  if (const json* c = s.child("optimizer")) parse_optimizer(*c, cfg.optimizer);
  if (const json* c = s.child("loss")) parse_loss(*c, cfg.loss);
  if (const json* c = s.child("data")) parse_data(*c, cfg.data);
  s.finish();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

json to_json(const ExperimentConfig& c) {
  const auto& n = c.model.norm;
  const auto& d = c.data;
  return json{
      {"seed", c.seed},
      {"run_id", c.run_id},
      {"model",
       {{"arch", to_string(c.model.arch)},
        {"depth", c.model.depth},
        {"base_channels", c.model.base_channels},
        {"dropout", c.model.dropout_rate},
        {"norm",
         {{"kind", to_string(n.kind)},
          {"modes", n.modes},
          {"epsilon", n.epsilon},
          {"momentum", n.momentum},
          {"em_iters", n.em_iters},
          {"min_mode_weight", n.min_mode_weight}}}}},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"max_epochs", c.train.max_epochs},
        {"patience", c.train.patience},
        {"restore_best", c.train.restore_best},
        {"min_delta", c.train.min_delta},
        {"threshold", c.train.threshold}}},
      {"optimizer",
       {{"kind", to_string(c.optimizer.kind)},
        {"learning_rate", c.optimizer.learning_rate},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"momentum", c.optimizer.momentum}}},
      {"loss",
       {{"kind", to_string(c.loss.kind)},
        {"alpha", c.loss.alpha},
        {"focal_gamma", c.loss.focal_gamma},
        {"smooth_eps", c.loss.smooth_eps},
        {"dice_weight", c.loss.dice_weight},
        {"focal_weight", c.loss.focal_weight}}},
      {"data",
       {{"raster", d.raster},
        {"mask", d.mask},
        {"tile_size", d.tile_size},
        {"split", d.split},
        {"cv_val_fraction", d.cv_val_fraction},
        {"synth",
         {{"width", d.synth_width},
          {"height", d.synth_height},
          {"seed", d.synth_seed},
          {"coverage", d.synth.coverage},
          {"water_mean_db", d.synth.water_mean_db},
          {"water_std_db", d.synth.water_std_db},
          {"land_mean_db", d.synth.land_mean_db},
          {"land_std_db", d.synth.land_std_db},
          {"blob_scale", d.synth.blob_scale},
          {"speckle_looks", d.synth.speckle_looks},
          {"min_db", d.synth.min_db},
          {"max_db", d.synth.max_db}}}}}};
}

}  // namespace modeseg::cli
