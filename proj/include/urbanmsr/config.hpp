#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "urbanmsr/encoders.hpp"
#include "urbanmsr/errors.hpp"
#include "urbanmsr/flow.hpp"
#include "urbanmsr/pretrain.hpp"
#include "urbanmsr/sampler.hpp"
#include "urbanmsr/train.hpp"

// One structured config document with sections data / sampler / model /
// pretrain / train / eval. Unknown sections or keys are rejected before any
// work starts; the effective (defaults-resolved) config can be echoed back.

namespace umsr {

struct DataConfig {
  SynthConfig synth;
  double train_frac = 0.7;
  double val_frac = 0.1;
};

struct EvalConfig {
  double mape_mask = 1.0;
};

struct RunConfig {
  DataConfig data;
  SamplerConfig sampler;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    data.synth.validate();
    if (data.train_frac <= 0 || data.val_frac < 0 ||
        data.train_frac + data.val_frac >= 1.0)
      throw ConfigError("data: fractions must satisfy 0 < train_frac, 0 <= val_frac, sum < 1");
    sampler.validate();
    model.validate();
    pretrain.validate();
    train.validate();
    if (eval.mape_mask < 0) throw ConfigError("eval: mape_mask must be >= 0");
    if (model.upscale != data.synth.upscale)
      throw ConfigError("model.upscale and data.upscale must agree");
  }
};

namespace cfgdetail {

using nlohmann::json;

inline void reject_unknown(const json& section, const std::string& name,
                           const std::set<std::string>& known) {
  for (auto it = section.begin(); it != section.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown config key: " + name + "." + it.key());
}

template <class V>
void get_to(const json& section, const char* section_name, const char* key, V& out) {
  if (!section.contains(key)) return;
  try {
    section.at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value type for ") + section_name + "." + key);
  }
}

}  // namespace cfgdetail

inline RunConfig parse_config(const nlohmann::json& doc) {
  using cfgdetail::get_to;
  using cfgdetail::reject_unknown;
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  static const std::set<std::string> sections = {"data",     "sampler", "model",
                                                 "pretrain", "train",   "eval"};
  for (auto it = doc.begin(); it != doc.end(); ++it)
    if (!sections.count(it.key()))
      throw ConfigError("unknown config section: " + it.key());

  RunConfig cfg;
  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    reject_unknown(d, "data",
                   {"coarse_h", "coarse_w", "upscale", "frames", "slots_per_day", "blobs",
                    "blob_speed", "noise", "train_frac", "val_frac"});
    get_to(d, "data", "coarse_h", cfg.data.synth.coarse_h);
    get_to(d, "data", "coarse_w", cfg.data.synth.coarse_w);
    get_to(d, "data", "upscale", cfg.data.synth.upscale);
    get_to(d, "data", "frames", cfg.data.synth.frames);
    get_to(d, "data", "slots_per_day", cfg.data.synth.slots_per_day);
    get_to(d, "data", "blobs", cfg.data.synth.blobs);
    get_to(d, "data", "blob_speed", cfg.data.synth.blob_speed);
    get_to(d, "data", "noise", cfg.data.synth.noise);
    get_to(d, "data", "train_frac", cfg.data.train_frac);
    get_to(d, "data", "val_frac", cfg.data.val_frac);
  }
  if (doc.contains("sampler")) {
    const auto& s = doc.at("sampler");
    reject_unknown(s, "sampler", {"threshold_mode", "percentile", "delta", "theta", "k"});
    std::string mode = "percentile";
    get_to(s, "sampler", "threshold_mode", mode);
    if (mode == "percentile")
      cfg.sampler.mode = ThresholdMode::Percentile;
    else if (mode == "absolute")
      cfg.sampler.mode = ThresholdMode::Absolute;
    else
      throw ConfigError("sampler.threshold_mode must be \"percentile\" or \"absolute\"");
    get_to(s, "sampler", "percentile", cfg.sampler.percentile);
    get_to(s, "sampler", "delta", cfg.sampler.delta);
    get_to(s, "sampler", "theta", cfg.sampler.theta);
    get_to(s, "sampler", "k", cfg.sampler.k);
  }
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    reject_unknown(m, "model",
                   {"channels", "kernel", "dilation", "heads", "city_blocks", "enc_layers"});
    get_to(m, "model", "channels", cfg.model.channels);
    get_to(m, "model", "kernel", cfg.model.kernel);
    get_to(m, "model", "dilation", cfg.model.dilation);
    get_to(m, "model", "heads", cfg.model.heads);
    get_to(m, "model", "city_blocks", cfg.model.city_blocks);
    get_to(m, "model", "enc_layers", cfg.model.enc_layers);
  }
  if (doc.contains("pretrain")) {
    const auto& p = doc.at("pretrain");
    reject_unknown(p, "pretrain", {"epochs", "anchors", "lr", "temperature", "similarity"});
    get_to(p, "pretrain", "epochs", cfg.pretrain.epochs);
    get_to(p, "pretrain", "anchors", cfg.pretrain.anchors);
    get_to(p, "pretrain", "lr", cfg.pretrain.lr);
    get_to(p, "pretrain", "temperature", cfg.pretrain.temperature);
    std::string sim = "exp_inner";
    get_to(p, "pretrain", "similarity", sim);
    if (sim == "exp_inner")
      cfg.pretrain.similarity = Similarity::ExpInner;
    else if (sim == "raw_inner")
      cfg.pretrain.similarity = Similarity::RawInner;
    else
      throw ConfigError("pretrain.similarity must be \"exp_inner\" or \"raw_inner\"");
  }
  if (doc.contains("train")) {
    const auto& t = doc.at("train");
    reject_unknown(t, "train",
                   {"lambda", "alpha", "lr", "epochs", "batch", "freeze_encoders", "diff_loss",
                    "mape_mask"});
    get_to(t, "train", "lambda", cfg.train.lambda);
    get_to(t, "train", "alpha", cfg.train.alpha);
    get_to(t, "train", "lr", cfg.train.lr);
    get_to(t, "train", "epochs", cfg.train.epochs);
    get_to(t, "train", "batch", cfg.train.batch);
    get_to(t, "train", "freeze_encoders", cfg.train.freeze_encoders);
    std::string form = "as_written";
    get_to(t, "train", "diff_loss", form);
    if (form == "as_written")
      cfg.train.diff_loss = DiffLossForm::AsWritten;
    else if (form == "penalize_similarity")
      cfg.train.diff_loss = DiffLossForm::PenalizeSimilarity;
    else
      throw ConfigError("train.diff_loss must be \"as_written\" or \"penalize_similarity\"");
    get_to(t, "train", "mape_mask", cfg.train.mape_mask);
  }
  if (doc.contains("eval")) {
    const auto& e = doc.at("eval");
    reject_unknown(e, "eval", {"mape_mask"});
    get_to(e, "eval", "mape_mask", cfg.eval.mape_mask);
  }
  // The sampler section feeds the pretrain stages.
  cfg.pretrain.sampler = cfg.sampler;
  // Model upscale follows the data geometry.
  cfg.model.upscale = cfg.data.synth.upscale;
  cfg.validate();
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_config(doc);
}

inline nlohmann::json effective_config(const RunConfig& cfg) {
  nlohmann::json doc;
  doc["data"] = {{"coarse_h", cfg.data.synth.coarse_h},
                 {"coarse_w", cfg.data.synth.coarse_w},
                 {"upscale", cfg.data.synth.upscale},
                 {"frames", cfg.data.synth.frames},
                 {"slots_per_day", cfg.data.synth.slots_per_day},
                 {"blobs", cfg.data.synth.blobs},
                 {"blob_speed", cfg.data.synth.blob_speed},
                 {"noise", cfg.data.synth.noise},
                 {"train_frac", cfg.data.train_frac},
                 {"val_frac", cfg.data.val_frac}};
  doc["sampler"] = {
      {"threshold_mode", cfg.sampler.mode == ThresholdMode::Percentile ? "percentile"
                                                                       : "absolute"},
      {"percentile", cfg.sampler.percentile},
      {"delta", cfg.sampler.delta},
      {"theta", cfg.sampler.theta},
      {"k", cfg.sampler.k}};
  doc["model"] = {{"channels", cfg.model.channels}, {"kernel", cfg.model.kernel},
                  {"dilation", cfg.model.dilation}, {"heads", cfg.model.heads},
                  {"city_blocks", cfg.model.city_blocks}, {"enc_layers", cfg.model.enc_layers}};
  doc["pretrain"] = {
      {"epochs", cfg.pretrain.epochs},
      {"anchors", cfg.pretrain.anchors},
      {"lr", cfg.pretrain.lr},
      {"temperature", cfg.pretrain.temperature},
      {"similarity", cfg.pretrain.similarity == Similarity::ExpInner ? "exp_inner" : "raw_inner"}};
  doc["train"] = {{"lambda", cfg.train.lambda},
                  {"alpha", cfg.train.alpha},
                  {"lr", cfg.train.lr},
                  {"epochs", cfg.train.epochs},
                  {"batch", cfg.train.batch},
                  {"freeze_encoders", cfg.train.freeze_encoders},
                  {"diff_loss", cfg.train.diff_loss == DiffLossForm::AsWritten
                                    ? "as_written"
                                    : "penalize_similarity"},
                  {"mape_mask", cfg.train.mape_mask}};
  doc["eval"] = {{"mape_mask", cfg.eval.mape_mask}};
  return doc;
}

}  // namespace umsr
