#include "cellmamba/train/config_io.hpp"

#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace cm {

using json = nlohmann::json;

namespace {

json parse_or_throw(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(str_cat(what, ": ", e.what()));
  }
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& c) {
  json j;
  j["stage_depths"] = c.stage_depths;
  j["stage_dims"] = c.stage_dims;
  j["fpn_channels"] = c.fpn_channels;
  j["num_classes"] = c.num_classes;
  j["anchors_per_location"] = c.anchors_per_location;
  j["n_state"] = c.n_state;
  j["msa_heads"] = c.msa_heads;
  j["ffn_expansion"] = c.ffn_expansion;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  const std::string preset = j.value("preset", std::string("full"));
  ModelConfig c;
  if (preset == "micro") {
    c = ModelConfig::micro();
  } else {
    CM_CHECK(preset == "full", "model config: unknown preset '", preset,
             "' (expected 'full' or 'micro')");
  }
  try {
    if (j.contains("stage_depths")) c.stage_depths = j.at("stage_depths").get<std::array<int, 4>>();
    if (j.contains("stage_dims")) c.stage_dims = j.at("stage_dims").get<std::array<i64, 4>>();
    c.fpn_channels = j.value("fpn_channels", c.fpn_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.anchors_per_location = j.value("anchors_per_location", c.anchors_per_location);
    c.n_state = j.value("n_state", c.n_state);
    c.msa_heads = j.value("msa_heads", c.msa_heads);
    c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
  } catch (const json::exception& e) {
    throw ValidationError(str_cat("model config: ", e.what()));
  }
  c.validate();
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  json j;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["momentum"] = c.momentum;
  j["epochs"] = c.epochs;
  j["warmup_epochs"] = c.warmup_epochs;
  j["warmup_steps"] = c.warmup_steps;
  j["milestones"] = c.milestones;
  j["milestone_factor"] = c.milestone_factor;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["flip_augment"] = c.flip_augment;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.momentum = j.value("momentum", c.momentum);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    if (j.contains("milestones")) c.milestones = j.at("milestones").get<std::vector<int>>();
    c.milestone_factor = j.value("milestone_factor", c.milestone_factor);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.flip_augment = j.value("flip_augment", c.flip_augment);
  } catch (const json::exception& e) {
    throw ValidationError(str_cat("train config: ", e.what()));
  }
  c.validate();
  return c;
}

void EvalConfig::validate() const {
  CM_CHECK(score_floor >= 0 && score_floor <= 1, "eval config: score_floor must be in [0,1], got ",
           score_floor);
  CM_CHECK(nms_iou > 0 && nms_iou <= 1, "eval config: nms_iou must be in (0,1], got ", nms_iou);
  CM_CHECK(top_k >= 1, "eval config: need top_k >= 1, got ", top_k);
}

RunConfig run_config_from_json(const std::string& text) {
  json j = parse_or_throw(text, "config parse error");
  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) {
    rc.train = train_config_from_json(j.at("train"));
    rc.freeze_alpha = j.at("train").value("freeze_alpha", false);
  }
  if (j.contains("eval")) {
    const auto& je = j.at("eval");
    try {
      rc.eval.score_floor = je.value("score_floor", rc.eval.score_floor);
      rc.eval.nms_iou = je.value("nms_iou", rc.eval.nms_iou);
      rc.eval.top_k = je.value("top_k", rc.eval.top_k);
    } catch (const json::exception& e) {
      throw ValidationError(str_cat("eval config: ", e.what()));
    }
  }
  rc.model.validate();
  rc.train.validate();
  rc.eval.validate();
  return rc;
}

std::string run_config_to_json(const RunConfig& rc) {
  json j;
  j["model"] = model_config_to_json(rc.model);
  j["train"] = train_config_to_json(rc.train);
  j["train"]["freeze_alpha"] = rc.freeze_alpha;
  j["eval"] = {{"score_floor", rc.eval.score_floor},
               {"nms_iou", rc.eval.nms_iou},
               {"top_k", rc.eval.top_k}};
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  CM_CHECK(is.good(), "cannot open config '", path, "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return run_config_from_json(buf.str());
}

}  // namespace cm
