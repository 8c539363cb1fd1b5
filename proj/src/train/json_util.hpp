#pragma once

// Internal JSON (de)serializers shared by the config loader and checkpoint
// code. Not installed; include only from src/.

#include <json.hpp>

#include "cellmamba/model/config.hpp"
#include "cellmamba/train/schedule.hpp"

namespace cm {

nlohmann::json model_config_to_json(const ModelConfig& c);

// Starts from the preset named in "preset" ("full" default, or "micro"),
// then applies any per-field overrides present in j.
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace cm
