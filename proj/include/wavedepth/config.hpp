#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "wavedepth/model.hpp"
#include "wavedepth/synthdata.hpp"

namespace wavedepth {

struct DataConfig {
  std::size_t n_train = 64;
  std::size_t n_val = 16;
  std::uint64_t base_seed = 1000;
};

// Every section and field is optional in JSON and falls back to defaults.
// Sections: scene, data, encoder, adapter, train, loss.
struct RunConfig {
  SceneParams scene;
  DataConfig data;
  EncoderConfig encoder;
  AdapterConfig adapter;
  TrainConfig train;  // train.loss is the "loss" section
};

// Throws ContractError naming the offending key.
void validate(const RunConfig& c);

nlohmann::json to_json(const RunConfig& c);
// Strict: unknown keys and wrong types throw ContractError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Optimizer and loss settings of the full-size reference setup, for
// documentation; training it is far beyond desk scale.
RunConfig full_scale_config();

}  // namespace wavedepth
