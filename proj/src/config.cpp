#include "wavedepth/config.hpp"

#include "wavedepth/error.hpp"
#include "wavedepth/io.hpp"
#include "wavedepth/json_fields.hpp"

namespace wavedepth {

void validate(const RunConfig& c) {
  validate(c.scene);
  validate(c.encoder);
  validate(c.adapter);
  if (c.data.n_train < 1 || c.data.n_val < 1) {
    throw ContractError("config key 'data.n_train'/'data.n_val': must be >= 1");
  }
  validate(c.train, c.data.n_train);
  if (c.scene.side != c.encoder.side) {
    throw ContractError("config key 'encoder.side': " +
                        std::to_string(c.encoder.side) +
                        " differs from scene.side " +
                        std::to_string(c.scene.side));
  }
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"scene", scene_to_json(c.scene)},
          {"data",
           {{"n_train", c.data.n_train},
            {"n_val", c.data.n_val},
            {"base_seed", c.data.base_seed}}},
          {"encoder", encoder_to_json(c.encoder)},
          {"adapter", adapter_to_json(c.adapter)},
          {"train", train_to_json(c.train)},
          {"loss", loss_to_json(c.train.loss)}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  FieldReader r(j, "");
  if (const auto* s = r.object("scene")) c.scene = scene_from_json(*s, "scene");
  if (const auto* s = r.object("data")) {
    FieldReader d(*s, "data");
    d.read("n_train", c.data.n_train);
    d.read("n_val", c.data.n_val);
    d.read("base_seed", c.data.base_seed);
    d.finish();
  }
  if (const auto* s = r.object("encoder")) {
    c.encoder = encoder_from_json(*s, "encoder");
  }
  if (const auto* s = r.object("adapter")) {
    c.adapter = adapter_from_json(*s, "adapter");
  }
  if (const auto* s = r.object("train")) c.train = train_from_json(*s, "train");
  if (const auto* s = r.object("loss")) c.train.loss = loss_from_json(*s, "loss");
  r.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(io::read_json(path));
}

RunConfig full_scale_config() {
  RunConfig c;
  c.scene.side = 320;
  c.encoder = {12, 2, 384, 6, 8, 320};
  c.data.n_train = 8000;
  c.train.epochs = 10;
  c.train.steps = 0;
  c.train.batch = 16;
  c.train.lr = 5e-6;
  c.train.warmup = 5000;
  c.train.loss = {0.5, 0.1, 0.1};
  return c;
}

}  // namespace wavedepth
