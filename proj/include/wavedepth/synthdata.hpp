#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "wavedepth/camera.hpp"
#include "wavedepth/tensor.hpp"

namespace wavedepth {

// A camera at the axis of a deformed tube, looking down it.
struct SceneParams {
  std::size_t side = 64;
  double tube_radius = 1.0;
  double camera_offset = 0.0;   // axial position of the camera
  std::size_t folds = 3;        // fold periods over [0, d_max]
  double fold_amplitude = 0.15; // relative radial perturbation
  double falloff = 2.0;         // light falloff exponent
  double blur_sigma = 0.0;      // pixels, RGB only
  std::size_t speculars = 0;
  double specular_radius = 1.5; // pixels
  double fov_deg = 90.0;
  double d_min = 0.2;
  double d_max = 8.0;
  std::uint64_t seed = 0;
};

void validate(const SceneParams& p);

// Strict: unknown keys throw ContractError naming the key.
nlohmann::json scene_to_json(const SceneParams& p);
SceneParams scene_from_json(const nlohmann::json& j,
                            const std::string& path = "scene");

CameraIntrinsics scene_intrinsics(const SceneParams& p);

struct Scene {
  Tensor rgb;    // (1, 3, side, side) in [0, 1]
  Tensor depth;  // (1, 1, side, side), ray range in [d_min, d_max]
  CameraIntrinsics intrinsics;
};

// Ray-cast depth (range along the viewing ray, d_max through the lumen),
// diffuse albedo times (radius / range)^falloff with the light at the camera,
// optional saturated specular blobs, then Gaussian blur of the RGB only.
Scene generate_scene(const SceneParams& p);

// Separable Gaussian blur with reflected borders; sigma 0 is the identity.
Tensor gaussian_blur(const Tensor& image, double sigma);

// Adds `count` saturated Gaussian highlights of the given radius.
Tensor add_speculars(const Tensor& rgb, std::size_t count, double radius,
                     std::uint64_t seed);

struct Sample {
  std::string id;
  std::string split;  // "train" or "val"
  std::uint64_t seed = 0;
  Tensor rgb;    // quantized to 8 bits
  Tensor depth;  // quantized to 32-bit floats
};

struct Dataset {
  SceneParams scene;
  CameraIntrinsics intrinsics;
  std::uint64_t base_seed = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;

  const std::vector<Sample>& split(const std::string& name) const;
};

// Samples are quantized exactly as they are stored on disk, so an in-memory
// dataset and its reloaded copy are identical. Train and val seeds are
// disjoint.
Dataset make_dataset(const SceneParams& p, std::size_t n_train,
                     std::size_t n_val, std::uint64_t base_seed);

// Writes <dir>/manifest.json plus <split>/<id>_rgb.ppm and _depth.pfm.
// Refuses to touch a directory that already holds a manifest.
void write_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace wavedepth
