#pragma once

#include <cstddef>

#include "json.hpp"

namespace wavedepth {

// Pinhole intrinsics in pixels; pixel centres sit at integer coordinates.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t width = 0;
  std::size_t height = 0;
};

// Throws ContractError unless fx, fy > 0 and the principal point lies inside
// the image.
void validate(const CameraIntrinsics& k);

// Fields fx, fy, cx, cy, width, height; all required, validated on read.
nlohmann::json intrinsics_to_json(const CameraIntrinsics& k);
CameraIntrinsics intrinsics_from_json(const nlohmann::json& j);

}  // namespace wavedepth
