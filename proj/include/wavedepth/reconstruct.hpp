#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wavedepth/camera.hpp"
#include "wavedepth/losses.hpp"
#include "wavedepth/tensor.hpp"

namespace wavedepth {

// p' = R p + t, R row-major.
struct RigidTransform {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> translation{0, 0, 0};

  std::array<double, 3> apply(const std::array<double, 3>& p) const;
};

// Rotation about the unit axis by `angle` radians (Rodrigues).
RigidTransform make_rigid(std::array<double, 3> axis, double angle,
                          std::array<double, 3> translation);

struct PointCloud {
  std::vector<std::array<double, 3>> points;
  std::vector<std::array<std::uint8_t, 3>> colors;  // empty or one per point
  // Source pixel (u = column, v = row) of each point.
  std::vector<std::array<std::size_t, 2>> pixels;
};

// Valid pixel (u, v) with depth z maps to ((u - cx) z / fx, (v - cy) z / fy, z)
// in the camera frame, then through `pose` when given. `rgb` (1, 3, H, W)
// in [0, 1] supplies 8-bit colours.
PointCloud backproject(const Tensor& depth, const ValidMask& mask,
                       const CameraIntrinsics& k,
                       const std::optional<RigidTransform>& pose = {},
                       const Tensor* rgb = nullptr);

// Pixel coordinates (u, v) of a camera-frame point.
std::array<double, 2> reproject(const std::array<double, 3>& p,
                                const CameraIntrinsics& k);

// ASCII PLY with x/y/z floats at 9 significant digits and uchar r/g/b when
// the cloud has colours.
std::string encode_ply(const PointCloud& pc);
void export_ply(const PointCloud& pc, const std::filesystem::path& path);

// Reads the ASCII PLY subset written by encode_ply.
PointCloud parse_ply(std::string_view text);

}  // namespace wavedepth
