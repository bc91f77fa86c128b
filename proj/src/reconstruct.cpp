#include "wavedepth/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "wavedepth/error.hpp"
#include "wavedepth/format.hpp"
#include "wavedepth/io.hpp"

namespace wavedepth {

std::array<double, 3> RigidTransform::apply(
    const std::array<double, 3>& p) const {
  const auto& r = rotation;
  return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + translation[0],
          r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + translation[1],
          r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + translation[2]};
}

RigidTransform make_rigid(std::array<double, 3> axis, double angle,
                          std::array<double, 3> translation) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] +
                             axis[2] * axis[2]);
  if (!(n > 0.0)) throw ContractError("make_rigid: zero rotation axis");
  const double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  RigidTransform r;
  r.rotation = {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
                t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
                t * x * z - s * y, t * y * z + s * x, t * z * z + c};
  r.translation = translation;
  return r;
}

PointCloud backproject(const Tensor& depth, const ValidMask& mask,
                       const CameraIntrinsics& k,
                       const std::optional<RigidTransform>& pose,
                       const Tensor* rgb) {
  validate(k);
  const Shape& s = depth.shape();
  if (s.n() != 1 || s.c() != 1 || s.h() != k.height || s.w() != k.width) {
    throw ContractError("backproject: depth " + s.str() +
                        " does not match intrinsics " +
                        std::to_string(k.width) + "x" +
                        std::to_string(k.height));
  }
  if (!(mask.shape == s)) {
    throw ContractError("backproject: mask " + mask.shape.str() +
                        " does not match depth " + s.str());
  }
  if (rgb && !(rgb->shape() == Shape(1, 3, s.h(), s.w()))) {
    throw ContractError("backproject: rgb " + rgb->shape().str() +
                        " does not match depth " + s.str());
  }
  PointCloud pc;
  for (std::size_t v = 0; v < s.h(); ++v) {
    for (std::size_t u = 0; u < s.w(); ++u) {
      const std::size_t i = depth.offset(0, 0, v, u);
      if (!mask[i]) continue;
      const double z = depth[i];
      if (!(z > 0.0)) {
        throw DomainError("backproject: non-positive depth at a valid pixel");
      }
      std::array<double, 3> p = {(static_cast<double>(u) - k.cx) * z / k.fx,
                                 (static_cast<double>(v) - k.cy) * z / k.fy, z};
      if (pose) p = pose->apply(p);
      pc.points.push_back(p);
      pc.pixels.push_back({u, v});
      if (rgb) {
        std::array<std::uint8_t, 3> c{};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double q = std::clamp(rgb->at(0, ch, v, u), 0.0, 1.0);
          c[ch] = static_cast<std::uint8_t>(std::lround(q * 255.0));
        }
        pc.colors.push_back(c);
      }
    }
  }
  return pc;
}

std::array<double, 2> reproject(const std::array<double, 3>& p,
                                const CameraIntrinsics& k) {
  if (!(p[2] > 0.0)) throw DomainError("reproject: point behind the camera");
  return {k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy};
}

std::string encode_ply(const PointCloud& pc) {
  if (pc.points.empty()) throw ContractError("export_ply: empty point cloud");
  const bool colored = !pc.colors.empty();
  if (colored && pc.colors.size() != pc.points.size()) {
    throw ContractError("export_ply: colour count does not match point count");
  }
  std::string out = "ply\nformat ascii 1.0\nelement vertex " +
                    std::to_string(pc.points.size()) +
                    "\nproperty float x\nproperty float y\nproperty float z\n";
  if (colored) {
    out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  }
  out += "end_header\n";
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    const auto& p = pc.points[i];
    out += format_double(p[0], 9) + " " + format_double(p[1], 9) + " " +
           format_double(p[2], 9);
    if (colored) {
      for (std::uint8_t c : pc.colors[i]) out += " " + std::to_string(c);
    }
    out += "\n";
  }
  return out;
}

void export_ply(const PointCloud& pc, const std::filesystem::path& path) {
  const std::string text = encode_ply(pc);
  try {
    io::write_file_atomic(path, text);
  } catch (const IoError& e) {
    throw IoError("export_ply: " + path.string() + ": " + e.what());
  }
}

PointCloud parse_ply(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  auto fail = [&](const std::string& why) -> void {
    const auto pos = in.tellg();
    throw ParseError("PLY: " + why,
                     pos < 0 ? text.size() : static_cast<std::size_t>(pos));
  };
  if (!std::getline(in, line) || line != "ply") fail("missing 'ply' magic");
  std::size_t count = 0;
  std::size_t props = 0;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      header_done = true;
      break;
    }
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "element") {
      std::string kind;
      ls >> kind >> count;
      if (kind != "vertex" || !ls) fail("unsupported element line '" + line + "'");
    } else if (word == "property") {
      ++props;
    } else if (word != "format" && word != "comment") {
      fail("unexpected header line '" + line + "'");
    }
  }
  if (!header_done) fail("missing end_header");
  if (props != 3 && props != 6) fail("expected 3 or 6 vertex properties");
  PointCloud pc;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) fail("fewer vertices than declared");
    std::istringstream ls(line);
    std::array<double, 3> p{};
    ls >> p[0] >> p[1] >> p[2];
    if (!ls) fail("malformed vertex line '" + line + "'");
    pc.points.push_back(p);
    if (props == 6) {
      std::array<int, 3> c{};
      ls >> c[0] >> c[1] >> c[2];
      if (!ls) fail("malformed colour in '" + line + "'");
      pc.colors.push_back({static_cast<std::uint8_t>(c[0]),
                           static_cast<std::uint8_t>(c[1]),
                           static_cast<std::uint8_t>(c[2])});
    }
  }
  return pc;
}

}  // namespace wavedepth
