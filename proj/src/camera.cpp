#include "wavedepth/camera.hpp"

#include <cmath>
#include <string>

#include "wavedepth/error.hpp"
#include "wavedepth/json_fields.hpp"

namespace wavedepth {

void validate(const CameraIntrinsics& k) {
  if (!(k.fx > 0.0) || !(k.fy > 0.0) || !std::isfinite(k.fx) ||
      !std::isfinite(k.fy)) {
    throw ContractError("intrinsics: focal lengths must be positive, got fx=" +
                        std::to_string(k.fx) + " fy=" + std::to_string(k.fy));
  }
  if (k.width == 0 || k.height == 0) {
    throw ContractError("intrinsics: image extents must be positive");
  }
  const double w = static_cast<double>(k.width - 1);
  const double h = static_cast<double>(k.height - 1);
  if (!(k.cx >= 0.0 && k.cx <= w && k.cy >= 0.0 && k.cy <= h)) {
    throw ContractError("intrinsics: principal point (" + std::to_string(k.cx) +
                        ", " + std::to_string(k.cy) +
                        ") lies outside the image");
  }
}

nlohmann::json intrinsics_to_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy},       {"cx", k.cx},
          {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics k;
  FieldReader r(j, "intrinsics");
  r.read("fx", k.fx);
  r.read("fy", k.fy);
  r.read("cx", k.cx);
  r.read("cy", k.cy);
  r.read("width", k.width);
  r.read("height", k.height);
  r.finish();
  for (const char* key : {"fx", "fy", "cx", "cy", "width", "height"}) {
    if (!j.contains(key)) r.fail(key, "missing");
  }
  validate(k);
  return k;
}

}  // namespace wavedepth
