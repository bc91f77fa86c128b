#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "wavedepth/tensor.hpp"

namespace wavedepth::io {

// Writes via a sibling temporary file and a rename, so readers never see a
// partial file.
void write_file_atomic(const std::filesystem::path& path,
                       std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// Single-channel PFM ("Pf"), scale -1.0 (little-endian), rows stored bottom
// to top. Values are written as 32-bit floats.
void write_pfm(const std::filesystem::path& path, const Tensor& raster);
Tensor read_pfm(const std::filesystem::path& path);
Tensor parse_pfm(std::string_view bytes);
std::string encode_pfm(const Tensor& raster);

// Binary P6 (RGB) or P5 (gray), maxval 255. Values in [0, 1] map to
// round(255 v); reading yields byte / 255.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
Tensor parse_ppm(std::string_view bytes);
std::string encode_ppm(const Tensor& image);

// The value an 8-bit channel round trip produces.
double quantize_u8(double v);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

std::string csv_escape(std::string_view field);
std::string encode_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows);
void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace wavedepth::io
