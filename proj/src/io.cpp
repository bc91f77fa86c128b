#include "wavedepth/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "wavedepth/error.hpp"

namespace wavedepth::io {
namespace {

static_assert(std::endian::native == std::endian::little,
              "raster I/O assumes a little-endian host");

// Sequential header tokenizer that reports byte offsets.
class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  std::string token(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(uc(bytes_[pos_]))) ++pos_;
    if (pos_ == start) {
      throw ParseError(std::string("missing ") + what, start);
    }
    return std::string(bytes_.substr(start, pos_ - start));
  }

  long integer(const char* what) {
    const std::size_t at = peek_offset();
    const std::string t = token(what);
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size() || v < 0) {
      throw ParseError(std::string("malformed ") + what + " '" + t + "'", at);
    }
    return v;
  }

  double real(const char* what) {
    const std::size_t at = peek_offset();
    const std::string t = token(what);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size()) {
      throw ParseError(std::string("malformed ") + what + " '" + t + "'", at);
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from the payload.
  void single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(uc(bytes_[pos_]))) {
      throw ParseError("expected whitespace before raster data", pos_);
    }
    ++pos_;
  }

 private:
  static unsigned char uc(char c) { return static_cast<unsigned char>(c); }

  std::size_t peek_offset() {
    skip_space_and_comments();
    return pos_;
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(uc(bytes_[pos_]))) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void require_payload(std::string_view bytes, std::size_t offset,
                     std::size_t needed, const char* format) {
  if (bytes.size() - offset < needed) {
    throw ParseError(std::string(format) + ": truncated raster data, need " +
                         std::to_string(needed) + " bytes, have " +
                         std::to_string(bytes.size() - offset),
                     bytes.size());
  }
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path,
                       std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double quantize_u8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<double>(static_cast<int>(std::lround(c * 255.0))) / 255.0;
}

std::string encode_pfm(const Tensor& raster) {
  const Shape& s = raster.shape();
  if (s.n() != 1 || s.c() != 1) {
    throw ContractError("write_pfm: expected a (1, 1, H, W) raster, got " +
                        s.str());
  }
  std::string out = "Pf\n" + std::to_string(s.w()) + " " +
                    std::to_string(s.h()) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + s.h() * s.w() * 4);
  char* p = out.data() + header;
  for (std::size_t row = 0; row < s.h(); ++row) {
    const std::size_t y = s.h() - 1 - row;
    for (std::size_t x = 0; x < s.w(); ++x) {
      const float f = static_cast<float>(raster.at(0, 0, y, x));
      std::memcpy(p, &f, 4);
      p += 4;
    }
  }
  return out;
}

Tensor parse_pfm(std::string_view bytes) {
  HeaderReader r(bytes);
  const std::size_t magic_at = 0;
  const std::string magic = r.token("PFM magic");
  if (magic != "Pf") {
    throw ParseError("PFM: expected single-channel magic 'Pf', got '" + magic +
                         "'",
                     magic_at);
  }
  const long w = r.integer("PFM width");
  const long h = r.integer("PFM height");
  const double scale = r.real("PFM scale");
  if (scale == 0.0) throw ParseError("PFM: zero scale field", r.offset());
  r.single_space();
  const std::size_t offset = r.offset();
  const auto W = static_cast<std::size_t>(w), H = static_cast<std::size_t>(h);
  require_payload(bytes, offset, W * H * 4, "PFM");
  const bool big_endian = scale > 0.0;
  Tensor out(Shape(1, 1, H, W));
  const char* p = bytes.data() + offset;
  for (std::size_t row = 0; row < H; ++row) {
    const std::size_t y = H - 1 - row;
    for (std::size_t x = 0; x < W; ++x) {
      std::uint32_t u;
      std::memcpy(&u, p, 4);
      if (big_endian) u = __builtin_bswap32(u);
      float f;
      std::memcpy(&f, &u, 4);
      out.at(0, 0, y, x) = f;
      p += 4;
    }
  }
  return out;
}

void write_pfm(const std::filesystem::path& path, const Tensor& raster) {
  write_file_atomic(path, encode_pfm(raster));
}

Tensor read_pfm(const std::filesystem::path& path) {
  try {
    return parse_pfm(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

std::string encode_ppm(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n() != 1 || (s.c() != 3 && s.c() != 1)) {
    throw ContractError("write_ppm: expected (1, 3, H, W) or (1, 1, H, W), "
                        "got " + s.str());
  }
  std::string out = std::string(s.c() == 3 ? "P6" : "P5") + "\n" +
                    std::to_string(s.w()) + " " + std::to_string(s.h()) +
                    "\n255\n";
  for (std::size_t y = 0; y < s.h(); ++y) {
    for (std::size_t x = 0; x < s.w(); ++x) {
      for (std::size_t c = 0; c < s.c(); ++c) {
        const double v = std::clamp(image.at(0, c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(std::lround(v * 255.0)));
      }
    }
  }
  return out;
}

Tensor parse_ppm(std::string_view bytes) {
  HeaderReader r(bytes);
  const std::string magic = r.token("PPM magic");
  if (magic != "P6" && magic != "P5") {
    throw ParseError("PPM: expected binary magic P6 or P5, got '" + magic + "'",
                     0);
  }
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const long w = r.integer("PPM width");
  const long h = r.integer("PPM height");
  const std::size_t maxval_at = r.offset();
  const long maxval = r.integer("PPM maxval");
  if (maxval != 255) {
    throw ParseError("PPM: only maxval 255 is supported, got " +
                         std::to_string(maxval),
                     maxval_at);
  }
  r.single_space();
  const std::size_t offset = r.offset();
  const auto W = static_cast<std::size_t>(w), H = static_cast<std::size_t>(h);
  require_payload(bytes, offset, W * H * channels, "PPM");
  Tensor out(Shape(1, channels, H, W));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        out.at(0, c, y, x) = static_cast<double>(*p++) / 255.0;
      }
    }
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  write_file_atomic(path, encode_ppm(image));
}

Tensor read_ppm(const std::filesystem::path& path) {
  try {
    return parse_ppm(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) {
    return std::string(field);
  }
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string encode_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  auto line = [&out](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i > 0) out += ',';
      out += csv_escape(fields[i]);
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  write_file_atomic(path, encode_csv(header, rows));
}

}  // namespace wavedepth::io
