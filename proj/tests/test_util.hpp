#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "wavedepth/random.hpp"
#include "wavedepth/tensor.hpp"

namespace wdtest {

using wavedepth::Rng;
using wavedepth::Shape;
using wavedepth::Tensor;

inline Tensor randn(Rng& rng, Shape s, double sd = 1.0) {
  Tensor t(s);
  for (double& v : t.values()) v = sd * rng.normal();
  return t;
}

inline Tensor row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape(1, 1, 1, n), std::move(v));
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("wavedepth-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const {
    return path_ / name;
  }

 private:
  std::filesystem::path path_;
};

}  // namespace wdtest
