#pragma once

#include <array>
#include <cstddef>
#include <string_view>

#include "wavedepth/tensor.hpp"

namespace wavedepth {

// Subband AB applies filter A vertically and B horizontally.
enum class Band { kLL = 0, kLH = 1, kHL = 2, kHH = 3 };

inline constexpr std::array<Band, 4> kAllBands = {Band::kLL, Band::kLH,
                                                  Band::kHL, Band::kHH};

const char* band_name(Band band);
// Accepts "ll", "LL", ... ; throws ContractError on anything else.
Band parse_band(std::string_view tag);

struct SubbandSet {
  Tensor ll, lh, hl, hh;
  // Extents of the analysed signal; odd values mean a trailing pad was
  // added before analysis and must be stripped on synthesis.
  std::size_t height = 0;
  std::size_t width = 0;

  Tensor& band(Band b);
  const Tensor& band(Band b) const;
  double energy() const;
};

// Single-level orthonormal Haar analysis, per batch entry and channel.
// Odd spatial extents are reflect-padded by one on the trailing edge.
SubbandSet dwt2(const Tensor& x);

// Exact inverse of dwt2, stripping any recorded pad.
Tensor idwt2(const SubbandSet& s);

// Transposes of the two linear maps above, used for reverse-mode.
Tensor dwt2_transpose(const SubbandSet& grad);
SubbandSet idwt2_transpose(const Tensor& grad, std::size_t height,
                           std::size_t width);

}  // namespace wavedepth
