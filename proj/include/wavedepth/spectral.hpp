#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wavedepth/tensor.hpp"

namespace wavedepth {

struct RadialSpectrum {
  std::vector<double> frequency;  // cycles per image side, 1 .. side/2
  std::vector<double> power;      // mean |F|^2 over the annulus
};

// Radially averaged power spectrum of a square single-channel image
// (1, 1, N, N) with N >= 32. The image is mean-subtracted and Hann-windowed
// before the transform; annuli are integer-rounded radii, DC excluded.
RadialSpectrum radial_power_spectrum(const Tensor& image);

struct FitBand {
  double lo = 0.05;  // fractions of the Nyquist frequency
  double hi = 0.45;
};

struct SpectrumFit {
  double alpha = 0.0;  // P(f) ~ f^-alpha
  double r2 = 0.0;
  std::size_t n_bins = 0;
};

// Least squares on (log f, log P) over bins inside the band with P > 0.
// `nyquist` <= 0 means the largest supplied frequency.
SpectrumFit fit_power_law(const std::vector<double>& frequency,
                          const std::vector<double>& power, FitBand band = {},
                          double nyquist = 0.0);

SpectrumFit analyse_image(const Tensor& image, FitBand band = {});

struct CorpusImage {
  std::string id;
  Tensor image;  // grayscale (1, 1, N, N) or RGB (1, 3, N, N)
};

struct CorpusRow {
  std::string id;
  bool ok = false;
  SpectrumFit fit;
  std::string error;
};

// One fit per image; failures are recorded on the row, never thrown.
std::vector<CorpusRow> corpus_report(const std::vector<CorpusImage>& images,
                                     FitBand band = {});

// Grayscale (1, 1, H, W) from RGB or single-channel input.
Tensor to_grayscale(const Tensor& image);

// Gaussian random field with power spectrum ~ f^-beta: shaped amplitudes,
// uniformly random phases, inverse transform. Periodic, zero mean.
Tensor power_law_field(std::size_t side, double beta, std::uint64_t seed);

}  // namespace wavedepth
