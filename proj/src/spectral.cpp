#include "wavedepth/spectral.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <numbers>

#include "wavedepth/error.hpp"
#include "wavedepth/random.hpp"

namespace wavedepth {
namespace {

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

ComplexBuffer alloc_complex(std::size_t n) {
  return ComplexBuffer(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n)));
}

// In-place 2D complex DFT of an N x N buffer.
void dft2(fftw_complex* data, std::size_t n, int sign) {
  fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n),
                                    data, data, sign, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
}

// Signed frequency of DFT index k on an n-point grid.
long signed_freq(std::size_t k, std::size_t n) {
  return k < (n + 1) / 2 ? static_cast<long>(k)
                         : static_cast<long>(k) - static_cast<long>(n);
}

}  // namespace

Tensor to_grayscale(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n() != 1 || (s.c() != 1 && s.c() != 3)) {
    throw ContractError("spectral: expected a single grayscale or RGB image, "
                        "got " + s.str());
  }
  if (s.c() == 1) return image;
  Tensor out(Shape(1, 1, s.h(), s.w()));
  for (std::size_t y = 0; y < s.h(); ++y) {
    for (std::size_t x = 0; x < s.w(); ++x) {
      out.at(0, 0, y, x) = 0.299 * image.at(0, 0, y, x) +
                           0.587 * image.at(0, 1, y, x) +
                           0.114 * image.at(0, 2, y, x);
    }
  }
  return out;
}

RadialSpectrum radial_power_spectrum(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n() != 1 || s.c() != 1) {
    throw ContractError("radial_power_spectrum: expected (1, 1, N, N), got " +
                        s.str());
  }
  if (s.h() != s.w()) {
    throw ContractError("radial_power_spectrum: image is not square: " +
                        s.str());
  }
  const std::size_t n = s.h();
  if (n < 32) {
    throw ContractError("radial_power_spectrum: side " + std::to_string(n) +
                        " is below the minimum of 32");
  }
  const double mean = image.sum() / static_cast<double>(image.numel());
  std::vector<double> hann(n);
  for (std::size_t i = 0; i < n; ++i) {
    hann[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi *
                                    static_cast<double>(i) /
                                    static_cast<double>(n - 1)));
  }
  ComplexBuffer buf = alloc_complex(n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      buf[y * n + x][0] = (image.at(0, 0, y, x) - mean) * hann[y] * hann[x];
      buf[y * n + x][1] = 0.0;
    }
  }
  dft2(buf.get(), n, FFTW_FORWARD);

  const std::size_t max_bin = n / 2;
  std::vector<double> sum(max_bin + 1, 0.0);
  std::vector<std::size_t> count(max_bin + 1, 0);
  for (std::size_t ky = 0; ky < n; ++ky) {
    const double fy = static_cast<double>(signed_freq(ky, n));
    for (std::size_t kx = 0; kx < n; ++kx) {
      const double fx = static_cast<double>(signed_freq(kx, n));
      const auto bin = static_cast<std::size_t>(std::lround(std::hypot(fx, fy)));
      if (bin == 0 || bin > max_bin) continue;
      const double re = buf[ky * n + kx][0], im = buf[ky * n + kx][1];
      sum[bin] += re * re + im * im;
      ++count[bin];
    }
  }
  RadialSpectrum out;
  for (std::size_t b = 1; b <= max_bin; ++b) {
    out.frequency.push_back(static_cast<double>(b));
    out.power.push_back(count[b] > 0 ? sum[b] / static_cast<double>(count[b])
                                     : 0.0);
  }
  return out;
}

SpectrumFit fit_power_law(const std::vector<double>& frequency,
                          const std::vector<double>& power, FitBand band,
                          double nyquist) {
  if (frequency.size() != power.size()) {
    throw ContractError("fit_power_law: frequency and power lengths differ");
  }
  if (!(band.lo >= 0.0) || !(band.hi > band.lo)) {
    throw ContractError("fit_power_law: band must satisfy 0 <= lo < hi");
  }
  if (nyquist <= 0.0) {
    for (double f : frequency) nyquist = std::max(nyquist, f);
  }
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < frequency.size(); ++i) {
    const double f = frequency[i];
    if (f < band.lo * nyquist || f > band.hi * nyquist) continue;
    if (!(f > 0.0) || !(power[i] > 0.0)) continue;
    lx.push_back(std::log(f));
    ly.push_back(std::log(power[i]));
  }
  if (lx.size() < 8) {
    throw ContractError("fit_power_law: only " + std::to_string(lx.size()) +
                        " usable bins in band (need >= 8)");
  }
  const double m = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= m;
  my /= m;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  const double slope = sxy / sxx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double r = ly[i] - (my + slope * (lx[i] - mx));
    ss_res += r * r;
  }
  SpectrumFit fit;
  fit.alpha = -slope;
  fit.r2 = syy > 0.0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  fit.n_bins = lx.size();
  return fit;
}

SpectrumFit analyse_image(const Tensor& image, FitBand band) {
  const Tensor gray = to_grayscale(image);
  const auto [lo, hi] = std::minmax_element(gray.values().begin(), gray.values().end());
  if (lo == gray.values().end() || *lo == *hi) {
    throw DomainError("spectrum: image has no intensity variation");
  }
  const RadialSpectrum rs = radial_power_spectrum(gray);
  return fit_power_law(rs.frequency, rs.power, band,
                       static_cast<double>(gray.shape().h()) / 2.0);
}

std::vector<CorpusRow> corpus_report(const std::vector<CorpusImage>& images,
                                     FitBand band) {
  if (images.empty()) throw ContractError("corpus_report: empty corpus");
  std::vector<CorpusRow> rows;
  for (const CorpusImage& img : images) {
    CorpusRow row;
    row.id = img.id;
    try {
      row.fit = analyse_image(img.image, band);
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor power_law_field(std::size_t side, double beta, std::uint64_t seed) {
  if (side < 2) throw ContractError("power_law_field: side must be >= 2");
  Rng rng(seed);
  ComplexBuffer buf = alloc_complex(side * side);
  std::vector<bool> done(side * side, false);
  // Hermitian symmetry F(-k) = conj(F(k)) makes the synthesized field real
  // with exactly the shaped amplitude at every frequency.
  for (std::size_t ky = 0; ky < side; ++ky) {
    const double fy = static_cast<double>(signed_freq(ky, side));
    for (std::size_t kx = 0; kx < side; ++kx) {
      const std::size_t i = ky * side + kx;
      if (done[i]) continue;
      const std::size_t my = (side - ky) % side, mx = (side - kx) % side;
      const std::size_t j = my * side + mx;
      const double fx = static_cast<double>(signed_freq(kx, side));
      const double f = std::hypot(fx, fy);
      const double amp = f > 0.0 ? std::pow(f, -beta / 2.0) : 0.0;
      double phase = 2.0 * std::numbers::pi * rng.uniform();
      if (i == j) phase = phase < std::numbers::pi ? 0.0 : std::numbers::pi;
      buf[i][0] = amp * std::cos(phase);
      buf[i][1] = amp * std::sin(phase);
      buf[j][0] = buf[i][0];
      buf[j][1] = -buf[i][1];
      done[i] = done[j] = true;
    }
  }
  dft2(buf.get(), side, FFTW_BACKWARD);
  Tensor out(Shape(1, 1, side, side));
  double mean = 0.0;
  for (std::size_t i = 0; i < side * side; ++i) {
    out[i] = buf[i][0];
    mean += out[i];
  }
  mean /= static_cast<double>(side * side);
  double var = 0.0;
  for (std::size_t i = 0; i < side * side; ++i) {
    out[i] -= mean;
    var += out[i] * out[i];
  }
  const double norm = 1.0 / std::sqrt(var / static_cast<double>(side * side));
  out *= norm;
  return out;
}

}  // namespace wavedepth
