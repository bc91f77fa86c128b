#include "wavedepth/wavelet.hpp"

#include <cctype>
#include <string>

#include "wavedepth/error.hpp"

namespace wavedepth {
namespace {

std::size_t reflect_index(std::size_t extent) {
  return extent >= 2 ? extent - 2 : 0;
}

Tensor pad_trailing(const Tensor& x) {
  const Shape& s = x.shape();
  const std::size_t ph = s.h() + s.h() % 2;
  const std::size_t pw = s.w() + s.w() % 2;
  if (ph == s.h() && pw == s.w()) return x;
  Tensor out(Shape(s.n(), s.c(), ph, pw));
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < ph; ++y) {
        const std::size_t sy = y < s.h() ? y : reflect_index(s.h());
        for (std::size_t xx = 0; xx < pw; ++xx) {
          const std::size_t sx = xx < s.w() ? xx : reflect_index(s.w());
          out.at(n, c, y, xx) = x.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

// Adjoint of pad_trailing: folds the pad row/column back onto its source.
Tensor fold_trailing(const Tensor& padded, std::size_t height,
                     std::size_t width) {
  const Shape& s = padded.shape();
  if (s.h() == height && s.w() == width) return padded;
  Tensor out(Shape(s.n(), s.c(), height, width));
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < s.h(); ++y) {
        const std::size_t ty = y < height ? y : reflect_index(height);
        for (std::size_t xx = 0; xx < s.w(); ++xx) {
          const std::size_t tx = xx < width ? xx : reflect_index(width);
          out.at(n, c, ty, tx) += padded.at(n, c, y, xx);
        }
      }
    }
  }
  return out;
}

Tensor strip_trailing(const Tensor& x, std::size_t height, std::size_t width) {
  const Shape& s = x.shape();
  if (s.h() == height && s.w() == width) return x;
  Tensor out(Shape(s.n(), s.c(), height, width));
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t xx = 0; xx < width; ++xx) {
          out.at(n, c, y, xx) = x.at(n, c, y, xx);
        }
      }
    }
  }
  return out;
}

Tensor zero_extend(const Tensor& x, std::size_t ph, std::size_t pw) {
  const Shape& s = x.shape();
  if (s.h() == ph && s.w() == pw) return x;
  Tensor out(Shape(s.n(), s.c(), ph, pw));
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < s.h(); ++y) {
        for (std::size_t xx = 0; xx < s.w(); ++xx) {
          out.at(n, c, y, xx) = x.at(n, c, y, xx);
        }
      }
    }
  }
  return out;
}

// The 2x2 Haar block transform is its own inverse (a symmetric orthogonal
// matrix with entries +-1/2), so analysis and synthesis share this kernel.
inline void haar_block(double a, double b, double c, double d, double& o0,
                       double& o1, double& o2, double& o3) {
  o0 = 0.5 * (a + b + c + d);
  o1 = 0.5 * (a - b + c - d);
  o2 = 0.5 * (a + b - c - d);
  o3 = 0.5 * (a - b - c + d);
}

SubbandSet analyse_even(const Tensor& x) {
  const Shape& s = x.shape();
  const Shape half(s.n(), s.c(), s.h() / 2, s.w() / 2);
  SubbandSet out{Tensor(half), Tensor(half), Tensor(half), Tensor(half), s.h(),
                 s.w()};
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < half.h(); ++y) {
        for (std::size_t xx = 0; xx < half.w(); ++xx) {
          const double a = x.at(n, c, 2 * y, 2 * xx);
          const double b = x.at(n, c, 2 * y, 2 * xx + 1);
          const double cc = x.at(n, c, 2 * y + 1, 2 * xx);
          const double d = x.at(n, c, 2 * y + 1, 2 * xx + 1);
          haar_block(a, b, cc, d, out.ll.at(n, c, y, xx), out.lh.at(n, c, y, xx),
                     out.hl.at(n, c, y, xx), out.hh.at(n, c, y, xx));
        }
      }
    }
  }
  return out;
}

Tensor synthesise_even(const SubbandSet& s) {
  const Shape& h = s.ll.shape();
  Tensor out(Shape(h.n(), h.c(), 2 * h.h(), 2 * h.w()));
  for (std::size_t n = 0; n < h.n(); ++n) {
    for (std::size_t c = 0; c < h.c(); ++c) {
      for (std::size_t y = 0; y < h.h(); ++y) {
        for (std::size_t xx = 0; xx < h.w(); ++xx) {
          haar_block(s.ll.at(n, c, y, xx), s.lh.at(n, c, y, xx),
                     s.hl.at(n, c, y, xx), s.hh.at(n, c, y, xx),
                     out.at(n, c, 2 * y, 2 * xx), out.at(n, c, 2 * y, 2 * xx + 1),
                     out.at(n, c, 2 * y + 1, 2 * xx),
                     out.at(n, c, 2 * y + 1, 2 * xx + 1));
        }
      }
    }
  }
  return out;
}

void check_subbands(const SubbandSet& s, const char* op) {
  const Shape& ref = s.ll.shape();
  for (Band b : kAllBands) {
    if (s.band(b).shape() != ref) {
      throw ShapeError(std::string(op) + ": subband " + band_name(b) +
                       " has shape " + s.band(b).shape().str() +
                       ", expected " + ref.str());
    }
  }
  if ((s.height + 1) / 2 != ref.h() || (s.width + 1) / 2 != ref.w()) {
    throw ShapeError(std::string(op) + ": subbands " + ref.str() +
                     " cannot reconstruct " + std::to_string(s.height) + "x" +
                     std::to_string(s.width));
  }
}

}  // namespace

const char* band_name(Band band) {
  switch (band) {
    case Band::kLL: return "ll";
    case Band::kLH: return "lh";
    case Band::kHL: return "hl";
    case Band::kHH: return "hh";
  }
  return "?";
}

Band parse_band(std::string_view tag) {
  std::string lower(tag);
  for (char& ch : lower) ch = static_cast<char>(std::tolower(ch));
  for (Band b : kAllBands) {
    if (lower == band_name(b)) return b;
  }
  throw ContractError("unknown subband tag '" + std::string(tag) +
                      "' (expected ll, lh, hl or hh)");
}

Tensor& SubbandSet::band(Band b) {
  switch (b) {
    case Band::kLL: return ll;
    case Band::kLH: return lh;
    case Band::kHL: return hl;
    case Band::kHH: return hh;
  }
  return ll;
}

const Tensor& SubbandSet::band(Band b) const {
  return const_cast<SubbandSet*>(this)->band(b);
}

double SubbandSet::energy() const {
  return ll.sum_squares() + lh.sum_squares() + hl.sum_squares() +
         hh.sum_squares();
}

SubbandSet dwt2(const Tensor& x) {
  if (x.shape().h() == 0 || x.shape().w() == 0) {
    throw ContractError("dwt2: zero spatial extent in " + x.shape().str());
  }
  SubbandSet s = analyse_even(pad_trailing(x));
  s.height = x.shape().h();
  s.width = x.shape().w();
  return s;
}

Tensor idwt2(const SubbandSet& s) {
  check_subbands(s, "idwt2");
  return strip_trailing(synthesise_even(s), s.height, s.width);
}

Tensor dwt2_transpose(const SubbandSet& grad) {
  check_subbands(grad, "dwt2_transpose");
  return fold_trailing(synthesise_even(grad), grad.height, grad.width);
}

SubbandSet idwt2_transpose(const Tensor& grad, std::size_t height,
                           std::size_t width) {
  SubbandSet s =
      analyse_even(zero_extend(grad, height + height % 2, width + width % 2));
  s.height = height;
  s.width = width;
  return s;
}

}  // namespace wavedepth
