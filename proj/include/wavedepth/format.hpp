#pragma once

#include <cstdarg>
#include <cstdio>
#include <string>

namespace wavedepth {

// Decimal text that round-trips a double at the default 17 digits.
inline std::string format_double(double v, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// printf-style formatting into a std::string.
__attribute__((format(printf, 1, 2))) inline std::string format(
    const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list copy;
  va_copy(copy, args);
  const int n = std::vsnprintf(nullptr, 0, fmt, copy);
  va_end(copy);
  std::string out(n > 0 ? static_cast<std::size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
  va_end(args);
  return out;
}

}  // namespace wavedepth
