#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "gpca/error.hpp"
#include "gpca/types.hpp"

namespace gpca {

/// Round-trip text form of a double (17 significant digits).
inline std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string matrix_to_csv(const Matrix& m) {
  std::string out;
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += format_full(m(i, j));
    }
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << content;
  if (!os) throw DataError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path);
  std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return out;
}

}  // namespace gpca
