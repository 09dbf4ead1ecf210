#include "mfc/io.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace mfc {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv(const std::string& path, std::span<const std::string> header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i > 0) out << ',';
    out << header[i];
  }
  out << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw std::invalid_argument("write_csv: row width does not match header: " + path);
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0) out << ',';
      out << format_g17(row[i]);
    }
    out << '\n';
  }
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace mfc
