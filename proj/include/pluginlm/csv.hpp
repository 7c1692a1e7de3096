#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "pluginlm/errors.hpp"

namespace pluginlm {

// Deterministic number formatting so identical runs emit identical bytes.
inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw FileNotFound(path);
  }

  void row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace pluginlm
