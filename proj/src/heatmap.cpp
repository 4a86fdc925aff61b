#include "nmt/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "nmt/error.hpp"

namespace nmt {

namespace {

std::string label_or_index(const std::vector<std::string>& labels, std::size_t i) {
  return i < labels.size() ? labels[i] : std::to_string(i);
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string heatmap_tsv(const AttentionMatrix& m) {
  std::string out;
  for (std::size_t j = 0; j < m.cols(); ++j) out += "\t" + label_or_index(m.source_tokens, j);
  out += '\n';
  char buf[32];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out += label_or_index(m.target_tokens, i);
    for (Real w : m.weights[i]) {
      std::snprintf(buf, sizeof(buf), "\t%.6f", w);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string heatmap_pgm(const AttentionMatrix& m) {
  std::string out = "P2\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
  for (const auto& row : m.weights) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      const long v = std::lround(std::clamp(row[j], 0.0, 1.0) * 255.0);
      if (j) out += ' ';
      out += std::to_string(v);
    }
    out += '\n';
  }
  return out;
}

void write_heatmap(const AttentionMatrix& m, const std::filesystem::path& prefix) {
  write_file(prefix.string() + ".tsv", heatmap_tsv(m));
  write_file(prefix.string() + ".pgm", heatmap_pgm(m));
}

}  // namespace nmt
