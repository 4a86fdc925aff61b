#pragma once

#include <filesystem>
#include <string>

#include "nmt/attention.hpp"

namespace nmt {

/// Header row of source tokens, then one row per target token with weights to 6 decimals.
std::string heatmap_tsv(const AttentionMatrix& m);

/// Plain PGM (P2), one pixel per cell, weight 1.0 maps to 255.
std::string heatmap_pgm(const AttentionMatrix& m);

/// Writes "<prefix>.tsv" and "<prefix>.pgm".
void write_heatmap(const AttentionMatrix& m, const std::filesystem::path& prefix);

}  // namespace nmt
