#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "kw/dataset.hpp"
#include "kw/model.hpp"

namespace kw {

// Mean attention per mixture slot over a dataset, one matrix per warehouse.
struct AttentionStats {
  std::string group;
  std::vector<std::string> row_labels;  // "<layer>:<slot>"
  std::vector<std::string> col_labels;  // "e1".."en", then "e_z" when present
  Tensor mean;                          // [m_t, n_cols]
  std::vector<std::uint8_t> beta_argmax_match;  // per row; only rows with a one-hot beta are counted
  std::size_t one_hot_rows = 0;

  // Fraction of one-hot beta rows whose argmax |mean| sits on the beta column.
  double diagonal_ratio() const;
};

std::vector<AttentionStats> collect_attention_stats(const KWNet& net, const LabeledImages& data, Real tau = 0,
                                                    std::size_t batch = 128);

// "slot,e1,...,en[,e_z]" then one row per slot, 9 significant digits.
std::string attention_stats_csv(const AttentionStats& stats);

// Writes <dir>/<group>.csv for every warehouse and returns the paths.
std::vector<std::filesystem::path> write_attention_stats(const std::vector<AttentionStats>& stats,
                                                         const std::filesystem::path& dir);

}  // namespace kw
