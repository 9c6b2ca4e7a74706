#include "kw/stats.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace kw {

double AttentionStats::diagonal_ratio() const {
  if (one_hot_rows == 0) return 0;
  std::size_t hits = 0;
  for (auto v : beta_argmax_match) hits += v;
  return double(hits) / double(one_hot_rows);
}

std::vector<AttentionStats> collect_attention_stats(const KWNet& net, const LabeledImages& data, Real tau,
                                                    std::size_t batch) {
  if (data.size() == 0) throw std::invalid_argument("attention statistics need a non-empty dataset");
  const auto& layers = net.layers();
  std::vector<Tensor> sums;
  for (const auto& layer : layers) sums.emplace_back(Shape{layer.m(), layer.n_cols()});

  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.resize(std::min(data.size(), start + batch) - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto trace = net.run(data.gather(idx), tau);
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const Tensor& a = trace.alphas[li];
      const std::size_t per = sums[li].size();
      for (std::size_t s = 0; s < idx.size(); ++s)
        for (std::size_t k = 0; k < per; ++k) sums[li][k] += a[s * per + k];
    }
  }

  std::vector<AttentionStats> out;
  const auto& plan = net.plan();
  for (std::size_t gi = 0; gi < plan.groups.size(); ++gi) {
    const auto& g = plan.groups[gi];
    const BetaTable& beta = net.beta_tables()[gi];
    AttentionStats st;
    st.group = g.name;
    for (std::size_t j = 0; j < g.n; ++j) st.col_labels.push_back("e" + std::to_string(j + 1));
    if (g.has_zero_cell) st.col_labels.push_back("e_z");
    st.mean = Tensor({g.m_t, g.n_cols()});
    std::size_t row = 0;
    for (const auto& part : g.partitions) {
      std::size_t li = 0;
      while (layers[li].spec.id != part.layer_id) ++li;
      for (std::size_t i = 0; i < part.m(); ++i, ++row) {
        st.row_labels.push_back(part.layer_id + ":" + std::to_string(i));
        for (std::size_t j = 0; j < g.n_cols(); ++j)
          st.mean.at(row, j) = sums[li].at(i, j) / Real(data.size());
      }
    }
    st.beta_argmax_match.assign(g.m_t, 0);
    for (std::size_t r = 0; r < g.m_t; ++r) {
      if (beta.row_sum(r) != 1) continue;
      ++st.one_hot_rows;
      std::size_t best = 0;
      for (std::size_t j = 1; j < g.n_cols(); ++j)
        if (std::abs(st.mean.at(r, j)) > std::abs(st.mean.at(r, best))) best = j;
      st.beta_argmax_match[r] = beta.at(r, best);
    }
    out.push_back(std::move(st));
  }
  return out;
}

std::string attention_stats_csv(const AttentionStats& stats) {
  std::string csv = "slot";
  for (const auto& c : stats.col_labels) csv += "," + c;
  csv += '\n';
  char buf[32];
  for (std::size_t r = 0; r < stats.row_labels.size(); ++r) {
    csv += stats.row_labels[r];
    for (std::size_t j = 0; j < stats.col_labels.size(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.9g", double(stats.mean.at(r, j)));
      csv += buf;
    }
    csv += '\n';
  }
  return csv;
}

std::vector<std::filesystem::path> write_attention_stats(const std::vector<AttentionStats>& stats,
                                                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (const auto& st : stats) {
    paths.push_back(dir / (st.group + ".csv"));
    std::ofstream out(paths.back(), std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + paths.back().string());
    out << attention_stats_csv(st);
  }
  return paths;
}

}  // namespace kw
