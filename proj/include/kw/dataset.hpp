#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "kw/tensor.hpp"

namespace kw {

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabeledImages {
  Tensor images;  // [N, 1, rows, cols], standardized
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

// IDX image (magic 0x00000803) and label (0x00000801) files. Pixels are
// standardized to zero mean and unit variance over the loaded samples.
// limit = 0 loads everything.
LabeledImages load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                               std::size_t limit = 0);

// split "train" -> train-{images-idx3,labels-idx1}-ubyte, "test" -> t10k-*.
LabeledImages load_idx_split(const std::filesystem::path& dir, std::string_view split, std::size_t limit = 0);

}  // namespace kw
