#include "kw/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>

namespace kw {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetFormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > b.size())
    throw DatasetFormatError(path.string() + ": truncated header at byte offset " + std::to_string(at));
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace

Tensor LabeledImages::gather(std::span<const std::size_t> indices) const {
  Shape shape = images.shape();
  const std::size_t per = images.size() / shape[0];
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(images.ptr() + indices[i] * per, per, out.ptr() + i * per);
  return out;
}

std::vector<int> LabeledImages::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

LabeledImages load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                               std::size_t limit) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  if (const auto magic = be32(ib, 0, images); magic != 0x00000803)
    throw DatasetFormatError(images.string() + ": bad image magic " + hex(magic) + " at byte offset 0");
  if (const auto magic = be32(lb, 0, labels); magic != 0x00000801)
    throw DatasetFormatError(labels.string() + ": bad label magic " + hex(magic) + " at byte offset 0");
  const std::size_t count = be32(ib, 4, images), rows = be32(ib, 8, images), cols = be32(ib, 12, images);
  const std::size_t label_count = be32(lb, 4, labels);
  if (count != label_count)
    throw DatasetFormatError("image/label count mismatch: " + std::to_string(count) + " images vs " +
                             std::to_string(label_count) + " labels");
  if (count == 0 || rows == 0 || cols == 0) throw DatasetFormatError(images.string() + ": empty image set");
  const std::size_t pixels = rows * cols;
  if (ib.size() < 16 + count * pixels)
    throw DatasetFormatError(images.string() + ": truncated pixel data at byte offset " + std::to_string(ib.size()) +
                             ", expected " + std::to_string(16 + count * pixels) + " bytes");
  if (lb.size() < 8 + count)
    throw DatasetFormatError(labels.string() + ": truncated label data at byte offset " + std::to_string(lb.size()) +
                             ", expected " + std::to_string(8 + count) + " bytes");

  const std::size_t n = limit ? std::min(limit, count) : count;
  LabeledImages out;
  out.images = Tensor({n, 1, rows, cols});
  double mean = 0;
  for (std::size_t i = 0; i < n * pixels; ++i) {
    out.images[i] = Real(ib[16 + i]);
    mean += out.images[i];
  }
  mean /= double(n * pixels);
  double var = 0;
  for (auto v : out.images.data()) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / double(n * pixels));
  for (auto& v : out.images.data()) v = stddev > 0 ? (v - mean) / stddev : v - mean;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = int(lb[8 + i]);
  return out;
}

LabeledImages load_idx_split(const std::filesystem::path& dir, std::string_view split, std::size_t limit) {
  std::string prefix;
  if (split == "train")
    prefix = "train";
  else if (split == "test")
    prefix = "t10k";
  else
    throw std::invalid_argument("unknown dataset split '" + std::string(split) + "'");
  return load_idx_dataset(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), limit);
}

}  // namespace kw
