#include "kw/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace kw {

using nlohmann::json;

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::add(std::string name, Tensor value) {
  if (has(name)) throw CheckpointError("duplicate checkpoint tensor '" + name + "'");
  tensors.emplace_back(std::move(name), std::move(value));
}

namespace {

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(in[at + std::size_t(i)]) << (8 * i);
  return v;
}

constexpr std::size_t kHeaderSize = 16;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  json manifest;
  manifest["metadata"] = ckpt.metadata;
  manifest["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const std::uint64_t bytes = std::uint64_t(t.size()) * 8;
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out{'K', 'W', 'C', 'K'};
  out.reserve(kHeaderSize + text.size() + offset);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : ckpt.tensors)
    for (Real v : t.data()) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw CheckpointError("checkpoint truncated: header needs 16 bytes");
  if (std::memcmp(bytes.data(), "KWCK", 4) != 0) throw CheckpointError("not a KWCK checkpoint (bad magic)");
  const auto version = std::uint32_t(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t manifest_len = get_le(bytes, 8, 8);
  if (manifest_len > bytes.size() - kHeaderSize) throw CheckpointError("checkpoint truncated inside manifest");

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderSize, bytes.begin() + std::ptrdiff_t(kHeaderSize + manifest_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const std::size_t payload_start = kHeaderSize + manifest_len;
  const std::uint64_t payload_len = bytes.size() - payload_start;

  Checkpoint ckpt;
  try {
    ckpt.metadata = manifest.at("metadata");
    std::uint64_t expected = 0;
    for (const json& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      if (entry.at("dtype").get<std::string>() != "f64")
        throw CheckpointError("tensor '" + name + "' has unsupported dtype");
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("bytes").get<std::uint64_t>();
      if (nbytes != shape_volume(shape) * 8)
        throw CheckpointError("tensor '" + name + "' byte size does not match its shape");
      if (offset != expected) throw CheckpointError("tensor '" + name + "' overlaps or leaves a gap in the payload");
      if (offset + nbytes > payload_len) throw CheckpointError("tensor '" + name + "' runs past the end of the payload");
      std::vector<Real> values(shape_volume(shape));
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = std::bit_cast<Real>(get_le(bytes, payload_start + offset + i * 8, 8));
      ckpt.add(name, Tensor(shape, std::move(values)));
      expected = offset + nbytes;
    }
    if (expected != payload_len)
      throw CheckpointError("payload has " + std::to_string(payload_len) + " bytes, manifest accounts for " +
                            std::to_string(expected));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("malformed tensor in checkpoint: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace kw
