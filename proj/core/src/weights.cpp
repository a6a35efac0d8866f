#include "fieldnet/error.hpp"
#include "fieldnet/model.hpp"

#include "byteio.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

namespace fieldnet {

namespace detail {

void ByteReader::need(std::size_t n) const {
  if (n > data_.size() - pos_) throw DataError(fmt::format("{}: unexpected end of data", what_));
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

std::string_view ByteReader::bytes(std::size_t n) {
  need(n);
  std::string_view out(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError(fmt::format("write failed for '{}'", path.string()));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError(fmt::format("cannot move '{}' into place: {}", path.string(), ec.message()));
}

}  // namespace detail

namespace {

constexpr std::uint32_t kWeightVersion = 1;

// Biases are stored as rank-1 arrays, everything else with all four dims.
std::vector<std::uint32_t> stored_dims(const ad::Shape& s) {
  if (s.n == 1 && s.h == 1 && s.w == 1) return {static_cast<std::uint32_t>(s.c)};
  return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
}

struct StoredArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct Archive {
  std::string config_json;
  std::vector<StoredArray> arrays;
};

Archive parse_archive(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  detail::ByteReader in(bytes, offset, "weight archive");
  if (in.bytes(4) != std::string_view("FNWT")) throw DataError("weight archive: bad magic");
  const std::uint32_t version = in.u32();
  if (version != kWeightVersion) {
    throw DataError(fmt::format("weight archive: unsupported version {} (expected {})", version,
                                kWeightVersion));
  }
  Archive archive;
  archive.config_json = std::string(in.bytes(in.u32()));
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredArray array;
    array.name = std::string(in.bytes(in.u32()));
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 4) {
      throw DataError(fmt::format("weight archive: array '{}' has rank {}", array.name, rank));
    }
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      array.dims.push_back(in.u32());
      numel *= array.dims.back();
    }
    if (numel > in.remaining() / 4) {
      throw DataError(fmt::format("weight archive: array '{}' is truncated", array.name));
    }
    array.values.resize(numel);
    for (auto& v : array.values) v = in.f32();
    archive.arrays.push_back(std::move(array));
  }
  offset = in.offset();
  return archive;
}

void fill_model(FieldNet<float>& model, const Archive& archive) {
  auto& params = model.named_parameters();
  if (archive.arrays.size() != params.size()) {
    throw DataError(fmt::format("weight archive: {} arrays stored, model has {}",
                                archive.arrays.size(), params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, tensor] = params[i];
    const StoredArray& stored = archive.arrays[i];
    if (stored.name != name) {
      throw DataError(fmt::format("weight archive: expected array '{}', found '{}'", name,
                                  stored.name));
    }
    if (stored.dims != stored_dims(tensor.shape())) {
      throw DataError(fmt::format("weight archive: array '{}' shape does not match the model ({})",
                                  name, tensor.shape().str()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].second.mutable_data();
    std::copy(archive.arrays[i].values.begin(), archive.arrays[i].values.end(), values.begin());
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open weights '{}'", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// A training checkpoint is a weight archive followed by an "FNCK" section;
// anything else after the archive is rejected.
void check_tail(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset == bytes.size()) return;
  const std::string_view tail(reinterpret_cast<const char*>(bytes.data() + offset),
                              std::min<std::size_t>(4, bytes.size() - offset));
  if (tail != "FNCK") throw DataError("weight archive: trailing bytes");
}

}  // namespace

std::vector<std::uint8_t> serialize_weights(const FieldNet<float>& model) {
  detail::ByteWriter out;
  out.bytes("FNWT");
  out.u32(kWeightVersion);
  const std::string config = model.config().to_json();
  out.u32(static_cast<std::uint32_t>(config.size()));
  out.bytes(config);
  const auto& params = model.named_parameters();
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    out.u32(static_cast<std::uint32_t>(name.size()));
    out.bytes(name);
    const auto dims = stored_dims(tensor.shape());
    out.u32(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) out.u32(d);
    for (float v : tensor.data()) out.f32(v);
  }
  return out.take();
}

FieldNet<float> deserialize_weights(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  const Archive archive = parse_archive(bytes, offset);
  ModelConfig config;
  try {
    config = ModelConfig::from_json(archive.config_json);
  } catch (const ConfigError& e) {
    throw DataError(fmt::format("weight archive: {}", e.what()));
  }
  FieldNet<float> model(config);
  fill_model(model, archive);
  return model;
}

void deserialize_weights_into(FieldNet<float>& model, std::span<const std::uint8_t> bytes,
                              std::size_t& offset) {
  fill_model(model, parse_archive(bytes, offset));
}

void save_weights(const FieldNet<float>& model, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_weights(model));
}

FieldNet<float> load_weights(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t offset = 0;
  FieldNet<float> model = deserialize_weights(bytes, offset);
  check_tail(bytes, offset);
  return model;
}

void load_weights_into(FieldNet<float>& model, const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t offset = 0;
  deserialize_weights_into(model, bytes, offset);
  check_tail(bytes, offset);
}

}  // namespace fieldnet
