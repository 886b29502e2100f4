#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "NMBS"                      magic
//   u32 version                 = 1
//   u32 n, n bytes              UTF-8 config block, `key=value` lines
//   per tensor (tensor_count from the config block):
//     u16 name length, name bytes
//     u8 rank, rank x u32 dims
//     prod(dims) x f32 values
//
// Tensors are the network parameters ("param/<name>") followed by the Adam
// first and second moments ("adam.m/<name>", "adam.v/<name>").

#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/trainer.hpp"
#include "nimbus/unet.hpp"

namespace nimbus {

inline constexpr char kCheckpointMagic[4] = {'N', 'M', 'B', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  UNetConfig net;
  TrainConfig train;
  TrainState state;

  static Checkpoint from_state(const UNetConfig& net, const TrainConfig& train, const TrainState& state) {
    Checkpoint c;
    c.net = net;
    c.train = train;
    c.state = state;
    return c;
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    u32(bits);
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  bool has(std::size_t n) const { return data_.size() - pos_ >= n; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint8_t u8(const std::string& ctx) {
    need(1, ctx);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16(const std::string& ctx) {
    need(2, ctx);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(data_[pos_++]) << (8 * i));
    return v;
  }
  std::uint32_t u32(const std::string& ctx) {
    need(4, ctx);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  float f32(const std::string& ctx) {
    const std::uint32_t bits = u32(ctx);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
  }
  std::string_view bytes(std::size_t n, const std::string& ctx) {
    need(n, ctx);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const std::string& ctx) const {
    if (!has(n)) throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint truncated while reading " + ctx);
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  const Shape& s = t.shape();
  w.u8(4);
  for (int d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.values()) w.f32(v);
}

inline std::pair<std::string, Tensor<float>> read_tensor(ByteReader& r, std::size_t index) {
  const std::string where = "tensor #" + std::to_string(index);
  const std::uint16_t len = r.u16(where + " name length");
  const std::string name(r.bytes(len, where + " name"));
  const std::string ctx = "tensor '" + name + "'";
  const std::uint8_t rank = r.u8(ctx + " rank");
  if (rank < 1 || rank > 4)
    throw CheckpointError(CheckpointErrorKind::Malformed, ctx + " has unsupported rank " + std::to_string(rank));
  int dims[4] = {1, 1, 1, 1};
  for (int i = 0; i < rank; ++i) {
    const std::uint32_t d = r.u32(ctx + " dims");
    if (d < 1 || d > (1u << 24))
      throw CheckpointError(CheckpointErrorKind::Malformed, ctx + " has invalid dimension " + std::to_string(d));
    dims[4 - rank + i] = static_cast<int>(d);
  }
  const Shape shape{dims[0], dims[1], dims[2], dims[3]};
  if (!r.has(shape.size() * 4))
    throw CheckpointError(CheckpointErrorKind::Truncated, "checkpoint truncated inside " + ctx);
  std::vector<float> values(shape.size());
  for (auto& v : values) v = r.f32(ctx);
  return {name, Tensor<float>(shape, std::move(values))};
}

inline std::string config_block(const Checkpoint& c, std::size_t tensor_count) {
  std::ostringstream o;
  o << "unet.depth=" << c.net.depth << "\n"
    << "unet.base_channels=" << c.net.base_channels << "\n"
    << "unet.in_channels=" << c.net.in_channels << "\n"
    << "unet.out_channels=" << c.net.out_channels << "\n"
    << "unet.resolution=" << c.net.resolution << "\n"
    << "unet.seed=" << c.net.seed << "\n"
    << "train.epochs=" << c.train.epochs << "\n"
    << "train.batch_size=" << c.train.batch_size << "\n"
    << "train.learning_rate=" << format_double(c.train.learning_rate) << "\n"
    << "train.beta1=" << format_double(c.train.beta1) << "\n"
    << "train.beta2=" << format_double(c.train.beta2) << "\n"
    << "train.epsilon=" << format_double(c.train.epsilon) << "\n"
    << "train.seed=" << c.train.seed << "\n"
    << "train.shuffle_each_epoch=" << (c.train.shuffle_each_epoch ? 1 : 0) << "\n"
    << "state.epoch=" << c.state.epoch << "\n"
    << "state.step=" << c.state.step << "\n"
    << "tensor_count=" << tensor_count << "\n";
  return o.str();
}

class ConfigValues {
 public:
  explicit ConfigValues(std::string_view block) {
    std::size_t pos = 0;
    while (pos < block.size()) {
      std::size_t end = block.find('\n', pos);
      if (end == std::string_view::npos) end = block.size();
      const std::string_view line = block.substr(pos, end - pos);
      pos = end + 1;
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw CheckpointError(CheckpointErrorKind::Malformed, "config line without '=': " + std::string(line));
      values_[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
    }
  }

  template <typename V>
  V get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end())
      throw CheckpointError(CheckpointErrorKind::Malformed, "config block is missing " + key);
    V v{};
    const auto& s = it->second;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw CheckpointError(CheckpointErrorKind::Malformed, "bad value for " + key + ": " + s);
    return v;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  const auto& params = c.state.params;
  if (c.state.adam_m.size() != params.size() || c.state.adam_v.size() != params.size())
    throw UsageError("checkpoint: optimiser moments do not match parameters");
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(c.format_version);
  const std::string block = detail::config_block(c, 3 * params.size());
  w.u32(static_cast<std::uint32_t>(block.size()));
  w.bytes(block);
  for (const auto& e : params) detail::write_tensor(w, "param/" + e.name, *e.tensor);
  for (std::size_t i = 0; i < params.size(); ++i) detail::write_tensor(w, "adam.m/" + params[i].name, c.state.adam_m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) detail::write_tensor(w, "adam.v/" + params[i].name, c.state.adam_v[i]);
  return w.take();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (!r.has(4) || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(CheckpointErrorKind::BadMagic, "not a checkpoint: bad magic bytes");
  r.bytes(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::VersionMismatch,
                          "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t block_len = r.u32("config block length");
  const detail::ConfigValues cfg(r.bytes(block_len, "config block"));

  Checkpoint c;
  c.format_version = version;
  c.net.depth = cfg.get<int>("unet.depth");
  c.net.base_channels = cfg.get<int>("unet.base_channels");
  c.net.in_channels = cfg.get<int>("unet.in_channels");
  c.net.out_channels = cfg.get<int>("unet.out_channels");
  c.net.resolution = cfg.get<int>("unet.resolution");
  c.net.seed = cfg.get<std::uint64_t>("unet.seed");
  c.train.epochs = cfg.get<int>("train.epochs");
  c.train.batch_size = cfg.get<int>("train.batch_size");
  c.train.learning_rate = cfg.get<double>("train.learning_rate");
  c.train.beta1 = cfg.get<double>("train.beta1");
  c.train.beta2 = cfg.get<double>("train.beta2");
  c.train.epsilon = cfg.get<double>("train.epsilon");
  c.train.seed = cfg.get<std::uint64_t>("train.seed");
  c.train.shuffle_each_epoch = cfg.get<int>("train.shuffle_each_epoch") != 0;
  c.state.epoch = cfg.get<int>("state.epoch");
  c.state.step = cfg.get<long>("state.step");
  const auto tensor_count = cfg.get<std::size_t>("tensor_count");
  try {
    c.net.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::Malformed, std::string("invalid network config: ") + e.what());
  }

  const auto layout = parameter_layout(c.net);
  if (tensor_count != 3 * layout.size())
    throw CheckpointError(CheckpointErrorKind::Malformed, "expected " + std::to_string(3 * layout.size()) +
                                                              " tensors, header says " + std::to_string(tensor_count));
  c.state.params = UNetParams<float>(c.net);
  for (std::size_t i = 0; i < tensor_count; ++i) {
    auto [name, tensor] = detail::read_tensor(r, i);
    const auto& want = layout[i % layout.size()];
    const std::size_t group = i / layout.size();
    const std::string prefix = group == 0 ? "param/" : (group == 1 ? "adam.m/" : "adam.v/");
    if (name != prefix + want.name || tensor.shape() != want.shape)
      throw CheckpointError(CheckpointErrorKind::Malformed, "unexpected tensor '" + name + "' " +
                                                                tensor.shape().str() + ", wanted '" + prefix +
                                                                want.name + "' " + want.shape.str());
    if (group == 0)
      c.state.params.add(want.name, std::move(tensor));
    else if (group == 1)
      c.state.adam_m.push_back(std::move(tensor));
    else
      c.state.adam_v.push_back(std::move(tensor));
  }
  if (r.remaining() != 0)
    throw CheckpointError(CheckpointErrorKind::Malformed, std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorKind::Io, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorKind::Io, "failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::Io, "cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace nimbus
