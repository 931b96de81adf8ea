#pragma once

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <vector>

#include "ordgaze/gaze_net.hpp"

namespace ordgaze {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'O', 'R', 'D', 'G', 'A', 'Z', 'E', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Metadata = std::map<std::string, std::string>;

/// Shortest text that parses back to the same double.
inline std::string exact(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_exact(const std::string& s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

inline std::string conv_stack_string(const std::vector<ConvSpec>& stack) {
  std::string out;
  for (const auto& c : stack) {
    if (!out.empty()) out += ',';
    out += std::to_string(c.channels) + "x" + std::to_string(c.kernel) + "s" + std::to_string(c.stride);
  }
  return out;
}

/// "16x3s2,32x3s2" -> channels x kernel, stride.
inline std::vector<ConvSpec> parse_conv_stack(const std::string& s) {
  std::vector<ConvSpec> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    ConvSpec c;
    char x = 0, st = 0;
    std::istringstream is(item);
    if (!(is >> c.channels >> x >> c.kernel >> st >> c.stride) || x != 'x' || st != 's' || !is.eof())
      throw std::invalid_argument("bad conv spec '" + item + "' (want CxKsS)");
    out.push_back(c);
  }
  if (out.empty()) throw std::invalid_argument("empty conv stack");
  return out;
}

namespace ckpt_detail {

class Writer {
 public:
  template <class V>
  void pod(const V& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size, std::string path) : d_(data), n_(size), path_(std::move(path)) {}
  template <class V>
  V pod() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, d_ + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, d_ + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto len = pod<std::uint32_t>();
    need(len);
    std::string s(d_ + pos_, len);
    pos_ += len;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t k) const {
    if (k > n_ - pos_) throw CheckpointError(path_ + ": unexpected end of checkpoint data");
  }
  const char* d_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string path_;
};

inline std::uint32_t crc(const char* p, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

template <class T>
std::uint32_t dtype_tag() {
  return sizeof(T) == 4 ? 4u : 8u;
}

inline void put_net_config(Metadata& m, const GazeNetConfig& c, const OrdinalConfig& x,
                           const OrdinalConfig& y) {
  m["net.patch_size"] = std::to_string(c.patch_size);
  m["net.in_channels"] = std::to_string(c.in_channels);
  m["net.branch_feature_dim"] = std::to_string(c.branch_feature_dim);
  m["net.fusion_dim"] = std::to_string(c.fusion_dim);
  m["net.bins_x"] = std::to_string(c.bins_x);
  m["net.bins_y"] = std::to_string(c.bins_y);
  m["net.conv_stack"] = conv_stack_string(c.conv_stack);
  for (auto [tag, o] : {std::pair{"x", &x}, {"y", &y}}) {
    const std::string k = std::string("codec.") + tag;
    m[k + ".bins"] = std::to_string(o->bins);
    m[k + ".bin_size"] = exact(o->bin_size);
    m[k + ".range_min"] = exact(o->range_min);
  }
}

inline const std::string& need(const Metadata& m, const std::string& key, const std::string& path) {
  auto it = m.find(key);
  if (it == m.end()) throw CheckpointError(path + ": metadata key '" + key + "' missing");
  return it->second;
}

}  // namespace ckpt_detail

/// Atomically writes model parameters, BN buffers, network/codec config and meta.
/// Layout: magic, u32 version, u32 dtype, metadata block, array table, u32 CRC32.
template <class T>
void save_checkpoint(GazeNet<T>& model, const Metadata& meta, const std::filesystem::path& path) {
  Metadata all = meta;
  ckpt_detail::put_net_config(all, model.config(), model.x_codec(), model.y_codec());

  ckpt_detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod(kCheckpointVersion);
  w.pod(ckpt_detail::dtype_tag<T>());
  std::string block;
  for (const auto& [k, v] : all) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw CheckpointError("metadata entry '" + k + "' contains '=' or a newline");
    block += k + "=" + v + "\n";
  }
  w.str(block);

  auto params = model.parameters();
  auto buffers = model.buffers();
  w.pod(static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (auto& p : params) {
    w.str(p.name);
    const auto& shape = p.tensor.shape();
    w.pod(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.pod(static_cast<std::uint64_t>(d));
    w.bytes(p.tensor.values().data(), p.tensor.numel() * sizeof(T));
  }
  for (auto& [name, buf] : buffers) {
    w.str(name);
    w.pod(std::uint32_t{1});
    w.pod(static_cast<std::uint64_t>(buf->size()));
    w.bytes(buf->data(), buf->size() * sizeof(T));
  }
  auto& bytes = w.buffer();
  const auto sum = ckpt_detail::crc(bytes.data(), bytes.size());
  w.pod(sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(tmp.string() + ": cannot open for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
struct LoadedCheckpoint {
  GazeNet<T> model;
  Metadata meta;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(where + ": cannot open checkpoint");
  std::vector<char> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  constexpr std::size_t head = sizeof kCheckpointMagic + 8;
  if (data.size() < head + 4) throw CheckpointError(where + ": file too short to be a checkpoint");
  if (std::memcmp(data.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError(where + ": bad magic, not a checkpoint");

  ckpt_detail::Reader r(data.data(), data.size() - 4, where);
  char magic[8];
  r.bytes(magic, 8);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(where + ": unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  std::uint32_t stored;
  std::memcpy(&stored, data.data() + data.size() - 4, 4);
  if (ckpt_detail::crc(data.data(), data.size() - 4) != stored)
    throw CheckpointError(where + ": checksum mismatch (truncated or corrupted file)");
  const auto dtype = r.pod<std::uint32_t>();
  if (dtype != ckpt_detail::dtype_tag<T>())
    throw CheckpointError(where + ": stored precision is f" + std::to_string(dtype * 8) +
                          ", requested f" + std::to_string(sizeof(T) * 8));

  Metadata meta;
  {
    std::istringstream block(r.str());
    std::string line;
    while (std::getline(block, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw CheckpointError(where + ": malformed metadata line");
      meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  using ckpt_detail::need;
  auto num = [&](const std::string& k) { return static_cast<std::size_t>(std::stoull(need(meta, k, where))); };
  GazeNetConfig cfg;
  OrdinalConfig xc, yc;
  try {
    cfg.patch_size = num("net.patch_size");
    cfg.in_channels = num("net.in_channels");
    cfg.branch_feature_dim = num("net.branch_feature_dim");
    cfg.fusion_dim = num("net.fusion_dim");
    cfg.bins_x = num("net.bins_x");
    cfg.bins_y = num("net.bins_y");
    cfg.conv_stack = parse_conv_stack(need(meta, "net.conv_stack", where));
    for (auto [tag, o] : {std::pair{"x", &xc}, {"y", &yc}}) {
      const std::string k = std::string("codec.") + tag;
      o->bins = num(k + ".bins");
      o->bin_size = parse_exact(need(meta, k + ".bin_size", where));
      o->range_min = parse_exact(need(meta, k + ".range_min", where));
    }
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(where + ": bad network metadata: " + e.what());
  }
  GazeNet<T> model(cfg, xc, yc);

  std::map<std::string, std::vector<T>*> targets;
  std::map<std::string, Shape> shapes;
  for (auto& p : model.parameters()) {
    targets[p.name] = &p.tensor.storage();
    shapes[p.name] = p.tensor.shape();
  }
  for (auto& [name, buf] : model.buffers()) {
    targets[name] = buf;
    shapes[name] = {buf->size()};
  }
  const auto count = r.pod<std::uint32_t>();
  if (count != targets.size())
    throw CheckpointError(where + ": " + std::to_string(count) + " arrays stored, model has " +
                          std::to_string(targets.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.str();
    auto it = targets.find(name);
    if (it == targets.end()) throw CheckpointError(where + ": unknown array '" + name + "'");
    Shape shape(r.pod<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    if (shape != shapes[name]) throw CheckpointError(where + ": shape mismatch for '" + name + "'");
    auto& dst = *it->second;
    r.bytes(dst.data(), dst.size() * sizeof(T));
    targets.erase(it);
  }
  if (!r.done()) throw CheckpointError(where + ": trailing bytes after array table");
  model.set_training(false);
  return {std::move(model), std::move(meta)};
}

}  // namespace ordgaze
