#pragma once

// Checkpoint file, little-endian:
//   "SPKL" | u32 version (1) | u32 tensor count
//   per tensor: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f32 data
// Batch-norm running statistics are stored as "<prefix>.running_mean" and
// "<prefix>.running_var" next to the parameters.

#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "spikelat/network.hpp"

namespace spikelat {

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'K', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensor = std::pair<std::string, Tensor>;

inline std::vector<NamedTensor> checkpoint_tensors(const Model& m) {
  std::vector<NamedTensor> out;
  for (const auto& p : m.params()) out.emplace_back(p.name, p.value);
  for (const auto& b : m.buffers()) {
    out.emplace_back(b.name + ".running_mean", b.stats.mean);
    out.emplace_back(b.name + ".running_var", b.stats.var);
  }
  return out;
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> b) : buf_(std::move(b)) {}
  std::uint64_t offset() const { return pos_; }
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > buf_.size())
      throw FormatError(std::string("checkpoint truncated while reading ") + what + ": need " +
                            std::to_string(n) + " bytes, " + std::to_string(buf_.size() - pos_) +
                            " left",
                        pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(buf_[pos_ + i])} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(buf_[pos_ + i])} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_checkpoint(const std::vector<NamedTensor>& tensors, const std::string& path) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  write_checkpoint(checkpoint_tensors(m), path);
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'", 0);
  detail::ByteReader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
  const std::string magic = r.str(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32("name length");
    std::string name = r.str(len, "name");
    const std::uint64_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim_at = r.offset();
      const std::uint64_t dim = r.u64("dimension");
      if (dim == 0 || dim > (1ull << 32)) throw FormatError("bad dimension in '" + name + "'", dim_at);
      shape.push_back(static_cast<std::size_t>(dim));
    }
    const std::size_t n = shape_size(shape);
    r.need(n * 4, "tensor data");
    Tensor t(shape);
    for (std::size_t j = 0; j < n; ++j) t[j] = r.f32("tensor data");
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last tensor", r.offset());
  return out;
}

// Rebuilds a model for `spec` and fills it from the file. The file must hold
// exactly the model's tensors with matching shapes.
inline Model load_checkpoint(const std::string& path, const ModelSpec& spec) {
  Model m = build_model(spec, 0);
  auto expected = checkpoint_tensors(m);
  auto loaded = read_checkpoint(path);
  std::set<std::string> want, got;
  for (const auto& e : expected) want.insert(e.first);
  for (const auto& l : loaded) got.insert(l.first);
  if (want != got || loaded.size() != expected.size())
    throw SpecError("checkpoint '" + path + "' does not match the model's tensor manifest");
  for (auto& [name, t] : loaded) {
    Tensor* dst = nullptr;
    for (auto& p : m.params())
      if (p.name == name) dst = &p.value;
    for (auto& b : m.buffers()) {
      if (name == b.name + ".running_mean") dst = &b.stats.mean;
      if (name == b.name + ".running_var") dst = &b.stats.var;
    }
    if (dst->shape() != t.shape())
      throw SpecError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                      ", model expects " + shape_str(dst->shape()));
    *dst = std::move(t);
  }
  return m;
}

// Copy of `m` with every stored value rounded through float, i.e. exactly what
// a checkpoint round trip yields.
inline Model rounded_to_f32(const Model& m) {
  Model out = m;
  auto round = [](Tensor& t) {
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  };
  for (auto& p : out.params()) round(p.value);
  for (auto& b : out.buffers()) {
    round(b.stats.mean);
    round(b.stats.var);
  }
  return out;
}

}  // namespace spikelat
