#pragma once

// Named tensor bundle and its binary file format.
//
// Layout, all integers little-endian:
//   "VJW1"                      4-byte magic
//   u32 tensor count
//   per tensor:
//     u16 name length, UTF-8 name bytes
//     u8 rank, rank x u32 dims
//     prod(dims) x f32 (IEEE-754 binary32, little-endian)
//
// Tensors are written in name order, so equal stores give equal files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "vajra/error.hpp"
#include "vajra/tensor.hpp"

namespace vajra {

struct StoredTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  static StoredTensor from(const Tensor4& t) {
    return {{static_cast<std::uint32_t>(t.n()), static_cast<std::uint32_t>(t.c()),
             static_cast<std::uint32_t>(t.h()), static_cast<std::uint32_t>(t.w())},
            t.values()};
  }
  static StoredTensor vector(std::vector<float> v) {
    return {{static_cast<std::uint32_t>(v.size())}, std::move(v)};
  }

  std::size_t numel() const noexcept {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  /// Rank-4 view as a Tensor4 (rank 1..3 tensors are padded with leading 1s).
  Tensor4 as_tensor4() const {
    if (dims.size() > 4 || dims.empty()) throw ShapeError("stored tensor rank must be 1..4");
    int d[4] = {1, 1, 1, 1};
    const std::size_t off = 4 - dims.size();
    for (std::size_t i = 0; i < dims.size(); ++i) d[off + i] = static_cast<int>(dims[i]);
    return Tensor4(Shape4{d[0], d[1], d[2], d[3]}, data);
  }

  bool bit_equal(const StoredTensor& o) const noexcept {
    return dims == o.dims && data.size() == o.data.size() &&
           (data.empty() || std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0);
  }
};

/// Ordered map name -> tensor. Names are unique by construction.
class WeightStore {
 public:
  using Map = std::map<std::string, StoredTensor, std::less<>>;

  void put(std::string name, StoredTensor t) {
    if (t.numel() != t.data.size()) throw ShapeError("tensor '" + name + "': dims do not match data");
    tensors_[std::move(name)] = std::move(t);
  }

  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

  const StoredTensor& get(std::string_view name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("missing weight '" + std::string(name) + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  bool empty() const noexcept { return tensors_.empty(); }
  const Map& tensors() const noexcept { return tensors_; }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  bool bit_equal(const WeightStore& o) const {
    if (tensors_.size() != o.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = o.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
      if (a->first != b->first || !a->second.bit_equal(b->second)) return false;
    }
    return true;
  }

 private:
  Map tensors_;
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated weight file while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const WeightStore& w) {
  std::string out = "VJW1";
  if (w.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("too many tensors");
  detail::put_u32(out, static_cast<std::uint32_t>(w.size()));
  for (const auto& [name, t] : w) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("tensor name longer than 65535 bytes");
    }
    if (t.dims.size() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("tensor rank > 255");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_u8(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(out, d);
    for (float f : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline WeightStore deserialize_weights(std::string_view bytes) {
  detail::Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (magic != "VJW1") throw FormatError("bad magic: not a VJW1 weight file");
  const std::uint32_t count = r.u(4, "tensor count");
  WeightStore w;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u(2, "name length");
    std::string name(r.take(name_len, "name"));
    const std::uint32_t rank = r.u(1, "rank");
    StoredTensor t;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u(4, "dims");
      t.dims.push_back(dim);
      if (dim != 0 && numel > std::numeric_limits<std::uint64_t>::max() / dim) {
        throw FormatError("tensor '" + name + "': dimension product overflows");
      }
      numel *= dim;
    }
    if (numel > r.remaining() / 4) {
      throw FormatError("tensor '" + name + "': dims need " + std::to_string(numel) +
                        " values but the file is truncated");
    }
    t.data.resize(static_cast<std::size_t>(numel));
    for (auto& f : t.data) f = std::bit_cast<float>(r.u(4, "data"));
    if (w.contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
    w.put(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor");
  return w;
}

inline void save_weights(const WeightStore& w, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  const std::string bytes = serialize_weights(w);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write to '" + path + "' failed");
}

inline WeightStore load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace vajra
