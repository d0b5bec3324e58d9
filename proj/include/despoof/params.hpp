#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "despoof/hash.hpp"
#include "despoof/tape.hpp"
#include "despoof/tensor.hpp"

namespace despoof {

static_assert(std::endian::native == std::endian::little,
              "the parameter container is written in host order and assumes little-endian");

/// Ordered, named parameter collection for one network.
template <typename T>
class ParamSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, std::move(value), {}, trainable}));
    return *params_.back();
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::vector<Parameter<T>*> trainable() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  /// Number of trainable scalars (running statistics excluded).
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (auto& p : params_)
      if (p->trainable) n += p->value.size();
    return n;
  }

  void clear_grads() {
    for (auto& p : params_) p->clear_grad();
  }

  /// Freezing turns every parameter into a non-differentiated leaf.
  void set_trainable(bool on) {
    for (auto& p : params_)
      if (!is_state(p->name)) p->trainable = on;
  }

  /// FNV-1a over names and float32 images of the values, optionally
  /// skipping batch-norm running statistics.
  std::uint64_t checksum(bool include_state = true) const {
    Fnv1a h;
    for (auto& p : params_) {
      if (!include_state && is_state(p->name)) continue;
      h.update(p->name);
      for (T v : p->value.data()) {
        const float f = static_cast<float>(v);
        h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(&f), 4));
      }
    }
    return h.digest();
  }

  static bool is_state(const std::string& name) {
    auto ends = [&](const char* s) {
      const std::size_t n = std::strlen(s);
      return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
    };
    return ends("/rmean") || ends("/rvar");
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Flat binary container: "DSPF", u32 version, u32 count, then per entry
// u32 name length, name bytes, u32 rank, u32 dims..., float32 data.

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError("parameter container truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const std::vector<NamedTensor>& entries) {
  std::string out = "DSPF";
  detail::put_u32(out, kContainerVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(e.value.raw()), e.value.size() * 4);
  }
  return out;
}

inline std::vector<NamedTensor> decode_container(std::string_view bytes) {
  detail::Reader r(bytes);
  if (std::string_view(r.take(4), 4) != "DSPF") throw DataError("not a DSPF container (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion)
    throw DataError("unsupported DSPF version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    const std::uint32_t len = r.u32();
    e.name.assign(r.take(len), len);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(element_count(shape));
    std::memcpy(data.data(), r.take(data.size() * 4), data.size() * 4);
    e.value = Tensor<float>(shape, std::move(data));
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw DataError("trailing bytes after DSPF container");
  return entries;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes to `path.tmp` and renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const std::string tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot rename " + tmp + " to " + path.string());
}

template <typename T>
void append_entries(const ParamSet<T>& set, std::vector<NamedTensor>& out) {
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back({set[i].name, set[i].value.template cast<float>()});
}

/// Copies matching entries into `set`; every parameter of the set must be
/// present with the same shape.
template <typename T>
void assign_entries(ParamSet<T>& set, const std::vector<NamedTensor>& entries) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto& p = set[i];
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("container is missing parameter " + p.name);
    if (it->second->value.shape() != p.value.shape())
      throw DataError("parameter " + p.name + " has shape " + to_string(it->second->value.shape()) +
                      " in container, expected " + to_string(p.value.shape()));
    p.value = it->second->value.template cast<T>();
  }
}

// ---------------------------------------------------------------------------
// Initialization.

/// He-uniform: U(-a, a) with a = gain * sqrt(3 / fan_in), gain sqrt(2) by default.
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = std::sqrt(2.0)) {
  Tensor<T> t(std::move(shape));
  const double a = gain * std::sqrt(3.0 / double(fan_in));
  for (auto& v : t.data()) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    v = T((2.0 * u - 1.0) * a);
  }
  return t;
}

}  // namespace despoof
