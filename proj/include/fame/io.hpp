#pragma once

// Little-endian binary container shared by dataset files and checkpoints.
//
//   "FAME" u16 version u16 bands u32 H u32 W
//   u32 meta_len, meta_len bytes of "key=value\n" lines
//   u32 array_count, then per array: u16 name_len, name, u32 bands, u32 h, u32 w
//   array payloads in table order: f32 values, band-major planes

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fame/data.hpp"
#include "fame/errors.hpp"
#include "fame/image.hpp"

namespace fame {

inline constexpr std::uint16_t kContainerVersion = 1;

struct NamedArray {
  std::string name;
  Image image;
};

struct Container {
  std::size_t bands = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::pair<std::string, std::string>> metadata;  // kept in insertion order
  std::vector<NamedArray> arrays;

  void set(std::string key, std::string value) {
    for (auto& kv : metadata)
      if (kv.first == key) {
        kv.second = std::move(value);
        return;
      }
    metadata.emplace_back(std::move(key), std::move(value));
  }

  const std::string* find_meta(const std::string& key) const {
    for (const auto& kv : metadata)
      if (kv.first == key) return &kv.second;
    return nullptr;
  }

  std::string meta(const std::string& key) const {
    if (const auto* v = find_meta(key)) return *v;
    throw FormatError("container has no metadata key '" + key + "'", 0);
  }

  const Image* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a.image;
    return nullptr;
  }

  const Image& array(const std::string& name) const {
    if (const auto* im = find(name)) return *im;
    throw FormatError("container has no array '" + name + "'", 0);
  }
};

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  float f32(const char* what) { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4, what))); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("truncated container while reading ") + what, pos_);
    }
  }
  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Container& c) {
  detail::ByteWriter w;
  w.bytes("FAME");
  w.u16(kContainerVersion);
  w.u16(static_cast<std::uint16_t>(c.bands));
  w.u32(static_cast<std::uint32_t>(c.h));
  w.u32(static_cast<std::uint32_t>(c.w));
  std::string meta;
  for (const auto& [k, v] : c.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("metadata key/value may not contain '=' (key) or newlines: " + k);
    }
    meta += k + "=" + v + "\n";
  }
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  w.u32(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    w.u16(static_cast<std::uint16_t>(a.name.size()));
    w.bytes(a.name);
    w.u32(static_cast<std::uint32_t>(a.image.bands));
    w.u32(static_cast<std::uint32_t>(a.image.h));
    w.u32(static_cast<std::uint32_t>(a.image.w));
  }
  for (const auto& a : c.arrays)
    for (float v : a.image.data) w.f32(v);
  return w.take();
}

inline Container decode(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "FAME") throw FormatError("bad magic, not a FAME container", 0);
  const std::size_t version_at = r.offset();
  if (const auto version = r.u16("version"); version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version), version_at);
  }
  Container c;
  c.bands = r.u16("band count");
  c.h = r.u32("height");
  c.w = r.u32("width");
  const std::uint32_t meta_len = r.u32("metadata length");
  const std::size_t meta_at = r.offset();
  const std::string meta = r.bytes(meta_len, "metadata");
  std::size_t start = 0;
  while (start < meta.size()) {
    const std::size_t end = meta.find('\n', start);
    const std::size_t eq = meta.find('=', start);
    if (end == std::string::npos || eq == std::string::npos || eq > end) {
      throw FormatError("malformed metadata line", meta_at + start);
    }
    c.metadata.emplace_back(meta.substr(start, eq - start), meta.substr(eq + 1, end - eq - 1));
    start = end + 1;
  }
  const std::uint32_t count = r.u32("array count");
  struct Entry {
    std::string name;
    std::size_t bands, h, w;
  };
  std::vector<Entry> table;
  std::size_t payload = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint16_t len = r.u16("array name length");
    e.name = r.bytes(len, "array name");
    e.bands = r.u32("array bands");
    e.h = r.u32("array height");
    e.w = r.u32("array width");
    const std::size_t plane = e.bands * e.h;  // each factor < 2^32, so no overflow here
    if (plane > bytes.size() || plane * e.w > bytes.size()) {
      throw FormatError("array '" + e.name + "' larger than the file", r.offset());
    }
    payload += plane * e.w * 4;
    table.push_back(std::move(e));
  }
  if (r.remaining() < payload) {
    throw FormatError("truncated container: " + std::to_string(payload) + " payload bytes expected, " +
                          std::to_string(r.remaining()) + " present",
                      r.offset() + r.remaining());
  }
  for (auto& e : table) {
    NamedArray a{e.name, Image(e.bands, e.h, e.w)};
    for (auto& v : a.image.data) v = r.f32("array payload");
    c.arrays.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after container payload", r.offset());
  return c;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  // Write-then-rename so readers never observe a partially written file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_container(const std::filesystem::path& path, const Container& c) { write_bytes(path, encode(c)); }

inline Container read_container(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason(), e.offset());
  }
}

// ---------------------------------------------------------------------------------------------
// Sample pairs

inline Container to_container(const SamplePair& p, std::vector<std::pair<std::string, std::string>> extra = {}) {
  Container c;
  c.bands = p.gt.bands;
  c.h = p.gt.h;
  c.w = p.gt.w;
  c.set("kind", "sample_pair");
  c.set("factor", std::to_string(p.factor));
  c.set("blur_sigma", std::to_string(static_cast<double>(p.factor) / 2.0));
  c.set("mask_radius_fraction", std::to_string(p.mask.low_freq_radius_fraction));
  c.set("mask_quantile", std::to_string(p.mask.magnitude_quantile));
  for (auto& [k, v] : extra) c.set(std::move(k), std::move(v));
  Image mask(2, p.mask.h, p.mask.w);
  for (std::size_t i = 0; i < p.mask.high.size(); ++i) {
    mask.data[i] = p.mask.high[i];
    mask.data[p.mask.high.size() + i] = p.mask.low[i];
  }
  c.arrays = {{"lrms", p.lrms}, {"pan", p.pan}, {"gt", p.gt}, {"mask", std::move(mask)}};
  return c;
}

/// Rebuilds a pair and verifies its invariants: geometry, one-hot mask, and lrms equal to the
/// degradation of gt.
inline SamplePair from_container(const Container& c) {
  SamplePair p;
  p.factor = static_cast<std::size_t>(std::stoul(c.meta("factor")));
  p.lrms = c.array("lrms");
  p.pan = c.array("pan");
  p.gt = c.array("gt");
  const Image& mask = c.array("mask");
  const std::size_t f = p.factor;
  if (f == 0 || p.pan.bands != 1 || p.pan.h != p.gt.h || p.pan.w != p.gt.w || p.lrms.bands != p.gt.bands ||
      p.lrms.h * f != p.gt.h || p.lrms.w * f != p.gt.w || mask.bands != 2 || mask.h != p.gt.h || mask.w != p.gt.w) {
    throw FormatError("sample pair arrays have inconsistent geometry", 0);
  }
  p.mask.h = mask.h;
  p.mask.w = mask.w;
  p.mask.low_freq_radius_fraction = std::stod(c.meta("mask_radius_fraction"));
  p.mask.magnitude_quantile = std::stod(c.meta("mask_quantile"));
  const std::size_t n = mask.h * mask.w;
  p.mask.high.resize(n);
  p.mask.low.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float hi = mask.data[i], lo = mask.data[n + i];
    if (!((hi == 0.0f || hi == 1.0f) && hi + lo == 1.0f)) throw FormatError("mask is not one-hot", 0);
    p.mask.high[i] = static_cast<std::uint8_t>(hi);
    p.mask.low[i] = static_cast<std::uint8_t>(lo);
  }
  if (degrade(p.gt, f) != p.lrms) throw FormatError("lrms is not the degradation of gt", 0);
  return p;
}

inline void save_pair(const std::filesystem::path& path, const SamplePair& p,
                      std::vector<std::pair<std::string, std::string>> extra = {}) {
  write_container(path, to_container(p, std::move(extra)));
}

inline SamplePair load_pair(const std::filesystem::path& path) {
  const auto c = read_container(path);
  try {
    return from_container(c);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason(), e.offset());
  }
}

/// All *.fame files in `dir`, sorted by file name.
inline std::vector<std::filesystem::path> list_containers(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".fame") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

/// Sample pairs of `dir` in an order shuffled deterministically by `shuffle_seed`.
inline std::vector<SamplePair> iterate(const std::filesystem::path& dir, std::uint64_t shuffle_seed) {
  auto files = list_containers(dir);
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(files.begin(), files.end(), rng);
  std::vector<SamplePair> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_pair(f));
  return out;
}

/// Sample pairs of `dir` in file-name order.
inline std::vector<SamplePair> load_dataset(const std::filesystem::path& dir) {
  std::vector<SamplePair> out;
  for (const auto& f : list_containers(dir)) out.push_back(load_pair(f));
  return out;
}

}  // namespace fame
