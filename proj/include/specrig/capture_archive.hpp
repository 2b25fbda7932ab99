#pragma once

// MBC1 container: one file per capture session holding named datasets,
// their timestamps, checksums and the originating configuration.
//
//   bytes 0-3   magic "MBC1"
//   bytes 4-7   format version, u32 LE
//   bytes 8-15  header length N, u64 LE
//   N bytes     header JSON (UTF-8)
//   payload     dataset chunks; offsets in the header are relative to here

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/error.hpp"
#include "specrig/frame.hpp"
#include "specrig/random.hpp"
#include "specrig/sync_config.hpp"

namespace specrig {

inline constexpr std::uint32_t kMbc1Version = 1;
inline constexpr char kMbc1Magic[4] = {'M', 'B', 'C', '1'};

enum class DType { u8, u16, f32, f64 };

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::u8: return "u8";
    case DType::u16: return "u16";
    case DType::f32: return "f32";
    case DType::f64: return "f64";
  }
  return "?";
}

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::u8: return 1;
    case DType::u16: return 2;
    case DType::f32: return 4;
    case DType::f64: return 8;
  }
  return 0;
}

inline DType dtype_from_name(const std::string& s) {
  if (s == "u8") return DType::u8;
  if (s == "u16") return DType::u16;
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ArchiveError(ArchiveError::Kind::corrupt_header, "", "unknown dtype '" + s + "'");
}

/// A dataset ready to be laid out: raw little-endian bytes plus description.
struct RawDataset {
  std::string name;
  std::string kind = "frames";  // "frames" for captured images, "tensor" otherwise
  DType dtype = DType::u8;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;
  int bit_depth = 0;
  std::string device;
  std::string tag;
  std::vector<std::int64_t> timestamps_ms;
  std::vector<std::int64_t> exposure_us;
};

struct DatasetInfo {
  std::string name;
  std::string kind;
  DType dtype = DType::u8;
  std::vector<std::int64_t> shape;
  int bit_depth = 0;
  std::string device;
  std::string tag;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t checksum = 0;
  std::vector<std::int64_t> timestamps_ms;
  std::vector<std::int64_t> exposure_us;

  std::int64_t frames() const { return shape.empty() ? 0 : shape[0]; }
};

struct ArchiveOptions {
  std::string capture_time = "1970-01-01T00:00:00Z";
  nlohmann::ordered_json attributes = nlohmann::ordered_json::object();
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw ArchiveError(ArchiveError::Kind::corrupt_header, "", "bad checksum field");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw ArchiveError(ArchiveError::Kind::corrupt_header, "", "bad checksum field");
  }
  return v;
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = n - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

/// Frames of one dataset as a [N,H,W,C] sample block (u8 up to 8 bits, else u16 LE).
inline RawDataset frames_to_dataset(const std::string& name, const std::vector<Frame>& frames) {
  RawDataset d;
  d.name = name;
  if (frames.empty()) {
    d.shape = {0, 0, 0, 0};
    return d;
  }
  const Frame& f0 = frames.front();
  d.bit_depth = f0.bit_depth;
  d.dtype = f0.bit_depth <= 8 ? DType::u8 : DType::u16;
  d.device = f0.device;
  d.tag = f0.illumination_tag;
  d.shape = {static_cast<std::int64_t>(frames.size()), f0.height, f0.width, f0.channels};
  const std::size_t bps = dtype_size(d.dtype);
  d.bytes.reserve(frames.size() * f0.sample_count() * bps);
  for (const auto& f : frames) {
    if (f.width != f0.width || f.height != f0.height || f.channels != f0.channels || f.bit_depth != f0.bit_depth)
      throw ArchiveError(ArchiveError::Kind::io, name, "dataset '" + name + "' mixes frame shapes");
    for (auto px : f.pixels) {
      d.bytes.push_back(static_cast<std::uint8_t>(px & 0xFF));
      if (bps == 2) d.bytes.push_back(static_cast<std::uint8_t>(px >> 8));
    }
    d.timestamps_ms.push_back(f.timestamp_ms);
    d.exposure_us.push_back(f.exposure_us);
  }
  return d;
}

/// A float64 tensor dataset (model weights, derived arrays).
inline RawDataset tensor_dataset(const std::string& name, std::vector<std::int64_t> shape,
                                 const std::vector<double>& values) {
  RawDataset d;
  d.name = name;
  d.kind = "tensor";
  d.dtype = DType::f64;
  d.shape = std::move(shape);
  d.bytes.resize(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int b = 0; b < 8; ++b) d.bytes[8 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return d;
}

/// Serializes datasets (sorted by name) into MBC1 bytes.
inline std::vector<std::uint8_t> encode_mbc1(std::vector<RawDataset> datasets, const std::string& config_text,
                                             const ArchiveOptions& opts, std::uint32_t version = kMbc1Version) {
  std::sort(datasets.begin(), datasets.end(), [](const RawDataset& a, const RawDataset& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < datasets.size(); ++i)
    if (datasets[i].name == datasets[i - 1].name)
      throw ArchiveError(ArchiveError::Kind::io, datasets[i].name, "duplicate dataset '" + datasets[i].name + "'");

  nlohmann::ordered_json header;
  header["format"] = "MBC1";
  header["version"] = version;
  header["capture_time"] = opts.capture_time;
  header["attributes"] = opts.attributes;
  header["config"] = config_text;
  auto list = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& d : datasets) {
    std::uint64_t expected = dtype_size(d.dtype);
    for (auto s : d.shape) expected *= static_cast<std::uint64_t>(s);
    if (d.shape.empty()) expected = 0;
    if (expected != d.bytes.size())
      throw ArchiveError(ArchiveError::Kind::io, d.name, "dataset '" + d.name + "' shape does not match its bytes");
    nlohmann::ordered_json j;
    j["name"] = d.name;
    j["kind"] = d.kind;
    j["dtype"] = dtype_name(d.dtype);
    j["shape"] = d.shape;
    j["bit_depth"] = d.bit_depth;
    j["device"] = d.device;
    j["tag"] = d.tag;
    j["offset"] = offset;
    j["length"] = d.bytes.size();
    j["checksum"] = detail::hex64(fnv1a64(d.bytes));
    j["timestamps_ms"] = d.timestamps_ms;
    j["exposure_us"] = d.exposure_us;
    list.push_back(std::move(j));
    offset += d.bytes.size();
  }
  header["datasets"] = std::move(list);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMbc1Magic, kMbc1Magic + 4);
  detail::put_u32(out, version);
  detail::put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& d : datasets) out.insert(out.end(), d.bytes.begin(), d.bytes.end());
  return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError(ArchiveError::Kind::io, "", "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw ArchiveError(ArchiveError::Kind::io, "", "write failed for '" + path.string() + "'");
}

struct ArchiveSummary {
  std::filesystem::path path;
  std::uint64_t file_bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::vector<DatasetInfo> datasets;
};

class ArchiveReader;
ArchiveReader read_archive(const std::filesystem::path& path);

/// Writes one capture session. Every frame group must be a dataset declared in `cfg`.
inline std::vector<std::uint8_t> encode_capture(const std::map<std::string, std::vector<Frame>>& groups,
                                                const CaptureConfig& cfg, const ArchiveOptions& opts,
                                                std::vector<RawDataset> extra = {}) {
  std::set<std::string> declared;
  for (const auto& [_, name] : cfg.dataset_names) declared.insert(name);
  std::vector<RawDataset> sets;
  for (const auto& [name, frames] : groups) {
    if (!declared.count(name))
      throw ArchiveError(ArchiveError::Kind::unknown_dataset, name, "dataset '" + name + "' is not declared in the configuration");
    sets.push_back(frames_to_dataset(name, frames));
  }
  for (auto& e : extra) sets.push_back(std::move(e));
  return encode_mbc1(std::move(sets), cfg.source_text, opts);
}

// ---------------------------------------------------------------------------
// Reading

class ArchiveReader {
 public:
  std::filesystem::path path;
  std::uint32_t version = 0;
  std::string capture_time;
  std::string config_text;
  nlohmann::json attributes;
  std::vector<DatasetInfo> datasets;
  std::uint64_t payload_start = 0;

  const DatasetInfo* find(const std::string& name) const {
    for (const auto& d : datasets)
      if (d.name == name) return &d;
    return nullptr;
  }

  const DatasetInfo& info(const std::string& name) const {
    const auto* d = find(name);
    if (!d) throw ArchiveError(ArchiveError::Kind::unknown_dataset, name, "no dataset '" + name + "' in " + path.string());
    return *d;
  }

  /// Raw payload of one dataset, checksum-verified.
  std::vector<std::uint8_t> bytes(const std::string& name) const {
    const auto& d = info(name);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArchiveError(ArchiveError::Kind::io, name, "cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> buf(d.length);
    in.seekg(static_cast<std::streamoff>(payload_start + d.offset));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(d.length));
    if (static_cast<std::uint64_t>(in.gcount()) != d.length || fnv1a64(buf) != d.checksum)
      throw ArchiveError(ArchiveError::Kind::checksum, name, "checksum mismatch in dataset '" + name + "'");
    return buf;
  }

  /// Frames of an image dataset, with timestamps and sequence numbers restored.
  std::vector<Frame> frames(const std::string& name) const {
    const auto& d = info(name);
    const auto raw = bytes(name);
    std::vector<Frame> out;
    if (d.shape.size() != 4) throw ArchiveError(ArchiveError::Kind::corrupt_header, name, "'" + name + "' is not a frame dataset");
    const std::size_t bps = dtype_size(d.dtype);
    const auto n = d.shape[0];
    std::size_t pos = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      Frame f(static_cast<int>(d.shape[2]), static_cast<int>(d.shape[1]), static_cast<int>(d.shape[3]), d.bit_depth);
      for (auto& px : f.pixels) {
        px = bps == 1 ? raw[pos] : static_cast<std::uint16_t>(raw[pos] | (raw[pos + 1] << 8));
        pos += bps;
      }
      f.dataset = name;
      f.device = d.device;
      f.illumination_tag = d.tag;
      f.sequence_index = i;
      if (static_cast<std::size_t>(i) < d.timestamps_ms.size()) f.timestamp_ms = d.timestamps_ms[static_cast<std::size_t>(i)];
      if (static_cast<std::size_t>(i) < d.exposure_us.size()) f.exposure_us = d.exposure_us[static_cast<std::size_t>(i)];
      out.push_back(std::move(f));
    }
    return out;
  }

  /// Float tensor dataset decoded to doubles.
  std::vector<double> tensor(const std::string& name) const {
    const auto& d = info(name);
    const auto raw = bytes(name);
    std::vector<double> out(raw.size() / dtype_size(d.dtype));
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (d.dtype == DType::f64) {
        double v;
        std::memcpy(&v, raw.data() + 8 * i, 8);
        out[i] = v;
      } else if (d.dtype == DType::f32) {
        float v;
        std::memcpy(&v, raw.data() + 4 * i, 4);
        out[i] = v;
      } else if (d.dtype == DType::u16) {
        out[i] = raw[2 * i] | (raw[2 * i + 1] << 8);
      } else {
        out[i] = raw[i];
      }
    }
    return out;
  }

  std::uint64_t payload_bytes() const {
    std::uint64_t n = 0;
    for (const auto& d : datasets) n += d.length;
    return n;
  }
};

inline ArchiveReader parse_archive_header(const std::filesystem::path& path, std::istream& in, std::uint64_t file_size) {
  ArchiveReader r;
  r.path = path;
  std::uint8_t fixed[16];
  in.read(reinterpret_cast<char*>(fixed), 16);
  if (in.gcount() < 4 || std::memcmp(fixed, kMbc1Magic, 4) != 0)
    throw ArchiveError(ArchiveError::Kind::bad_magic, "", "'" + path.string() + "' is not an MBC1 archive");
  if (in.gcount() < 16) throw ArchiveError(ArchiveError::Kind::corrupt_header, "", "truncated MBC1 header in " + path.string());
  r.version = static_cast<std::uint32_t>(detail::get_le(fixed + 4, 4));
  if (r.version != kMbc1Version)
    throw ArchiveError(ArchiveError::Kind::unsupported_version, "",
                       "unsupported MBC1 version " + std::to_string(r.version) + " in " + path.string());
  const std::uint64_t hlen = detail::get_le(fixed + 8, 8);
  if (hlen > file_size - 16) throw ArchiveError(ArchiveError::Kind::corrupt_header, "", "truncated MBC1 header in " + path.string());
  std::string text(hlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
    r.capture_time = h.at("capture_time").get<std::string>();
    r.config_text = h.at("config").get<std::string>();
    r.attributes = h.value("attributes", nlohmann::json::object());
    for (const auto& j : h.at("datasets")) {
      DatasetInfo d;
      d.name = j.at("name").get<std::string>();
      d.kind = j.value("kind", "frames");
      d.dtype = dtype_from_name(j.at("dtype").get<std::string>());
      d.shape = j.at("shape").get<std::vector<std::int64_t>>();
      d.bit_depth = j.value("bit_depth", 0);
      d.device = j.value("device", "");
      d.tag = j.value("tag", "");
      d.offset = j.at("offset").get<std::uint64_t>();
      d.length = j.at("length").get<std::uint64_t>();
      d.checksum = detail::parse_hex64(j.at("checksum").get<std::string>());
      d.timestamps_ms = j.value("timestamps_ms", std::vector<std::int64_t>{});
      d.exposure_us = j.value("exposure_us", std::vector<std::int64_t>{});
      r.datasets.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ArchiveError::Kind::corrupt_header, "", "corrupt MBC1 header in " + path.string() + ": " + e.what());
  }
  r.payload_start = 16 + hlen;
  return r;
}

/// Opens an archive and validates every dataset checksum; frames are decoded on demand.
inline ArchiveReader read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveError::Kind::io, "", "cannot open '" + path.string() + "'");
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw ArchiveError(ArchiveError::Kind::io, "", "cannot stat '" + path.string() + "'");
  ArchiveReader r = parse_archive_header(path, in, size);
  std::vector<std::uint8_t> buf;
  for (const auto& d : r.datasets) {
    buf.resize(d.length);
    in.clear();
    in.seekg(static_cast<std::streamoff>(r.payload_start + d.offset));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(d.length));
    if (static_cast<std::uint64_t>(in.gcount()) != d.length || fnv1a64(buf) != d.checksum)
      throw ArchiveError(ArchiveError::Kind::checksum, d.name, "checksum mismatch in dataset '" + d.name + "'");
  }
  return r;
}

inline ArchiveSummary write_archive(const std::map<std::string, std::vector<Frame>>& groups, const CaptureConfig& cfg,
                                    const std::filesystem::path& path, const ArchiveOptions& opts = {},
                                    std::vector<RawDataset> extra = {}) {
  const auto bytes = encode_capture(groups, cfg, opts, std::move(extra));
  write_file(path, bytes);
  ArchiveSummary s;
  s.path = path;
  s.file_bytes = bytes.size();
  const auto r = read_archive(path);
  s.datasets = r.datasets;
  s.payload_bytes = r.payload_bytes();
  return s;
}

// ---------------------------------------------------------------------------
// Accounting

struct DiffEntry {
  std::string dataset;
  std::int64_t expected = 0;
  std::int64_t actual = 0;
};

struct AccountingDiff {
  std::vector<DiffEntry> entries;
  bool empty() const { return entries.empty(); }

  std::string to_string() const {
    std::string s;
    for (const auto& e : entries)
      s += e.dataset + ": " + std::to_string(e.actual) + " vs " + std::to_string(e.expected) + " expected\n";
    return s;
  }
};

/// Per-dataset frame counts of the archive against the configuration's frame plan.
inline AccountingDiff verify_archive(const ArchiveReader& archive, const CaptureConfig& cfg) {
  const Schedule sched = compile_schedule(cfg);
  std::map<std::string, std::int64_t> expected, actual;
  for (const auto& [dev, sets] : sched.per_device_frame_plan)
    for (const auto& [name, n] : sets) expected[name] += n;
  for (const auto& d : archive.datasets)
    if (d.kind == "frames") actual[d.name] += d.frames();
  AccountingDiff diff;
  std::set<std::string> names;
  for (const auto& [n, _] : expected) names.insert(n);
  for (const auto& [n, _] : actual) names.insert(n);
  for (const auto& n : names) {
    const auto e = expected.count(n) ? expected[n] : 0;
    const auto a = actual.count(n) ? actual[n] : 0;
    if (e != a) diff.entries.push_back({n, e, a});
  }
  return diff;
}

}  // namespace specrig
