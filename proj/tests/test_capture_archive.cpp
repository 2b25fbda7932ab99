#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "specrig/capture_archive.hpp"
#include "support.hpp"

using namespace specrig;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("specrig_archive_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

Frame pattern_frame(int w, int h, int c, int bits, std::uint64_t seed, std::int64_t t) {
  Frame f(w, h, c, bits);
  Rng rng(seed);
  for (auto& p : f.pixels) p = static_cast<std::uint16_t>(rng.below(static_cast<std::uint64_t>(f.max_value()) + 1));
  f.timestamp_ms = t;
  f.exposure_us = 1000 + t;
  return f;
}

// Tiny frames for every planned dataset of a configuration.
std::map<std::string, std::vector<Frame>> planned_frames(const CaptureConfig& cfg) {
  const auto s = compile_schedule(cfg);
  std::map<std::string, std::vector<Frame>> groups;
  std::uint64_t seed = 1;
  for (const auto& [dev, plan] : s.per_device_frame_plan) {
    const auto* d = cfg.find_device(dev);
    for (const auto& [name, n] : plan)
      for (int i = 0; i < n; ++i) {
        groups[name].push_back(pattern_frame(4, 3, d->channels, d->bit_depth, seed++, i));
        groups[name].back().device = dev;
      }
  }
  return groups;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

ArchiveError::Kind read_error(const fs::path& p, std::string* dataset = nullptr) {
  try {
    read_archive(p);
  } catch (const ArchiveError& e) {
    if (dataset) *dataset = e.dataset();
    return e.kind();
  }
  ADD_FAILURE() << "no error reading " << p;
  return ArchiveError::Kind::io;
}

}  // namespace

TEST(Archive, RoundTripIsBitExact) {
  TempDir dir;
  const auto cfg = test::fixture("finger");
  const auto groups = planned_frames(cfg);
  write_archive(groups, cfg, dir / "a.mbc1");
  const auto r = read_archive(dir / "a.mbc1");
  EXPECT_EQ(r.config_text, cfg.source_text);
  for (const auto& [name, frames] : groups) {
    const auto back = r.frames(name);
    ASSERT_EQ(back.size(), frames.size()) << name;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      EXPECT_EQ(back[i].pixels, frames[i].pixels);
      EXPECT_EQ(back[i].timestamp_ms, frames[i].timestamp_ms);
      EXPECT_EQ(back[i].exposure_us, frames[i].exposure_us);
      EXPECT_EQ(back[i].bit_depth, frames[i].bit_depth);
    }
  }
}

TEST(Archive, DeterministicAndOrderIndependent) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  const auto groups = planned_frames(cfg);
  write_archive(groups, cfg, dir / "a.mbc1");
  write_archive(groups, cfg, dir / "b.mbc1");
  EXPECT_EQ(slurp(dir / "a.mbc1"), slurp(dir / "b.mbc1"));
  std::vector<RawDataset> fwd, rev;
  for (const auto& [name, frames] : groups) fwd.push_back(frames_to_dataset(name, frames));
  rev.assign(fwd.rbegin(), fwd.rend());
  EXPECT_EQ(encode_mbc1(fwd, cfg.source_text, {}), encode_mbc1(rev, cfg.source_text, {}));
}

TEST(Archive, EmptySessionIsValid) {
  TempDir dir;
  const auto cfg = test::fixture("face");
  const auto s = write_archive({}, cfg, dir / "e.mbc1");
  EXPECT_TRUE(s.datasets.empty());
  EXPECT_TRUE(read_archive(dir / "e.mbc1").datasets.empty());
}

TEST(Archive, UndeclaredDatasetRejected) {
  TempDir dir;
  const auto cfg = test::fixture("finger");
  std::map<std::string, std::vector<Frame>> groups{{"nope/nothing", {pattern_frame(2, 2, 1, 8, 1, 0)}}};
  try {
    write_archive(groups, cfg, dir / "x.mbc1");
    FAIL() << "expected an error";
  } catch (const ArchiveError& e) {
    EXPECT_EQ(e.kind(), ArchiveError::Kind::unknown_dataset);
    EXPECT_EQ(e.dataset(), "nope/nothing");
  }
}

TEST(Archive, StorageAccounting) {
  TempDir dir;
  const auto cfg = test::fixture("face");
  const auto groups = planned_frames(cfg);
  const auto s = write_archive(groups, cfg, dir / "f.mbc1");
  std::uint64_t expect = 0;
  for (const auto& [_, frames] : groups)
    for (const auto& f : frames) expect += f.sample_count() * (f.bit_depth > 8 ? 2 : 1);
  EXPECT_EQ(s.payload_bytes, expect);
  // Offsets tile the payload without gaps or overlaps.
  std::uint64_t next = 0;
  for (const auto& d : s.datasets) {
    EXPECT_EQ(d.offset, next);
    next += d.length;
  }
}

TEST(Archive, ShapesAndDepths) {
  TempDir dir;
  const auto cfg = test::fixture("finger");
  const auto groups = planned_frames(cfg);
  const auto r = read_archive(write_archive(groups, cfg, dir / "g.mbc1").path);
  const auto& lsci = r.info(*cfg.dataset_for("swir", "lsci"));
  EXPECT_EQ(lsci.frames(), 100);
  EXPECT_EQ(lsci.shape.size(), 4u);
  EXPECT_EQ(lsci.bit_depth, 16);
  EXPECT_EQ(lsci.dtype, DType::u16);
}

TEST(Archive, BadMagic) {
  TempDir dir;
  spit(dir / "m.mbc1", {'N', 'O', 'P', 'E', 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_EQ(read_error(dir / "m.mbc1"), ArchiveError::Kind::bad_magic);
}

TEST(Archive, UnsupportedVersion) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  spit(dir / "v.mbc1", encode_mbc1({}, cfg.source_text, {}, 99));
  EXPECT_EQ(read_error(dir / "v.mbc1"), ArchiveError::Kind::unsupported_version);
}

TEST(Archive, TruncatedPayloadFailsChecksum) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  write_archive(planned_frames(cfg), cfg, dir / "t.mbc1");
  auto bytes = slurp(dir / "t.mbc1");
  bytes.resize(bytes.size() - 5);
  spit(dir / "t.mbc1", bytes);
  std::string name;
  EXPECT_EQ(read_error(dir / "t.mbc1", &name), ArchiveError::Kind::checksum);
  EXPECT_FALSE(name.empty());
}

TEST(Archive, FlippedByteNamesTheDataset) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  const auto s = write_archive(planned_frames(cfg), cfg, dir / "c.mbc1");
  const auto r = read_archive(dir / "c.mbc1");
  const auto& victim = r.datasets[1];
  auto bytes = slurp(dir / "c.mbc1");
  bytes[r.payload_start + victim.offset] ^= 0x5A;
  spit(dir / "c.mbc1", bytes);
  std::string name;
  EXPECT_EQ(read_error(dir / "c.mbc1", &name), ArchiveError::Kind::checksum);
  EXPECT_EQ(name, victim.name);
}

TEST(Archive, TruncatedHeader) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  auto bytes = encode_mbc1({}, cfg.source_text, {});
  bytes.resize(40);
  spit(dir / "h.mbc1", bytes);
  EXPECT_EQ(read_error(dir / "h.mbc1"), ArchiveError::Kind::corrupt_header);
}

TEST(Archive, MissingFileIsIoError) {
  EXPECT_EQ(read_error("/nonexistent/dir/x.mbc1"), ArchiveError::Kind::io);
}

TEST(Archive, TensorDatasetRoundTrip) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  const std::vector<double> v{1.5, -2.25, 1e-300, 3.0};
  write_archive({}, cfg, dir / "z.mbc1", {}, {tensor_dataset("model/w", {2, 2}, v)});
  const auto r = read_archive(dir / "z.mbc1");
  EXPECT_EQ(r.tensor("model/w"), v);
  EXPECT_EQ(r.info("model/w").kind, "tensor");
}

TEST(Verify, NominalCaptureHasEmptyDiff) {
  TempDir dir;
  for (const char* name : {"face", "finger", "iris"}) {
    const auto cfg = test::fixture(name);
    write_archive(planned_frames(cfg), cfg, dir / "n.mbc1");
    const auto diff = verify_archive(read_archive(dir / "n.mbc1"), cfg);
    EXPECT_TRUE(diff.empty()) << name << "\n" << diff.to_string();
  }
}

TEST(Verify, MissingDarkFrameIsReported) {
  TempDir dir;
  const auto cfg = test::fixture("face");
  auto groups = planned_frames(cfg);
  const auto dark = *cfg.dataset_for("swir", "dark");
  ASSERT_EQ(groups.at(dark).size(), 40u);
  groups.at(dark).pop_back();
  write_archive(groups, cfg, dir / "d.mbc1");
  const auto diff = verify_archive(read_archive(dir / "d.mbc1"), cfg);
  ASSERT_EQ(diff.entries.size(), 1u);
  EXPECT_EQ(diff.entries[0].dataset, dark);
  EXPECT_EQ(diff.entries[0].actual, 39);
  EXPECT_EQ(diff.entries[0].expected, 40);
}

TEST(Verify, IrisNirCount) {
  TempDir dir;
  const auto cfg = test::fixture("iris");
  const auto r = read_archive(write_archive(planned_frames(cfg), cfg, dir / "i.mbc1").path);
  std::int64_t nir = 0;
  for (const auto& d : r.datasets)
    if (d.device == "nir") nir += d.frames();
  EXPECT_EQ(nir, 60);
}
