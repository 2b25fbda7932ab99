#include <gtest/gtest.h>

#include <chrono>
#include <map>

#include "specrig/sync_config.hpp"
#include "support.hpp"

using namespace specrig;

namespace {

int pulses_for(const Schedule& s, const std::string& device) {
  int n = 0;
  for (const auto& e : s.events)
    if (const auto* p = std::get_if<TriggerPulse>(&e.kind); p && p->device == device) ++n;
  return n;
}

ConfigError::Kind error_kind(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error for " << text;
  return ConfigError::Kind::syntax;
}

const char* kTinyDevice = R"({"id":"cam","trigger":"hardware","width":4,"height":4,"channels":1,
  "bit_depth":8,"exposure":{"fixed_us":1000},"sensitivity":"bobcat_swir","port":9000})";

std::string tiny(const std::string& events, const std::string& extra_devices = "") {
  return std::string(R"({"devices":[)") + kTinyDevice + extra_devices +
         R"(],"illumination":[{"id":"g","kind":"led_module_chain","slots":16,"wavelength_nm":[1200,1300,1200,1300,1200,1300,1200,1300,1200,1300,1200,1300,1200,1300,1200,1300]}],
         "cycle":{"period_ms":10,"count":3,"events":[)" +
         events + R"(]},"datasets":{"cam":{"a":"t/cam/a","dark":"t/cam/dark"}}})";
}

}  // namespace

TEST(ParseConfig, FaceFixtureShape) {
  const auto cfg = test::fixture("face");
  EXPECT_EQ(cfg.devices.size(), 8u);
  EXPECT_EQ(cfg.illumination_groups.size(), 4u);
  EXPECT_EQ(cfg.cycle_count, 20);
  EXPECT_EQ(cfg.cycle_period_ms, 108);
}

TEST(ParseConfig, EmptyRigIsValid) {
  const auto cfg = parse_config(R"({"devices":[],"illumination":[],"cycle":{"period_ms":10,"count":5,"events":[]}})");
  EXPECT_TRUE(cfg.devices.empty());
  const auto s = compile_schedule(cfg);
  EXPECT_TRUE(s.events.empty());
  EXPECT_EQ(s.total_duration_ms, 50);
}

TEST(ParseConfig, DanglingReferenceNamesTheId) {
  const auto text = tiny(R"({"at_ms":0,"duration_ms":2,"action":{"type":"trigger","device":"ghost","tag":"a"}})");
  try {
    parse_config(text);
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.kind(), ConfigError::Kind::dangling_reference);
    EXPECT_EQ(e.subject(), "ghost");
    EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
  }
}

TEST(ParseConfig, SyntaxErrorReportsPosition) {
  try {
    parse_config("{\"devices\": [ }");
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.kind(), ConfigError::Kind::syntax);
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
}

TEST(ParseConfig, SchemaViolations) {
  // Event outside the cycle.
  EXPECT_EQ(error_kind(tiny(R"({"at_ms":9,"duration_ms":5,"action":{"type":"trigger","device":"cam","tag":"a"}})")),
            ConfigError::Kind::schema);
  // Level out of range.
  EXPECT_EQ(error_kind(tiny(
                R"({"at_ms":0,"duration_ms":2,"action":{"type":"illumination_on","group":"g","slots":[0],"current":[300],"pwm":[255]}})")),
            ConfigError::Kind::schema);
  // Trigger tag without a dataset name.
  EXPECT_EQ(error_kind(tiny(R"({"at_ms":0,"duration_ms":2,"action":{"type":"trigger","device":"cam","tag":"zzz"}})")),
            ConfigError::Kind::schema);
  // Duplicate device id.
  EXPECT_EQ(error_kind(tiny("", std::string(",") + kTinyDevice)), ConfigError::Kind::schema);
}

TEST(CompileSchedule, FaceDurationAndPlan) {
  const auto s = compile_schedule(test::fixture("face"));
  EXPECT_EQ(s.total_duration_ms, 2160);
  EXPECT_EQ(s.frames_for("basler_rgb"), 60);
  EXPECT_EQ(s.frames_for("rs_rgb"), 60);
  EXPECT_EQ(s.frames_for("rs_depth"), 60);
  EXPECT_EQ(s.frames_for("rs_nir"), 60);
  EXPECT_EQ(s.frames_for("thermal"), 60);
  EXPECT_EQ(s.frames_for("nir_left"), 140);
  EXPECT_EQ(s.frames_for("nir_right"), 140);
  EXPECT_EQ(s.frames_for("swir"), 180);
}

TEST(CompileSchedule, FingerAndIrisDurations) {
  EXPECT_EQ(compile_schedule(test::fixture("finger")).total_duration_ms, 4800);
  const auto iris = compile_schedule(test::fixture("iris"));
  EXPECT_EQ(iris.total_duration_ms, 6000 + 1000);
  EXPECT_EQ(iris.frames_for("nir"), 60);
  EXPECT_EQ(iris.frames_for("thermal"), 60);
  EXPECT_EQ(iris.frames_for("irisid"), 2);
}

TEST(CompileSchedule, CyclesAreShiftedCopies) {
  const auto cfg = parse_config(tiny(R"({"at_ms":1,"duration_ms":2,"action":{"type":"trigger","device":"cam","tag":"a"}},
    {"at_ms":5,"duration_ms":2,"action":{"type":"trigger","device":"cam","tag":"dark"}})"));
  const auto s = compile_schedule(cfg);
  ASSERT_EQ(s.events.size(), 6u);
  const std::int64_t expect[] = {1, 5, 11, 15, 21, 25};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(s.events[i].t_ms, expect[i]);
  EXPECT_EQ(s.per_device_frame_plan.at("cam").at("t/cam/a"), 3);
  EXPECT_EQ(s.per_device_frame_plan.at("cam").at("t/cam/dark"), 3);
}

TEST(CompileSchedule, OverlappingPulsesRejected) {
  // 1000 us exposure: pulses 0 ms apart on the same device overlap.
  const auto cfg = parse_config(tiny(R"({"at_ms":1,"duration_ms":1,"action":{"type":"trigger","device":"cam","tag":"a"}},
    {"at_ms":1,"duration_ms":1,"action":{"type":"trigger","device":"cam","tag":"dark"}})"));
  try {
    compile_schedule(cfg);
    FAIL() << "expected an overlap error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.kind(), ConfigError::Kind::overlap);
    EXPECT_EQ(e.subject(), "cam");
  }
}

TEST(CompileSchedule, PureAndByteIdentical) {
  const auto cfg = test::fixture("face");
  EXPECT_EQ(schedule_to_json(compile_schedule(cfg)).dump(), schedule_to_json(compile_schedule(cfg)).dump());
  EXPECT_EQ(schedule_to_json(compile_schedule(test::fixture("face"))).dump(),
            schedule_to_json(compile_schedule(cfg)).dump());
}

TEST(CompileSchedule, HardwarePlanEqualsPulseCount) {
  for (const char* name : {"face", "finger", "iris"}) {
    const auto cfg = test::fixture(name);
    const auto s = compile_schedule(cfg);
    for (const auto& d : cfg.devices)
      if (d.trigger_mode == TriggerMode::hardware) EXPECT_EQ(s.frames_for(d.id), pulses_for(s, d.id)) << name << "/" << d.id;
  }
}

TEST(CompileSchedule, EventsSortedByTime) {
  for (const char* name : {"face", "finger", "iris"}) {
    const auto s = compile_schedule(test::fixture(name));
    for (std::size_t i = 1; i < s.events.size(); ++i) ASSERT_LE(s.events[i - 1].t_ms, s.events[i].t_ms) << name;
  }
}

TEST(CompileSchedule, RemovingADeviceKeepsOtherPlans) {
  for (const char* name : {"face", "finger", "iris"}) {
    const auto cfg = test::fixture(name);
    const auto full = compile_schedule(cfg);
    for (const auto& d : cfg.devices) {
      const auto reduced = compile_schedule(without_device(cfg, d.id));
      EXPECT_EQ(reduced.per_device_frame_plan.count(d.id), 0u);
      for (const auto& [dev, plan] : reduced.per_device_frame_plan) EXPECT_EQ(plan, full.per_device_frame_plan.at(dev));
    }
  }
}

TEST(CompileSchedule, FastEnough) {
  const auto t0 = std::chrono::steady_clock::now();
  for (const char* name : {"face", "finger", "iris"}) compile_schedule(test::fixture(name));
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1.0);
}

TEST(ScheduleStats, FaceTable) {
  const auto cfg = test::fixture("face");
  const auto st = schedule_stats(compile_schedule(cfg), cfg);
  const auto* swir = st.device("swir");
  ASSERT_NE(swir, nullptr);
  EXPECT_EQ(swir->lit_frames, 140);
  EXPECT_EQ(swir->nonlit_frames, 40);
  EXPECT_EQ(swir->lit_datasets, 7);
  EXPECT_EQ(swir->nonlit_datasets, 1);
  EXPECT_EQ(st.row("swir", "swir")->lit_notation, "20x7");
  EXPECT_EQ(st.row("swir", "swir")->nonlit_notation, "40x1");
  for (const char* nir : {"nir_left", "nir_right"}) {
    const auto* d = st.device(nir);
    EXPECT_EQ(d->lit_frames, 120);
    EXPECT_EQ(d->nonlit_frames, 20);
    EXPECT_EQ(d->total_frames, 140);
  }
  EXPECT_EQ(st.device("thermal")->nonlit_frames, 60);
  EXPECT_EQ(st.device("basler_rgb")->total_frames, 60);
  // 60 frames of 1984x1264x3 bytes.
  EXPECT_EQ(st.device("basler_rgb")->bytes, 60ull * 1984 * 1264 * 3);
}

TEST(ScheduleStats, FingerTable) {
  const auto cfg = test::fixture("finger");
  const auto st = schedule_stats(compile_schedule(cfg), cfg);
  EXPECT_EQ(st.row("swir", "lsci")->lit_frames, 100);
  EXPECT_EQ(st.row("swir", "lsci")->lit_notation, "100x1");
  EXPECT_EQ(st.row("vis_nir", "vis_nir")->lit_notation, "1x7");
  EXPECT_EQ(st.row("vis_nir", "vis_nir")->nonlit_notation, "1x7");
  EXPECT_EQ(st.row("vis_nir", "bi")->lit_frames, 20);
  EXPECT_EQ(st.row("swir", "swir")->lit_notation, "1x4");
  EXPECT_EQ(st.row("swir", "swir")->nonlit_notation, "4x4");
}

TEST(ScheduleStats, IrisTable) {
  const auto cfg = test::fixture("iris");
  const auto st = schedule_stats(compile_schedule(cfg), cfg);
  EXPECT_EQ(st.row("nir", "nir")->lit_notation, "15x4");
  EXPECT_EQ(st.device("thermal")->nonlit_frames, 60);
  EXPECT_EQ(st.device("irisid")->total_frames, 2);
}

TEST(ScheduleStats, StorageIsSumOfFrames) {
  const auto cfg = test::fixture("finger");
  const auto st = schedule_stats(compile_schedule(cfg), cfg);
  std::uint64_t bytes = 0;
  for (const auto& d : cfg.devices)
    bytes += static_cast<std::uint64_t>(st.device(d.id)->total_frames) * d.width * d.height * d.channels * 2;
  EXPECT_EQ(st.total_bytes, bytes);
}
