#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "specrig/device_server.hpp"
#include "support.hpp"

using namespace specrig;

namespace {

const DeviceSpec& device(const CaptureConfig& cfg, const std::string& id) {
  const auto* d = cfg.find_device(id);
  if (!d) throw std::runtime_error("no device " + id);
  return *d;
}

SceneBinding binding(const std::string& preset, int divisor, std::uint64_t seed = 7) {
  SceneBinding b;
  b.preset = preset;
  b.seeds = {3, 4};
  b.divisor = divisor;
  b.seed = seed;
  return b;
}

// Replays `cfg` into the hardware sessions given, in process.
void replay(const CaptureConfig& cfg, const Schedule& s, std::map<std::string, DeviceSession*> sessions) {
  RigClock clock;
  replay_triggers(cfg, s, clock, [&](const std::string& dev, const TriggerInput& in) {
    if (auto it = sessions.find(dev); it != sessions.end()) it->second->on_trigger(in);
  });
}

TriggerInput pulse(std::int64_t t, const std::string& tag = "dark") { return TriggerInput{t, tag, std::nullopt, {}}; }

// Hardware device with no noise looking at an empty black room.
void quiet_device(DeviceSession& s, int n_frames) {
  DeviceSpec spec = device(test::fixture("face"), "swir");
  s.initialize(spec, binding("", 16));
  s.set_params({{"read_noise_sigma", 0.0}});
  CaptureRequest req;
  req.n_frames = n_frames;
  s.capture(req);
}

}  // namespace

TEST(DeviceSession, FaceSwirReplayFillsEveryDataset) {
  const auto cfg = test::fixture("face");
  const auto sched = compile_schedule(cfg);
  DeviceSession s;
  s.initialize(device(cfg, "swir"), binding("face/bona_fide", 16));
  s.capture(request_for(cfg, sched, "swir"));
  replay(cfg, sched, {{"swir", &s}});
  EXPECT_EQ(s.state(), SessionState::done);
  const auto frames = s.frames();
  ASSERT_EQ(frames.size(), 180u);
  std::map<std::string, int> counts;
  for (const auto& f : frames) ++counts[f.dataset];
  EXPECT_EQ(counts.size(), 8u);
  EXPECT_EQ(counts, sched.per_device_frame_plan.at("swir"));
  EXPECT_EQ(counts.at("face/swir/dark"), 40);
  EXPECT_TRUE(s.warnings().empty());
}

TEST(DeviceSession, HardwareTimestampsEqualTriggerTimes) {
  const auto cfg = test::fixture("face");
  const auto sched = compile_schedule(cfg);
  DeviceSession s;
  s.initialize(device(cfg, "nir_left"), binding("face/bona_fide", 16));
  s.capture(request_for(cfg, sched, "nir_left"));
  replay(cfg, sched, {{"nir_left", &s}});
  std::vector<std::int64_t> expected;
  for (const auto& e : sched.events)
    if (const auto* p = std::get_if<TriggerPulse>(&e.kind); p && p->device == "nir_left") expected.push_back(e.t_ms);
  const auto frames = s.frames();
  ASSERT_EQ(frames.size(), expected.size());
  for (std::size_t i = 0; i < frames.size(); ++i) EXPECT_EQ(frames[i].timestamp_ms, expected[i]);
}

TEST(DeviceSession, ZeroFramesIsImmediatelyDone) {
  DeviceSession s;
  quiet_device(s, 0);
  EXPECT_EQ(s.state(), SessionState::done);
  EXPECT_TRUE(s.frames().empty());
  s.wait_done();
}

TEST(DeviceSession, TimesOutWithoutTriggers) {
  DeviceSession s;
  quiet_device(s, 5);
  s.set_params({{"deadline_ms", 100}});
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(s.wait_done(), TimeoutError);
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(100));
  EXPECT_TRUE(s.status()["timed_out"].get<bool>());
}

TEST(DeviceSession, DarkPulseIsDarkLevel) {
  DeviceSession s;
  quiet_device(s, 1);
  const auto f = s.on_trigger(pulse(5));
  ASSERT_TRUE(f);
  const auto dark = static_cast<std::uint16_t>(std::lround(make_sensor(device(test::fixture("face"), "swir")).dark_level));
  for (auto p : f->pixels) ASSERT_EQ(p, dark);
}

TEST(DeviceSession, SequenceIndicesAreDense) {
  DeviceSession s;
  quiet_device(s, 3);
  for (std::int64_t t : {10, 10, 25}) ASSERT_TRUE(s.on_trigger(pulse(t)));
  const auto frames = s.frames();
  ASSERT_EQ(frames.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(frames[i].sequence_index, static_cast<std::int64_t>(i));
  EXPECT_LE(frames[0].timestamp_ms, frames[1].timestamp_ms);
  EXPECT_LE(frames[1].timestamp_ms, frames[2].timestamp_ms);
  EXPECT_EQ(s.state(), SessionState::done);
}

TEST(DeviceSession, ExtraPulseIsIgnoredAndLogged) {
  std::vector<std::string> log;
  DeviceSession s([&](const std::string& m) { log.push_back(m); });
  quiet_device(s, 2);
  s.on_trigger(pulse(1));
  s.on_trigger(pulse(2));
  EXPECT_FALSE(s.on_trigger(pulse(3)));
  EXPECT_EQ(s.frames().size(), 2u);
  ASSERT_EQ(s.warnings().size(), 1u);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_NE(log[0].find("warning"), std::string::npos);
}

TEST(DeviceSession, PulseBeforeCaptureIsIgnored) {
  DeviceSession s;
  s.initialize(device(test::fixture("face"), "swir"), binding("", 16));
  EXPECT_FALSE(s.on_trigger(pulse(0)));
  EXPECT_EQ(s.warnings().size(), 1u);
}

TEST(DeviceSession, PreviewIsLatestAndIdempotent) {
  DeviceSession s;
  s.initialize(device(test::fixture("face"), "swir"), binding("", 16));
  EXPECT_FALSE(s.preview());
  CaptureRequest req;
  req.n_frames = 5;
  s.capture(req);
  EXPECT_FALSE(s.preview());
  for (int t = 0; t < 5; ++t) s.on_trigger(pulse(t * 10));
  const auto a = s.preview();
  const auto b = s.preview();
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->frame.sequence_index, 4);
  EXPECT_EQ(a->id, b->id);
  EXPECT_EQ(a->frame.pixels, b->frame.pixels);
}

TEST(DeviceSession, PreviewModeStreamsFrames) {
  DeviceSession s;
  s.initialize(device(test::fixture("face"), "swir"), binding("face/bona_fide", 16));
  s.set_params({{"preview", true}, {"preview_period_ms", 5}});
  EXPECT_EQ(s.state(), SessionState::previewing);
  std::optional<PreviewFrame> first;
  for (int i = 0; i < 200 && !first; ++i) {
    first = s.preview();
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ASSERT_TRUE(first);
  std::optional<PreviewFrame> later;
  for (int i = 0; i < 200; ++i) {
    later = s.preview();
    if (later->id != first->id) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  EXPECT_GT(later->id, first->id);
  s.set_params({{"preview", false}});
  EXPECT_EQ(s.state(), SessionState::initialized);
  // Capture is still reachable from preview.
  s.set_params({{"preview", true}});
  CaptureRequest req;
  req.n_frames = 1;
  s.capture(req);
  EXPECT_EQ(s.state(), SessionState::capturing);
}

TEST(DeviceSession, DoubleInitializeConflicts) {
  DeviceSession s;
  const DeviceSpec spec = device(test::fixture("face"), "swir");
  const auto st = s.initialize(spec);
  EXPECT_EQ(st["id"], "swir");
  EXPECT_EQ(st["mode"], "hardware");
  EXPECT_TRUE(st["ready"].get<bool>());
  EXPECT_THROW(s.initialize(spec), ConflictError);
}

TEST(DeviceSession, UnknownSensitivityNamesTheId) {
  DeviceSession s;
  DeviceSpec spec = device(test::fixture("face"), "swir");
  spec.sensitivity_id = "none";
  try {
    s.initialize(spec);
    FAIL() << "expected a configuration error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.subject(), "none");
    EXPECT_NE(std::string(e.what()).find("none"), std::string::npos);
  }
  EXPECT_EQ(s.state(), SessionState::idle);
}

TEST(DeviceSession, CaptureWhileCapturingConflicts) {
  DeviceSession s;
  quiet_device(s, 3);
  CaptureRequest req;
  req.n_frames = 1;
  EXPECT_THROW(s.capture(req), ConflictError);
}

TEST(DeviceSession, ResetAllowsANewCapture) {
  DeviceSession s;
  quiet_device(s, 1);
  s.on_trigger(pulse(0));
  CaptureRequest req;
  req.n_frames = 2;
  EXPECT_THROW(s.capture(req), ConflictError);
  s.reset();
  s.capture(req);
  EXPECT_TRUE(s.frames().empty());
  EXPECT_EQ(s.state(), SessionState::capturing);
}

TEST(DeviceSession, SoftwareJitterStaysInBound) {
  const auto cfg = test::fixture("face");
  const auto sched = compile_schedule(cfg);
  for (const char* id : {"rs_rgb", "rs_depth", "thermal"}) {
    DeviceSession s;
    const auto& spec = device(cfg, id);
    s.initialize(spec, binding("face/bona_fide", 16));
    const auto req = request_for(cfg, sched, id);
    s.capture(req);
    s.wait_done();
    const auto frames = s.frames();
    ASSERT_EQ(static_cast<int>(frames.size()), req.n_frames) << id;
    EXPECT_EQ(req.n_frames, 60);
    for (std::size_t k = 0; k < frames.size(); ++k) {
      const auto nominal = req.start_ms + static_cast<std::int64_t>(k) * req.period_ms;
      EXPECT_LE(std::abs(frames[k].timestamp_ms - nominal), spec.jitter_ms) << id << " frame " << k;
      if (k) EXPECT_GE(frames[k].timestamp_ms, frames[k - 1].timestamp_ms);
      EXPECT_EQ(frames[k].dataset, *cfg.dataset_for(id, spec.tag));
    }
  }
}

TEST(DeviceSession, SoftwareFramesPairWithinHalfAPeriod) {
  const auto cfg = test::fixture("face");
  const auto sched = compile_schedule(cfg);
  DeviceSession sw, hw;
  sw.initialize(device(cfg, "rs_nir"), binding("face/bona_fide", 16));
  hw.initialize(device(cfg, "basler_rgb"), binding("face/bona_fide", 16));
  const auto req = request_for(cfg, sched, "rs_nir");
  sw.capture(req);
  hw.capture(request_for(cfg, sched, "basler_rgb"));
  replay(cfg, sched, {{"basler_rgb", &hw}});
  sw.wait_done();
  hw.wait_done();
  std::vector<std::int64_t> hw_ts;
  for (const auto& f : hw.frames()) hw_ts.push_back(f.timestamp_ms);
  for (const auto& f : sw.frames()) {
    const auto j = nearest_frame(hw_ts, f.timestamp_ms);
    ASSERT_GE(j, 0);
    EXPECT_LE(2 * std::abs(hw_ts[static_cast<std::size_t>(j)] - f.timestamp_ms), req.period_ms);
  }
}

TEST(DeviceSession, SoftwareCaptureIsDeterministic) {
  const auto cfg = test::fixture("iris");
  const auto sched = compile_schedule(cfg);
  auto run = [&] {
    DeviceSession s;
    s.initialize(device(cfg, "irisid"), binding("iris/bona_fide", 16));
    s.capture(request_for(cfg, sched, "irisid"));
    s.wait_done();
    return s.frames();
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].pixels, b[i].pixels);
    EXPECT_EQ(a[i].timestamp_ms, b[i].timestamp_ms);
    EXPECT_GE(a[i].timestamp_ms, cfg.core_duration_ms() - 2);
  }
}

TEST(DeviceSession, BackIlluminationAutoExposes) {
  const auto cfg = test::fixture("finger");
  const auto sched = compile_schedule(cfg);
  DeviceSession s;
  const auto& spec = device(cfg, "vis_nir");
  s.initialize(spec, binding("finger/bona_fide", 8));
  s.capture(request_for(cfg, sched, "vis_nir"));
  replay(cfg, sched, {{"vis_nir", &s}});
  std::vector<Frame> bi;
  for (const auto& f : s.frames())
    if (f.dataset == "finger/bi/940") bi.push_back(f);
  ASSERT_EQ(bi.size(), 20u);
  const auto sensor = make_sensor(spec, 8);
  EXPECT_NE(bi.front().exposure_us, bi.back().exposure_us);
  EXPECT_NEAR(metered_fraction(bi.back(), sensor.dark_level), 0.5, 0.1);
}

TEST(DeviceSession, LsciBurstUsesTheLaser) {
  const auto cfg = test::fixture("finger");
  const auto sched = compile_schedule(cfg);
  DeviceSession s;
  s.initialize(device(cfg, "swir"), binding("finger/bona_fide", 4));
  s.capture(request_for(cfg, sched, "swir"));
  replay(cfg, sched, {{"swir", &s}});
  std::vector<Frame> lsci;
  for (const auto& f : s.frames())
    if (f.illumination_tag == "lsci") lsci.push_back(f);
  ASSERT_EQ(lsci.size(), 100u);
  // Flowing pixels decorrelate between frames; a dark frame has no speckle.
  EXPECT_NE(lsci[0].pixels, lsci[50].pixels);
  const auto& f = lsci[0];
  EXPECT_GT(measure_contrast(f, f.width / 4, f.height / 4, 3 * f.width / 4, 3 * f.height / 4), 0.1);
}

TEST(WireFormat, Msf1RoundTrip) {
  for (int bits : {8, 12, 16}) {
    Frame f(5, 3, 2, bits);
    Rng rng(static_cast<std::uint64_t>(bits));
    for (auto& p : f.pixels) p = static_cast<std::uint16_t>(rng.below(f.max_value() + 1u));
    f.timestamp_ms = 123456;
    const auto bytes = encode_msf1(f);
    EXPECT_EQ(bytes.size(), 16 + f.pixels.size() * (bits > 8 ? 2 : 1));
    EXPECT_EQ(bytes.substr(0, 4), "MSF1");
    const auto g = decode_msf1(bytes);
    EXPECT_EQ(g.width, 5);
    EXPECT_EQ(g.height, 3);
    EXPECT_EQ(g.channels, 2);
    EXPECT_EQ(g.bit_depth, bits);
    EXPECT_EQ(g.timestamp_ms, 123456);
    EXPECT_EQ(g.pixels, f.pixels);
  }
  EXPECT_THROW(decode_msf1("nope"), Error);
}

TEST(WireFormat, Pgm) {
  Frame f(2, 1, 1, 12);
  f.pixels = {0x0123, 0x0FFF};
  const auto pgm = encode_pgm(f);
  const std::string head = "P5\n2 1\n4095\n";
  ASSERT_EQ(pgm.substr(0, head.size()), head);
  EXPECT_EQ(pgm.size(), head.size() + 4);
  EXPECT_EQ(static_cast<unsigned char>(pgm[head.size()]), 0x01);
  EXPECT_EQ(static_cast<unsigned char>(pgm[head.size() + 1]), 0x23);
  EXPECT_THROW(encode_pgm(Frame(2, 2, 3, 8)), Error);
}

TEST(DeviceRest, RoundTrip) {
  const auto cfg = test::fixture("face");
  DeviceServer server(device(cfg, "swir"));
  const int port = server.start();
  DeviceClient cli("127.0.0.1", port);
  EXPECT_TRUE(cli.health());

  auto bad = device(cfg, "swir");
  bad.sensitivity_id = "none";
  try {
    cli.initialize(binding("", 16), bad);
    FAIL() << "expected a configuration error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.subject(), "none");
  }

  const auto st = cli.initialize(binding("face/bona_fide", 16));
  EXPECT_EQ(st["state"], "initialized");
  EXPECT_THROW(cli.initialize(binding("", 16)), ConflictError);
  EXPECT_FALSE(cli.preview());

  CaptureRequest req;
  req.n_frames = 3;
  req.datasets = {{"1200", "face/swir/1200"}};
  cli.capture(req);
  EXPECT_THROW(cli.capture(req), ConflictError);
  EXPECT_EQ(cli.status()["state"], "capturing");

  TriggerInput t{10, "1200", std::nullopt, {Emitter{1200.0, 0.5, false, false}}};
  for (int i = 0; i < 3; ++i) {
    t.t_ms = 10 + 12 * i;
    EXPECT_TRUE(cli.trigger(t)["accepted"].get<bool>());
  }
  EXPECT_FALSE(cli.trigger(t)["accepted"].get<bool>());
  const auto done = cli.status();
  EXPECT_EQ(done["state"], "done");
  EXPECT_EQ(done["frames_captured"], 3);
  EXPECT_EQ(done["frames_expected"], 3);

  const auto local = server.session().frames();
  for (std::size_t i = 0; i < 3; ++i) {
    const auto f = cli.frame(i);
    EXPECT_EQ(f.pixels, local[i].pixels);
    EXPECT_EQ(f.timestamp_ms, 10 + 12 * static_cast<std::int64_t>(i));
    EXPECT_EQ(f.dataset, "face/swir/1200");
    EXPECT_EQ(f.sequence_index, static_cast<std::int64_t>(i));
    EXPECT_EQ(f.exposure_us, local[i].exposure_us);
  }
  EXPECT_THROW(cli.frame(3), Error);
  const auto a = cli.preview(), b = cli.preview();
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->id, b->id);
  EXPECT_EQ(a->frame.pixels, local[2].pixels);

  httplib::Client raw("127.0.0.1", port);
  auto pgm = raw.Get("/preview?format=pgm");
  ASSERT_TRUE(pgm);
  EXPECT_EQ(pgm->status, 200);
  EXPECT_EQ(pgm->body.substr(0, 2), "P5");
  auto junk = raw.Post("/capture", "{not json", "application/json");
  ASSERT_TRUE(junk);
  EXPECT_EQ(junk->status, 400);
  server.stop();
}

TEST(DeviceRest, TimeoutIsReported) {
  DeviceServer server(device(test::fixture("face"), "swir"));
  DeviceClient cli("127.0.0.1", server.start());
  cli.initialize(binding("", 16));
  cli.set_params({{"deadline_ms", 50}});
  CaptureRequest req;
  req.n_frames = 2;
  cli.capture(req);
  std::this_thread::sleep_for(std::chrono::milliseconds(120));
  EXPECT_TRUE(cli.status()["timed_out"].get<bool>());
}
