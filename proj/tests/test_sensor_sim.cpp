#include <gtest/gtest.h>

#include <cmath>

#include "specrig/sensor_sim.hpp"
#include "support.hpp"

using namespace specrig;

namespace {

Spectrum led(double nm, double power) {
  Spectrum s = zero_spectrum();
  add_led(s, nm, power, SpectralLibrary::instance().led_fwhm_nm());
  return s;
}

MaterialSpec base(const std::string& name, double tone = 0.5) {
  Rng rng(7);
  auto m = detail::instance(name, tone, rng);
  return m;
}

SpectralScene dark_uniform(const MaterialSpec& m, int w = 64, int h = 64) {
  auto s = uniform_scene(w, h, m);
  s.ambient = zero_spectrum();
  return s;
}

// Mean of the frame over pixels whose scene material is not the backdrop.
double object_mean(const Frame& f, const SpectralScene& s, int c = 0) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const int sx = static_cast<int>((x + 0.5) / f.width * s.width);
      const int sy = static_cast<int>((y + 0.5) / f.height * s.height);
      if (s.material_map[s.index(sx, sy)] == 0) continue;
      sum += f.at(y, x, c);
      ++n;
    }
  return n ? sum / n : 0.0;
}

double box_mean(const Frame& f, const Box& b) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = static_cast<int>(b.y0 * f.height); y < static_cast<int>(b.y1 * f.height); ++y)
    for (int x = static_cast<int>(b.x0 * f.width); x < static_cast<int>(b.x1 * f.width); ++x) {
      sum += f.at(y, x);
      ++n;
    }
  return sum / n;
}

const DeviceSpec& device(const CaptureConfig& cfg, const std::string& id) { return *cfg.find_device(id); }

}  // namespace

TEST(Reflective, DarkLevelWithoutLight) {
  auto sensor = make_sensor("basler_rgb", 32, 32, 3, 8);
  sensor.read_noise_sigma = 0.0;
  const auto f = render_frame(dark_uniform(base("skin")), sensor, zero_spectrum(), 5000, 1);
  for (auto p : f.pixels) EXPECT_EQ(p, static_cast<std::uint16_t>(std::lround(sensor.dark_level)));
}

TEST(Reflective, LinearInExposure) {
  auto sensor = make_sensor("bobcat_swir", 32, 32, 1, 16);
  sensor.read_noise_sigma = 0.0;
  const auto scene = dark_uniform(base("skin"));
  const auto light = led(1300, 0.125);
  const double a = render_frame(scene, sensor, light, 1000, 1).mean() - sensor.dark_level;
  const double b = render_frame(scene, sensor, light, 2000, 1).mean() - sensor.dark_level;
  EXPECT_GT(a, 100.0);
  EXPECT_NEAR(b / a, 2.0, 0.01);
}

TEST(Reflective, SaturationClampsToFullScale) {
  auto sensor = make_sensor("bobcat_swir", 16, 16, 1, 12);
  const auto f = render_frame(dark_uniform(base("skin")), sensor, led(1300, 1.0), 1e6, 1);
  for (auto p : f.pixels) EXPECT_EQ(p, 4095);
}

TEST(Reflective, SkinAndSiliconeDifferAt1200nm) {
  const auto cfg = test::fixture("finger");
  const auto sensor = make_sensor(device(cfg, "swir"));
  const PresetSeeds seeds{3, 3};
  const auto skin = make_preset("finger/bona_fide", seeds);
  const auto sil = make_preset("finger/silicone", seeds);
  const auto light = led(1200, 8 * 0.125);
  const double a = object_mean(render_frame(skin, sensor, light, 5000, 1), skin) - sensor.dark_level;
  const double b = object_mean(render_frame(sil, sensor, light, 5000, 1), sil) - sensor.dark_level;
  EXPECT_GT(std::abs(a - b) / std::max(a, b), 0.1) << a << " " << b;
}

TEST(Reflective, SwirSeparatesBetterThanVisible) {
  const auto& skin = SpectralLibrary::instance().material("skin");
  for (const char* pai : {"silicone", "pdms", "glue", "prosthetic"}) {
    const auto& m = SpectralLibrary::instance().material(pai);
    EXPECT_GT(mean_abs_distance(skin.reflectance, m.reflectance, 1100, 1700),
              mean_abs_distance(skin.reflectance, m.reflectance, 400, 700))
        << pai;
  }
}

TEST(Reflective, BandMismatchRejected) {
  const auto sensor = make_sensor("basler_rgb", 8, 8, 3, 8);
  EXPECT_THROW(render_frame(dark_uniform(base("skin")), sensor, Spectrum(10, 0.0), 1000, 1), Error);
}

TEST(Reflective, UnknownSensitivityRejected) {
  try {
    make_sensor("no_such_camera", 8, 8, 1, 8);
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.kind(), ConfigError::Kind::dangling_reference);
  }
}

TEST(Reflective, SameSeedSameFrame) {
  const auto sensor = make_sensor("basler_nir_face", 64, 64, 1, 10);
  const auto scene = make_preset("face/bona_fide", 5);
  const auto light = led(940, 1.0);
  EXPECT_EQ(render_frame(scene, sensor, light, 8000, 9).pixels, render_frame(scene, sensor, light, 8000, 9).pixels);
  EXPECT_NE(render_frame(scene, sensor, light, 8000, 9).pixels, render_frame(scene, sensor, light, 8000, 10).pixels);
}

// ---------------------------------------------------------------------------

TEST(Speckle, StaticPixelsNeverChange) {
  auto sensor = make_sensor("bobcat_swir", 64, 64, 1, 16);
  sensor.read_noise_sigma = 0.0;
  const auto scene = dark_uniform(base("silicone"));
  const auto seq = render_lsci_sequence(scene, sensor, 1.0, 10, 10, 4);
  for (std::size_t i = 1; i < seq.size(); ++i) EXPECT_EQ(seq[i].pixels, seq[0].pixels);
}

TEST(Speckle, FullyDevelopedContrastNearOne) {
  auto sensor = make_sensor("bobcat_swir", 128, 128, 1, 16);
  sensor.read_noise_sigma = 0.0;
  sensor.dark_level = 0.0;
  const auto scene = dark_uniform(base("silicone"), 128, 128);
  // Laser power that puts the mean near 1000 counts.
  const auto probe = render_lsci_frame(scene, sensor, 1310, 1.0, zero_spectrum(), 5000, 0, 1, 2);
  const double power = 1000.0 / probe.mean();
  const auto f = render_lsci_frame(scene, sensor, 1310, power, zero_spectrum(), 5000, 0, 1, 2);
  EXPECT_NEAR(f.mean(), 1000.0, 100.0);
  EXPECT_NEAR(measure_contrast(f, 0, 0, 128, 128), 1.0, 0.1);
}

TEST(Speckle, ContrastFallsWithFlow) {
  auto sensor = make_sensor("bobcat_swir", 128, 128, 1, 16);
  sensor.read_noise_sigma = 0.0;
  sensor.dark_level = 0.0;
  double prev = 2.0;
  for (double v : {0.0, 1.0, 4.0, 16.0}) {
    auto scene = uniform_scene(128, 128, base("skin"), 305.0, v);
    scene.ambient = zero_spectrum();
    const auto f = render_lsci_frame(scene, sensor, 1310, 0.5, zero_spectrum(), 5000, 0, 3, 4);
    const double k = measure_contrast(f, 0, 0, 128, 128);
    EXPECT_LT(k, prev) << "v=" << v;
    EXPECT_NEAR(k, speckle_contrast(v), 0.1) << "v=" << v;
    prev = k;
  }
}

TEST(Speckle, SequenceNeedsLsciSensor) {
  const auto sensor = make_sensor("basler_rgb", 8, 8, 3, 8);
  EXPECT_THROW(render_lsci_sequence(dark_uniform(base("skin")), sensor, 1.0, 2, 10, 1), Error);
}

// ---------------------------------------------------------------------------

TEST(BackIllumination, OpaqueSampleIsDark) {
  auto sensor = make_sensor("basler_nir_finger", 64, 64, 1, 12);
  sensor.read_noise_sigma = 0.0;
  const auto f = render_back_illumination(dark_uniform(base("playdoh")), sensor, 20000, 1, 2.0);
  for (auto p : f.pixels) EXPECT_EQ(p, static_cast<std::uint16_t>(sensor.dark_level));
}

TEST(BackIllumination, ClearSampleGivesGainTimesExposure) {
  auto sensor = make_sensor("basler_nir_finger", 16, 16, 1, 16);
  sensor.read_noise_sigma = 0.0;
  sensor.dark_level = 0.0;
  auto m = detail::flat_material("clear", 0.0, "scene");
  m.transmittance = 1.0;
  const auto f = render_back_illumination(dark_uniform(m), sensor, 1000, 1);
  EXPECT_NEAR(f.mean(), std::round(sensor.gain * 1000), 0.5);
}

TEST(BackIllumination, VeinsDarkerThanTissue) {
  const auto cfg = test::fixture("finger");
  const auto sensor = make_sensor(device(cfg, "vis_nir"), 4);
  const auto scene = make_preset("finger/bona_fide", 11);
  // Exposure chosen by auto-exposure so neither class clips.
  const auto ae = auto_expose_with(
      [&](double e, int it) { return render_back_illumination(scene, sensor, e, hash_combine(1, it), 2.0); },
      sensor.dark_level, 0.3, 0.05, 20, 5000, 1e6);
  ASSERT_TRUE(ae.converged);
  const auto f = render_back_illumination(scene, sensor, ae.exposure_us, 2, 2.0);
  double vein = 0, tissue = 0;
  std::size_t nv = 0, nt = 0;
  const auto grid = detail::sample_grid(scene, sensor);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    if (grid[p] < 0 || scene.material_map[grid[p]] == 0) continue;
    const double v = f.pixels[p] - sensor.dark_level;
    if (scene.vein_mask[grid[p]]) vein += v, ++nv;
    else tissue += v, ++nt;
  }
  ASSERT_GT(nv, 20u);
  EXPECT_LT((vein / nv) / (tissue / nt), 0.8);
}

// ---------------------------------------------------------------------------

TEST(AutoExposure, ConvergesFromAnEighthOfTarget) {
  auto sensor = make_sensor("basler_nir_finger", 64, 64, 1, 12);
  sensor.read_noise_sigma = 0.0;
  auto m = detail::flat_material("clear", 0.0, "scene");
  m.transmittance = 0.5;
  const auto scene = dark_uniform(m);
  // Exposure that lands exactly on the target, then an eighth of it.
  const double range = sensor.full_scale() - sensor.dark_level;
  const double exact = 0.3 * range / (sensor.gain * 0.5);
  const auto ae = auto_expose_with([&](double e, int) { return render_back_illumination(scene, sensor, e, 1); },
                                   sensor.dark_level, 0.3, 0.02, 20, exact / 8, 1e7);
  EXPECT_TRUE(ae.converged);
  EXPECT_LE(ae.iterations, 2);
}

TEST(AutoExposure, AlreadyInBandTakesNoSteps) {
  auto sensor = make_sensor("basler_nir_finger", 64, 64, 1, 12);
  sensor.read_noise_sigma = 0.0;
  auto m = detail::flat_material("clear", 0.0, "scene");
  m.transmittance = 0.5;
  const auto scene = dark_uniform(m);
  const double exact = 0.3 * (sensor.full_scale() - sensor.dark_level) / (sensor.gain * 0.5);
  const auto ae = auto_expose_with([&](double e, int) { return render_back_illumination(scene, sensor, e, 1); },
                                   sensor.dark_level, 0.3, 0.02, 20, exact, 1e7);
  EXPECT_TRUE(ae.converged);
  EXPECT_EQ(ae.iterations, 0);
  EXPECT_EQ(ae.frames_tried, 1);
}

TEST(AutoExposure, BlackSceneDoesNotConverge) {
  auto sensor = make_sensor("basler_nir_finger", 32, 32, 1, 12);
  sensor.read_noise_sigma = 0.0;
  const auto ae = auto_expose(dark_uniform(base("playdoh")), sensor, zero_spectrum(), 0.3, 0.02, 5);
  EXPECT_FALSE(ae.converged);
  EXPECT_EQ(ae.frames_tried, 6);
}

TEST(AutoExposure, RejectsBadTarget) {
  const auto sensor = make_sensor("basler_nir_finger", 8, 8, 1, 12);
  EXPECT_THROW(auto_expose(dark_uniform(base("skin")), sensor, zero_spectrum(), 1.5, 0.02, 5), Error);
}

// ---------------------------------------------------------------------------

TEST(Thermal, MonotoneInTemperature) {
  auto sensor = make_sensor("boson_thermal", 16, 16, 1, 16);
  sensor.read_noise_sigma = 0.0;
  double prev = -1.0;
  for (double k : {290.0, 295.0, 300.0, 305.0, 310.0}) {
    const double v = render_thermal(uniform_scene(16, 16, base("skin"), k), sensor).mean();
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Thermal, ConstantSceneGivesConstantFrame) {
  auto sensor = make_sensor("boson_thermal", 16, 16, 1, 16);
  sensor.read_noise_sigma = 0.0;
  const auto f = render_thermal(uniform_scene(16, 16, base("skin"), 301.0), sensor);
  for (auto p : f.pixels) EXPECT_EQ(p, f.pixels.front());
}

TEST(Thermal, FaceWarmerThanPlasticMask) {
  const auto cfg = test::fixture("face");
  const auto sensor = make_sensor(device(cfg, "thermal"));
  const PresetSeeds seeds{2, 2};
  const auto face = make_preset("face/bona_fide", seeds);
  const auto mask = make_preset("face/plastic_mask", seeds);
  const double a = box_mean(render_thermal(face, sensor, 1), *face.face_box);
  const double b = box_mean(render_thermal(mask, sensor, 1), *mask.face_box);
  EXPECT_GT((a - b) / a, 0.15) << a << " " << b;
}

// ---------------------------------------------------------------------------

TEST(Presets, BonaFideFingerHasFlowAndWarmth) {
  const auto s = make_preset("finger/bona_fide", 1);
  s.validate();
  double flow = 0.0, kelvin = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.pixel_count(); ++i)
    if (s.material_map[i] != 0) flow += s.flow_map[i], kelvin += s.temperature_map[i], ++n;
  EXPECT_GT(flow / n, 1.0);
  EXPECT_GT(kelvin / n, 300.0);
}

TEST(Presets, ArtefactsAreStaticAndRoomTemperature) {
  for (const char* name : {"finger/silicone", "finger/playdoh", "finger/gelatin"}) {
    const auto s = make_preset(name, 1);
    s.validate();
    EXPECT_FALSE(s.is_bona_fide);
    for (std::size_t i = 0; i < s.pixel_count(); ++i) {
      EXPECT_EQ(s.flow_map[i], 0.0f);
      if (s.material_map[i] != 0) EXPECT_NEAR(s.temperature_map[i], 295.0, 1.5);
    }
  }
}

TEST(Presets, EveryNameBuildsAndValidates) {
  for (const auto& name : preset_names()) {
    const auto s = make_preset(name, PresetSeeds{1, 2});
    EXPECT_NO_THROW(s.validate(name != "calib/checkerboard")) << name;
    EXPECT_EQ(s.preset, name);
  }
  EXPECT_THROW(make_preset("finger/unicorn", 1), Error);
}

TEST(Presets, SubjectSeedFixesIdentity) {
  const auto a = make_preset("iris/bona_fide", PresetSeeds{4, 1});
  const auto b = make_preset("iris/bona_fide", PresetSeeds{4, 1});
  const auto c = make_preset("iris/bona_fide", PresetSeeds{5, 1});
  EXPECT_EQ(a.texture, b.texture);
  EXPECT_NE(a.texture, c.texture);
}
