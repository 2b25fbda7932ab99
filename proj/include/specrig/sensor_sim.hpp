#pragma once

// Camera models and frame rendering: reflective integration, laser speckle,
// back-illumination transmission, thermal emission, depth, auto-exposure.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "specrig/error.hpp"
#include "specrig/frame.hpp"
#include "specrig/random.hpp"
#include "specrig/scene.hpp"
#include "specrig/spectral.hpp"
#include "specrig/sync_config.hpp"

namespace specrig {

struct SensorModel {
  std::string id;
  Modality modality = Modality::reflective;
  int width = 1;
  int height = 1;
  int channels = 1;
  int bit_depth = 8;
  std::vector<Spectrum> sensitivity;  // one per channel
  double dark_level = 0.0;
  double read_noise_sigma = 0.0;
  double gain = 1.0;
  // Active projector built into the camera (RealSense IR, IrisID).
  double internal_emitter_nm = 0.0;
  double internal_power = 0.0;
  double depth_mm = 0.0;
  double reference_kelvin = 307.0;
  // Leakage of the LSCI laser line into this camera; 0 = none.
  double laser_crosstalk = 0.0;
  double crosstalk_nm = 1310.0;
  std::optional<ViewMatrix> view;

  double full_scale() const { return static_cast<double>((1u << bit_depth) - 1u); }
};

/// Camera model for a sensitivity id at the given output resolution.
inline SensorModel make_sensor(const std::string& sensitivity_id, int width, int height, int channels, int bit_depth) {
  const auto* e = SpectralLibrary::instance().sensor(sensitivity_id);
  if (!e)
    throw ConfigError(ConfigError::Kind::dangling_reference, sensitivity_id,
                      "unknown sensitivity_id '" + sensitivity_id + "'");
  if (static_cast<int>(e->channels.size()) != channels)
    throw ConfigError(ConfigError::Kind::schema, sensitivity_id,
                      "sensitivity '" + sensitivity_id + "' has " + std::to_string(e->channels.size()) +
                          " channels, device declares " + std::to_string(channels));
  SensorModel s;
  s.id = sensitivity_id;
  s.modality = e->modality;
  s.width = width;
  s.height = height;
  s.channels = channels;
  s.bit_depth = bit_depth;
  s.sensitivity = e->channels;
  s.dark_level = e->dark_level;
  s.read_noise_sigma = e->read_noise_sigma;
  s.gain = e->gain;
  s.internal_emitter_nm = e->internal_emitter_nm;
  s.internal_power = e->internal_power;
  s.depth_mm = e->depth_mm;
  s.reference_kelvin = e->reference_kelvin;
  return s;
}

/// Camera model of a configured device; `divisor` shrinks the output resolution.
inline SensorModel make_sensor(const DeviceSpec& dev, int divisor = 1) {
  divisor = std::max(1, divisor);
  SensorModel s = make_sensor(dev.sensitivity_id, std::max(1, dev.width / divisor), std::max(1, dev.height / divisor),
                              dev.channels, dev.bit_depth);
  s.view = dev.view;
  return s;
}

/// Light reaching the sample at one instant.
struct Illumination {
  Spectrum front = zero_spectrum();  // reflective sources
  Spectrum back = zero_spectrum();   // sources behind the sample
  double laser_nm = 0.0;
  double laser_power = 0.0;
};

namespace detail {

inline std::array<double, 9> invert3(const std::array<double, 9>& m) {
  const double a = m[0], b = m[1], c = m[2], d = m[3], e = m[4], f = m[5], g = m[6], h = m[7], i = m[8];
  const double A = e * i - f * h, B = -(d * i - f * g), C = d * h - e * g;
  const double det = a * A + b * B + c * C;
  if (std::abs(det) < 1e-12) throw GeometryError("view matrix is singular");
  const double k = 1.0 / det;
  return {A * k, -(b * i - c * h) * k, (b * f - c * e) * k,
          B * k, (a * i - c * g) * k,  -(a * f - c * d) * k,
          C * k, -(a * h - b * g) * k, (a * e - b * d) * k};
}

/// Scene pixel seen by each output pixel (nearest neighbour), -1 outside the scene.
inline std::vector<std::int32_t> sample_grid(const SpectralScene& scene, const SensorModel& sensor) {
  std::vector<std::int32_t> grid(static_cast<std::size_t>(sensor.width) * sensor.height, -1);
  std::optional<std::array<double, 9>> inv;
  if (sensor.view) inv = invert3(*sensor.view);
  for (int y = 0; y < sensor.height; ++y) {
    for (int x = 0; x < sensor.width; ++x) {
      double u = (x + 0.5) / sensor.width, v = (y + 0.5) / sensor.height;
      if (inv) {
        const auto& m = *inv;
        const double w = m[6] * u + m[7] * v + m[8];
        const double su = (m[0] * u + m[1] * v + m[2]) / w;
        const double sv = (m[3] * u + m[4] * v + m[5]) / w;
        u = su;
        v = sv;
      }
      const double px = std::floor(u * scene.width), py = std::floor(v * scene.height);
      if (px < 0 || py < 0 || px >= scene.width || py >= scene.height) continue;
      grid[static_cast<std::size_t>(y) * sensor.width + x] =
          static_cast<std::int32_t>(scene.index(static_cast<int>(px), static_cast<int>(py)));
    }
  }
  return grid;
}

inline std::uint16_t quantize(double v, double full) {
  if (!(v > 0.0)) return 0;
  return static_cast<std::uint16_t>(std::min(full, std::floor(v + 0.5)));
}

inline Frame blank_frame(const SensorModel& s, std::int64_t exposure_us) {
  Frame f(s.width, s.height, s.channels, s.bit_depth);
  f.device = s.id;
  f.exposure_us = exposure_us;
  return f;
}

class NoiseSource {
 public:
  NoiseSource(double sigma, std::uint64_t seed) : sigma_(sigma), rng_(hash_combine(seed, 0x4E01)) {}
  double operator()() { return sigma_ > 0.0 ? sigma_ * rng_.normal() : 0.0; }

 private:
  double sigma_;
  Rng rng_;
};

inline void check_bands(const Spectrum& s, const char* what) {
  if (s.size() != static_cast<std::size_t>(kBands))
    throw Error(std::string("band mismatch: ") + what + " has " + std::to_string(s.size()) + " bins, expected " +
                std::to_string(kBands));
}

/// Counts per unit texture for every (material, channel) pair.
inline std::vector<double> responses(const SpectralScene& scene, const SensorModel& sensor, const Spectrum& light,
                                     double exposure_us) {
  std::vector<double> resp(scene.materials.size() * sensor.channels, 0.0);
  for (std::size_t m = 0; m < scene.materials.size(); ++m) {
    const auto& R = scene.materials[m].reflectance;
    for (int c = 0; c < sensor.channels; ++c) {
      const auto& S = sensor.sensitivity[c];
      double sum = 0.0;
      for (int b = 0; b < kReflectiveBands; ++b) sum += light[b] * R[b] * S[b];
      resp[m * sensor.channels + c] = sensor.gain * exposure_us * sum;
    }
  }
  return resp;
}

}  // namespace detail

/// Reflective render: gain * exposure * sum_b (illum_b + ambient_b) R_b S_b,
/// plus dark level and Gaussian read noise, rounded and clamped.
inline Frame render_frame(const SpectralScene& scene, const SensorModel& sensor, const Spectrum& illum,
                          double exposure_us, std::uint64_t seed) {
  detail::check_bands(illum, "illumination");
  detail::check_bands(scene.ambient, "ambient");
  for (const auto& s : sensor.sensitivity) detail::check_bands(s, "sensitivity");
  Spectrum light = illum;
  for (int b = 0; b < kBands; ++b) light[b] += scene.ambient[b];
  if (sensor.internal_power > 0.0)
    add_led(light, sensor.internal_emitter_nm, sensor.internal_power, SpectralLibrary::instance().led_fwhm_nm());

  SensorModel eff = sensor;
  if (sensor.laser_crosstalk > 0.0) {
    const int b = band_of(sensor.crosstalk_nm);
    for (auto& s : eff.sensitivity) s[b] += sensor.laser_crosstalk;
  }
  const auto resp = detail::responses(scene, eff, light, exposure_us);
  const auto grid = detail::sample_grid(scene, sensor);

  Frame f = detail::blank_frame(sensor, static_cast<std::int64_t>(exposure_us));
  detail::NoiseSource noise(sensor.read_noise_sigma, seed);
  const double full = sensor.full_scale();
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const std::int32_t si = grid[p];
    const std::size_t m = si < 0 ? 0 : scene.material_map[si];
    const double tex = si < 0 ? 1.0 : scene.texture[si];
    for (int c = 0; c < sensor.channels; ++c) {
      const double v = resp[m * sensor.channels + c] * tex + sensor.dark_level + noise();
      f.pixels[p * sensor.channels + c] = detail::quantize(v, full);
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Laser speckle

/// Speckle realizations per millisecond per unit flow.
inline constexpr double kSpeckleDecorrelationPerMs = 0.05;
/// Flow at which contrast drops to 1/sqrt(2).
inline constexpr double kSpeckleV0 = 1.0;

/// Expected speckle contrast sigma/mean for flow v.
inline double speckle_contrast(double v) { return 1.0 / std::sqrt(1.0 + v / kSpeckleV0); }

/// One LSCI frame at time t_ms. The speckle field is fixed by `speckle_seed`
/// per pixel; moving pixels draw a new realization every
/// 1/(v * kSpeckleDecorrelationPerMs) ms, static pixels never change. Within
/// an exposure the pattern averages over 1 + v/v0 independent speckles, so the
/// intensity is Gamma distributed with contrast (1 + v/v0)^-1/2.
inline Frame render_lsci_frame(const SpectralScene& scene, const SensorModel& sensor, double laser_nm,
                               double laser_power, const Spectrum& incoherent, double exposure_us, std::int64_t t_ms,
                               std::uint64_t speckle_seed, std::uint64_t noise_seed) {
  detail::check_bands(incoherent, "illumination");
  Spectrum light = incoherent;
  for (int b = 0; b < kBands; ++b) light[b] += scene.ambient[b];
  const auto resp = detail::responses(scene, sensor, light, exposure_us);
  const int lb = band_of(laser_nm);
  std::vector<double> coherent(scene.materials.size() * sensor.channels, 0.0);
  if (lb >= 0)
    for (std::size_t m = 0; m < scene.materials.size(); ++m)
      for (int c = 0; c < sensor.channels; ++c)
        coherent[m * sensor.channels + c] =
            sensor.gain * exposure_us * laser_power * scene.materials[m].reflectance[lb] * sensor.sensitivity[c][lb];

  const auto grid = detail::sample_grid(scene, sensor);
  Frame f = detail::blank_frame(sensor, static_cast<std::int64_t>(exposure_us));
  detail::NoiseSource noise(sensor.read_noise_sigma, noise_seed);
  const double full = sensor.full_scale();
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const std::int32_t si = grid[p];
    const std::size_t m = si < 0 ? 0 : scene.material_map[si];
    const double tex = si < 0 ? 1.0 : scene.texture[si];
    const double v = si < 0 ? 0.0 : scene.flow_map[si];
    double speckle = 1.0;
    if (laser_power > 0.0) {
      const double shape = 1.0 + v / kSpeckleV0;
      const auto realization =
          v > 0.0 ? static_cast<std::uint64_t>(std::floor(static_cast<double>(t_ms) * v * kSpeckleDecorrelationPerMs))
                  : 0u;
      Rng rng(hash_combine(hash_combine(speckle_seed, p), realization));
      speckle = rng.gamma(shape) / shape;
    }
    for (int c = 0; c < sensor.channels; ++c) {
      const std::size_t k = m * sensor.channels + c;
      const double val = (resp[k] + coherent[k] * speckle) * tex + sensor.dark_level + noise();
      f.pixels[p * sensor.channels + c] = detail::quantize(val, full);
    }
  }
  return f;
}

/// A burst of LSCI frames, frame i at t = i * frame_period_ms.
inline std::vector<Frame> render_lsci_sequence(const SpectralScene& scene, const SensorModel& sensor,
                                               double laser_power, int n_frames, std::int64_t frame_period_ms,
                                               std::uint64_t seed, double exposure_us = 5000.0,
                                               double laser_nm = 1310.0) {
  if (sensor.modality != Modality::lsci) throw Error("sensor '" + sensor.id + "' cannot image laser speckle");
  if (n_frames < 1) throw Error("n_frames must be >= 1");
  std::vector<Frame> out;
  out.reserve(static_cast<std::size_t>(n_frames));
  for (int i = 0; i < n_frames; ++i) {
    const std::int64_t t = static_cast<std::int64_t>(i) * frame_period_ms;
    Frame f = render_lsci_frame(scene, sensor, laser_nm, laser_power, zero_spectrum(), exposure_us, t, seed,
                                hash_combine(seed, static_cast<std::uint64_t>(i)));
    f.timestamp_ms = t;
    f.sequence_index = i;
    out.push_back(std::move(f));
  }
  return out;
}

/// Local contrast sigma/mean over a rectangle of one channel, with the dark level removed.
inline double measure_contrast(const Frame& f, int x0, int y0, int x1, int y1, double dark = 0.0) {
  double s = 0.0, ss = 0.0;
  std::size_t n = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double v = f.at(y, x) - dark;
      s += v;
      ss += v * v;
      ++n;
    }
  if (n == 0) return 0.0;
  const double mean = s / n;
  const double var = std::max(0.0, ss / n - mean * mean);
  return mean > 0.0 ? std::sqrt(var) / mean : 0.0;
}

// ---------------------------------------------------------------------------
// Back-illumination, thermal, depth

/// Attenuation of the hemoglobin absorption along vein pixels (optical depth).
inline constexpr double kVeinOpticalDepth = 0.8;

/// Light transmitted through the sample from a source behind it:
/// gain * exposure * source_power * T * exp(-thickness) * vein attenuation.
inline Frame render_back_illumination(const SpectralScene& scene, const SensorModel& sensor, double exposure_us,
                                      std::uint64_t seed, double source_power = 1.0) {
  const auto grid = detail::sample_grid(scene, sensor);
  Frame f = detail::blank_frame(sensor, static_cast<std::int64_t>(exposure_us));
  detail::NoiseSource noise(sensor.read_noise_sigma, seed);
  const double full = sensor.full_scale();
  const double vein = std::exp(-kVeinOpticalDepth);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const std::int32_t si = grid[p];
    double t = 0.0;
    if (si >= 0) {
      t = scene.materials[scene.material_map[si]].transmittance * std::exp(-scene.thickness_map[si]);
      if (scene.vein_mask[si]) t *= vein;
    } else {
      t = scene.materials[0].transmittance;
    }
    const double signal = sensor.gain * exposure_us * source_power * t;
    for (int c = 0; c < sensor.channels; ++c)
      f.pixels[p * sensor.channels + c] = detail::quantize(signal + sensor.dark_level + noise(), full);
  }
  return f;
}

/// Radiometric thermal frame: mid-scale at the reference temperature,
/// `gain` counts per kelvin around it.
inline Frame render_thermal(const SpectralScene& scene, const SensorModel& sensor, std::uint64_t seed = 0) {
  const auto grid = detail::sample_grid(scene, sensor);
  Frame f = detail::blank_frame(sensor, 0);
  detail::NoiseSource noise(sensor.read_noise_sigma, seed);
  const double full = sensor.full_scale();
  const double mid = std::floor(full / 2.0);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double kelvin = grid[p] < 0 ? scene.background_kelvin : scene.temperature_map[grid[p]];
    const double v = mid + sensor.gain * (kelvin - sensor.reference_kelvin) + noise();
    for (int c = 0; c < sensor.channels; ++c) f.pixels[p * sensor.channels + c] = detail::quantize(v, full);
  }
  return f;
}

/// Depth stream: a constant plane at the sensor's nominal distance plus noise.
inline Frame render_depth(const SensorModel& sensor, std::uint64_t seed = 0) {
  Frame f = detail::blank_frame(sensor, 0);
  detail::NoiseSource noise(sensor.read_noise_sigma, seed);
  const double full = sensor.full_scale();
  for (auto& px : f.pixels) px = detail::quantize(sensor.depth_mm + noise(), full);
  return f;
}

// ---------------------------------------------------------------------------
// Auto-exposure

/// Mean signal above the dark level as a fraction of the usable range.
inline double signal_fraction(const Frame& f, double dark_level) {
  const double range = f.max_value() - dark_level;
  if (range <= 0.0) return 0.0;
  return std::clamp((f.mean() - dark_level) / range, 0.0, 1.0);
}

/// One multiplicative control step: exposure * target / measured. A frame
/// with no signal at all gives no ratio to use, so exposure grows 8x.
inline double next_exposure(double exposure_us, double fraction, double target, double max_us) {
  const double next = fraction > 0.0 ? exposure_us * target / fraction : exposure_us * 8.0;
  return std::clamp(next, 1.0, max_us);
}

struct AutoExposeResult {
  double exposure_us = 0.0;
  int frames_tried = 0;
  int iterations = 0;  // exposure updates after the first frame
  bool converged = false;
  double fraction = 0.0;
};

/// Runs the control loop against any renderer `render(exposure_us, attempt)`.
template <typename Render>
AutoExposeResult auto_expose_with(Render&& render, double dark_level, double target, double tolerance,
                                  int max_iters, double initial_us, double max_us) {
  if (!(target > 0.0 && target < 1.0)) throw Error("target_fraction must lie in (0,1)");
  if (max_iters < 1) throw Error("max_iters must be >= 1");
  AutoExposeResult best;
  double best_err = std::numeric_limits<double>::infinity();
  double exposure = std::clamp(initial_us, 1.0, max_us);
  for (int it = 0;; ++it) {
    const Frame f = render(exposure, it);
    const double frac = signal_fraction(f, dark_level);
    const double err = std::abs(frac - target);
    if (err < best_err) {
      best_err = err;
      best.exposure_us = exposure;
      best.fraction = frac;
    }
    best.frames_tried = it + 1;
    best.iterations = it;
    if (err <= tolerance) {
      best.exposure_us = exposure;
      best.fraction = frac;
      best.converged = true;
      return best;
    }
    if (it == max_iters) return best;
    exposure = next_exposure(exposure, frac, target, max_us);
  }
}

/// Exposure that brings the reflective render's mean to target +- tolerance
/// of full scale, or the best found after max_iters updates.
inline AutoExposeResult auto_expose(const SpectralScene& scene, const SensorModel& sensor, const Spectrum& illum,
                                    double target, double tolerance, int max_iters, double initial_us = 5000.0,
                                    double max_us = 1e7, std::uint64_t seed = 0) {
  return auto_expose_with([&](double e, int it) { return render_frame(scene, sensor, illum, e, hash_combine(seed, it)); },
                          sensor.dark_level, target, tolerance, max_iters, initial_us, max_us);
}

}  // namespace specrig
