#pragma once

// Per-device capture service: a session state machine that renders frames on
// hardware trigger pulses or on its own software timer, plus its REST surface.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

// Small request/response pairs on loopback stall on Nagle without this.
#ifndef CPPHTTPLIB_TCP_NODELAY
#define CPPHTTPLIB_TCP_NODELAY true
#endif
#include "httplib.h"
#include "specrig/controller_sim.hpp"
#include "specrig/error.hpp"
#include "specrig/frame.hpp"
#include "specrig/random.hpp"
#include "specrig/scene.hpp"
#include "specrig/sensor_sim.hpp"
#include "specrig/sync_config.hpp"

namespace specrig {

enum class SessionState { idle, initialized, previewing, capturing, done };

inline const char* to_string(SessionState s) {
  switch (s) {
    case SessionState::idle: return "idle";
    case SessionState::initialized: return "initialized";
    case SessionState::previewing: return "previewing";
    case SessionState::capturing: return "capturing";
    case SessionState::done: return "done";
  }
  return "?";
}

/// What the camera looks at. An explicit scene wins over a preset name; with
/// neither the device images an empty black room.
struct SceneBinding {
  std::string preset;
  PresetSeeds seeds;
  std::shared_ptr<const SpectralScene> scene;
  int divisor = 1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"preset", preset}, {"subject_seed", seeds.subject}, {"presentation_seed", seeds.presentation},
            {"divisor", divisor}, {"seed", seed}};
  }
  static SceneBinding from_json(const nlohmann::json& j) {
    SceneBinding b;
    b.preset = j.value("preset", std::string{});
    b.seeds.subject = j.value("subject_seed", std::uint64_t{0});
    b.seeds.presentation = j.value("presentation_seed", std::uint64_t{0});
    b.divisor = j.value("divisor", 1);
    b.seed = j.value("seed", std::uint64_t{0});
    return b;
  }
};

struct CaptureRequest {
  int n_frames = 0;
  std::map<std::string, int> plan;              // dataset -> expected frames
  std::map<std::string, std::string> datasets;  // illumination tag -> dataset
  // Software-timer window: frame k is due at start_ms + k * period_ms.
  std::int64_t start_ms = 0;
  std::int64_t period_ms = 0;
  bool real_time = false;

  nlohmann::json to_json() const {
    return {{"n_frames", n_frames}, {"plan", plan},         {"datasets", datasets},
            {"start_ms", start_ms}, {"period_ms", period_ms}, {"real_time", real_time}};
  }
  static CaptureRequest from_json(const nlohmann::json& j) {
    CaptureRequest r;
    r.n_frames = j.at("n_frames").get<int>();
    if (r.n_frames < 0) throw Error("n_frames must be >= 0");
    r.plan = j.value("plan", std::map<std::string, int>{});
    r.datasets = j.value("datasets", std::map<std::string, std::string>{});
    r.start_ms = j.value("start_ms", std::int64_t{0});
    r.period_ms = j.value("period_ms", std::int64_t{0});
    r.real_time = j.value("real_time", false);
    return r;
  }
};

/// Capture request a configured device gets for one run of `schedule`.
inline CaptureRequest request_for(const CaptureConfig& cfg, const Schedule& schedule, const std::string& device) {
  CaptureRequest r;
  if (auto it = schedule.per_device_frame_plan.find(device); it != schedule.per_device_frame_plan.end())
    r.plan = it->second;
  r.n_frames = schedule.frames_for(device);
  for (const auto& [key, name] : cfg.dataset_names)
    if (key.first == device) r.datasets[key.second] = name;
  for (const auto& p : schedule.software_plans)
    if (p.device == device) {
      r.start_ms = p.start_ms;
      r.period_ms = p.period_ms;
    }
  return r;
}

/// A trigger pulse as delivered to a device, with the light that is on.
struct TriggerInput {
  std::int64_t t_ms = 0;
  std::string tag;
  std::optional<Exposure> exposure;
  std::vector<Emitter> emitters;

  nlohmann::json to_json() const {
    nlohmann::json j{{"t_ms", t_ms}, {"tag", tag}, {"illum", emitters_to_json(emitters)}};
    if (exposure) j["exposure"] = exposure_to_json(*exposure);
    return j;
  }
  static TriggerInput from_json(const nlohmann::json& j) {
    TriggerInput t;
    t.t_ms = j.at("t_ms").get<std::int64_t>();
    t.tag = j.at("tag").get<std::string>();
    if (j.contains("exposure")) t.exposure = detail::parse_exposure(j["exposure"], "exposure");
    if (j.contains("illum")) t.emitters = emitters_from_json(j["illum"]);
    return t;
  }
};

using TriggerDelivery = std::function<void(const std::string& device, const TriggerInput&)>;

/// Replays `schedule` on the controller, folding LED and DAC state, and hands
/// every trigger pulse with the emitters on at that instant to `deliver`.
inline EventLog replay_triggers(const CaptureConfig& cfg, const Schedule& schedule, RigClock& clock,
                                const TriggerDelivery& deliver) {
  RigState st = initial_state(&cfg);
  return run_capture_loop(
      schedule,
      [&](const ControllerEvent& e) {
        st.apply(e);
        if (const auto* p = std::get_if<TriggerPulse>(&e.kind))
          deliver(p->device, TriggerInput{e.t_ms, p->illumination_tag, p->exposure, emitters_from_state(st, cfg)});
      },
      clock);
}

struct PreviewFrame {
  std::uint64_t id = 0;
  Frame frame;
};

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline SpectralScene dark_room() {
  SpectralScene s = uniform_scene(64, 64, flat_material("background", 0.0, "none"));
  s.preset = "dark_room";
  s.ambient = zero_spectrum();
  return s;
}

inline double seen_power(const SensorModel& sensor, const Spectrum& light) {
  double p = 0.0;
  for (const auto& s : sensor.sensitivity)
    for (int b = 0; b < kBands; ++b) p += light[b] * s[b];
  return p;
}

}  // namespace detail

/// Auto-exposure meter of a device: signal fraction over the central half of
/// the frame in each axis, where the sample sits.
inline double metered_fraction(const Frame& f, double dark_level) {
  const double range = f.max_value() - dark_level;
  if (range <= 0.0) return 0.0;
  const int x0 = f.width / 4, x1 = std::max(x0 + 1, 3 * f.width / 4);
  const int y0 = f.height / 4, y1 = std::max(y0 + 1, 3 * f.height / 4);
  double s = 0.0;
  std::size_t n = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      for (int c = 0; c < f.channels; ++c, ++n) s += f.at(y, x, c);
  return std::clamp((s / static_cast<double>(n) - dark_level) / range, 0.0, 1.0);
}

/// One frame under the given light. Thermal and depth sensors ignore light;
/// an LSCI sensor with the laser on images speckle; a sensor that mostly sees
/// light from behind the sample images transmission; anything else is a
/// reflective frame.
inline Frame render_device_frame(const SpectralScene& scene, const SensorModel& sensor, const Illumination& il,
                                 double exposure_us, std::int64_t t_ms, std::uint64_t speckle_seed,
                                 std::uint64_t noise_seed) {
  switch (sensor.modality) {
    case Modality::thermal: return render_thermal(scene, sensor, noise_seed);
    case Modality::depth: return render_depth(sensor, noise_seed);
    case Modality::lsci:
      if (il.laser_power > 0.0)
        return render_lsci_frame(scene, sensor, il.laser_nm, il.laser_power, il.front, exposure_us, t_ms,
                                 speckle_seed, noise_seed);
      break;
    case Modality::reflective: break;
  }
  const double back = detail::seen_power(sensor, il.back);
  const double front = detail::seen_power(sensor, il.front);
  if (back > 0.0 && back > 0.01 * (back + front))
    return render_back_illumination(scene, sensor, exposure_us, noise_seed, back);
  return render_frame(scene, sensor, il.front, exposure_us, noise_seed);
}

// ---------------------------------------------------------------------------
// Session

using LogFn = std::function<void(const std::string&)>;

inline LogFn stderr_log(const std::string& prefix) {
  return [prefix](const std::string& m) { std::clog << "[" << prefix << "] " << m << "\n"; };
}

class DeviceSession {
 public:
  explicit DeviceSession(LogFn log = {}) : log_(std::move(log)) {}
  ~DeviceSession() { stop_workers(); }
  DeviceSession(const DeviceSession&) = delete;
  DeviceSession& operator=(const DeviceSession&) = delete;

  nlohmann::json initialize(const DeviceSpec& spec, const SceneBinding& binding = {}) {
    std::unique_lock lock(mu_);
    if (state_ != SessionState::idle) throw ConflictError("device '" + spec_.id + "' is already initialized");
    bind(spec, binding);
    state_ = SessionState::initialized;
    return status_locked();
  }

  /// Runtime parameters: scene (a new binding), read_noise_sigma, deadline_ms,
  /// preview, preview_period_ms.
  void set_params(const nlohmann::json& p) {
    bool start_preview = false, stop_preview = false;
    {
      std::unique_lock lock(mu_);
      require_initialized();
      if (p.contains("scene")) {
        if (state_ != SessionState::initialized && state_ != SessionState::done)
          throw ConflictError("device '" + spec_.id + "' cannot change scene while " + to_string(state_));
        bind(spec_, SceneBinding::from_json(p["scene"]));
      }
      if (p.contains("read_noise_sigma")) sensor_.read_noise_sigma = p["read_noise_sigma"].get<double>();
      if (p.contains("deadline_ms")) deadline_ = std::chrono::milliseconds(p["deadline_ms"].get<std::int64_t>());
      if (p.contains("preview_period_ms"))
        preview_period_ = std::chrono::milliseconds(std::max<std::int64_t>(1, p["preview_period_ms"].get<std::int64_t>()));
      if (p.contains("preview")) {
        const bool on = p["preview"].get<bool>();
        if (on && state_ == SessionState::initialized) {
          state_ = SessionState::previewing;
          preview_stop_ = false;
          start_preview = true;
        } else if (!on && state_ == SessionState::previewing) {
          state_ = SessionState::initialized;
          stop_preview = true;
        } else if (on != (state_ == SessionState::previewing)) {
          throw ConflictError("device '" + spec_.id + "' cannot toggle preview while " + to_string(state_));
        }
      }
    }
    if (stop_preview) join_preview();
    if (start_preview) preview_thread_ = std::thread([this] { preview_loop(); });
  }

  void capture(const CaptureRequest& req) {
    join_preview_if_leaving();
    std::unique_lock lock(mu_);
    if (state_ == SessionState::capturing)
      throw ConflictError("device '" + spec_.id + "' is already capturing");
    if (state_ != SessionState::initialized && state_ != SessionState::previewing)
      throw ConflictError("device '" + spec_.id + "' cannot capture while " + to_string(state_));
    preview_stop_ = true;
    request_ = req;
    frames_.clear();
    ae_exposure_.clear();
    timed_out_ = false;
    error_.clear();
    last_activity_ = std::chrono::steady_clock::now();
    state_ = req.n_frames == 0 ? SessionState::done : SessionState::capturing;
    cv_.notify_all();
    if (state_ == SessionState::capturing && spec_.trigger_mode == TriggerMode::software) {
      lock.unlock();
      join_software();
      software_stop_ = false;
      software_thread_ = std::thread([this] { software_loop(); });
    }
  }

  /// Back from done to initialized, discarding the captured frames.
  void reset() {
    join_software();
    std::unique_lock lock(mu_);
    if (state_ == SessionState::capturing) throw ConflictError("device '" + spec_.id + "' is capturing");
    if (state_ == SessionState::done) state_ = SessionState::initialized;
    frames_.clear();
  }

  /// Renders one frame for a hardware pulse. Pulses outside a capture, or
  /// beyond the expected count, are ignored with a warning.
  std::optional<Frame> on_trigger(const TriggerInput& in) {
    std::unique_lock lock(mu_);
    if (state_ != SessionState::capturing || spec_.trigger_mode != TriggerMode::hardware) {
      warn("pulse at t=" + std::to_string(in.t_ms) + " ms ignored: device is " + to_string(state_) +
           (spec_.trigger_mode == TriggerMode::software ? " (software timer)" : ""));
      return std::nullopt;
    }
    if (static_cast<int>(frames_.size()) >= request_.n_frames) {
      warn("pulse at t=" + std::to_string(in.t_ms) + " ms ignored: all " + std::to_string(request_.n_frames) +
           " frames captured");
      return std::nullopt;
    }
    const std::string dataset = dataset_for_tag(in.tag);
    const Exposure exposure = effective_exposure(spec_, TriggerPulse{spec_.id, in.tag, in.exposure});
    const Illumination il = spec_.lit ? illumination_from_emitters(in.emitters) : Illumination{};
    const std::uint64_t noise_seed = hash_combine(hash_combine(binding_.seed, hash_string(spec_.id)), frames_.size());
    const std::uint64_t speckle_seed = hash_combine(binding_.seed, hash_string(spec_.id + "/speckle"));

    Frame f;
    if (const auto* a = std::get_if<AutoExposure>(&exposure)) {
      auto it = ae_exposure_.try_emplace(dataset, static_cast<double>(a->initial_us)).first;
      const double e = it->second;
      f = render_device_frame(*scene_, sensor_, il, e, in.t_ms, speckle_seed, noise_seed);
      const double frac = metered_fraction(f, sensor_.dark_level);
      if (std::abs(frac - a->target_fraction) > a->tolerance_fraction)
        it->second = next_exposure(e, frac, a->target_fraction, static_cast<double>(a->max_us));
    } else {
      const double e = static_cast<double>(std::get<FixedExposure>(exposure).microseconds);
      f = render_device_frame(*scene_, sensor_, il, e, in.t_ms, speckle_seed, noise_seed);
    }
    f.timestamp_ms = in.t_ms;
    push_frame(std::move(f), in.tag, dataset);
    return frames_.back();
  }

  std::optional<PreviewFrame> preview() const {
    std::lock_guard lock(mu_);
    if (!latest_) return std::nullopt;
    return PreviewFrame{latest_id_, *latest_};
  }

  Frame frame(std::size_t i) const {
    std::lock_guard lock(mu_);
    if (i >= frames_.size()) throw Error("frame " + std::to_string(i) + " not captured");
    return frames_[i];
  }
  std::vector<Frame> frames() const {
    std::lock_guard lock(mu_);
    return frames_;
  }

  SessionState state() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  nlohmann::json status() const {
    std::lock_guard lock(mu_);
    return status_locked();
  }

  std::vector<std::string> warnings() const {
    std::lock_guard lock(mu_);
    return warnings_;
  }

  /// Blocks until the capture is done. Throws TimeoutError once no frame has
  /// arrived for the deadline.
  void wait_done() {
    std::unique_lock lock(mu_);
    while (state_ == SessionState::capturing) {
      if (check_deadline_locked())
        throw TimeoutError("device '" + spec_.id + "' timed out after " + std::to_string(frames_.size()) + "/" +
                           std::to_string(request_.n_frames) + " frames");
      cv_.wait_for(lock, std::chrono::milliseconds(20));
    }
    if (!error_.empty()) throw Error("device '" + spec_.id + "': " + error_);
  }

  const DeviceSpec& spec() const { return spec_; }

 private:
  // Loads the sensor model and scene; leaves the session untouched on error.
  void bind(const DeviceSpec& spec, const SceneBinding& binding) {
    SensorModel sensor = make_sensor(spec, binding.divisor);
    std::shared_ptr<const SpectralScene> scene = binding.scene;
    if (!scene)
      scene = std::make_shared<const SpectralScene>(binding.preset.empty() ? detail::dark_room()
                                                                           : make_preset(binding.preset, binding.seeds));
    spec_ = spec;
    binding_ = binding;
    sensor_ = std::move(sensor);
    scene_ = std::move(scene);
  }

  void require_initialized() const {
    if (state_ == SessionState::idle) throw ConflictError("device is not initialized");
  }

  void warn(const std::string& m) {
    warnings_.push_back(m);
    if (log_) log_("warning: " + m);
  }

  std::string dataset_for_tag(const std::string& tag) const {
    if (auto it = request_.datasets.find(tag); it != request_.datasets.end()) return it->second;
    return spec_.id + "/" + tag;
  }

  void push_frame(Frame f, const std::string& tag, const std::string& dataset) {
    f.device = spec_.id;
    f.illumination_tag = tag;
    f.dataset = dataset;
    f.sequence_index = static_cast<std::int64_t>(frames_.size());
    frames_.push_back(std::move(f));
    latest_ = frames_.back();
    ++latest_id_;
    last_activity_ = std::chrono::steady_clock::now();
    if (static_cast<int>(frames_.size()) >= request_.n_frames) state_ = SessionState::done;
    cv_.notify_all();
  }

  bool check_deadline_locked() const {
    if (state_ != SessionState::capturing || spec_.trigger_mode != TriggerMode::hardware) return timed_out_;
    if (std::chrono::steady_clock::now() - last_activity_ > deadline_) timed_out_ = true;
    return timed_out_;
  }

  nlohmann::json status_locked() const {
    const bool timed_out = check_deadline_locked();
    nlohmann::json j{{"id", spec_.id},
                     {"mode", spec_.trigger_mode == TriggerMode::hardware ? "hardware" : "software"},
                     {"state", to_string(state_)},
                     {"ready", state_ != SessionState::idle},
                     {"frames_expected", state_ == SessionState::capturing || state_ == SessionState::done
                                             ? request_.n_frames
                                             : 0},
                     {"frames_captured", frames_.size()},
                     {"timed_out", timed_out},
                     {"warnings", warnings_.size()},
                     {"latest_frame_id", latest_id_}};
    if (!error_.empty()) j["error"] = error_;
    if (state_ != SessionState::idle) {
      j["width"] = sensor_.width;
      j["height"] = sensor_.height;
      j["channels"] = sensor_.channels;
      j["bit_depth"] = sensor_.bit_depth;
      j["scene"] = scene_->preset;
    }
    return j;
  }

  // Software timer: frame k is stamped start + k * period plus seeded uniform
  // jitter, kept nondecreasing.
  void software_loop() {
    CaptureRequest req;
    {
      std::lock_guard lock(mu_);
      req = request_;
    }
    const auto origin = std::chrono::steady_clock::now();
    const std::string tag = spec_.tag;
    const std::string dataset = dataset_for_tag(tag);
    const std::int64_t period = req.period_ms > 0 ? req.period_ms : spec_.frame_period_ms;
    Rng jitter(hash_combine(binding_.seed, hash_string(spec_.id + "/jitter")));
    std::int64_t prev = 0;
    for (int k = 0; k < req.n_frames; ++k) {
      const double nominal = static_cast<double>(req.start_ms + k * period);
      auto t = static_cast<std::int64_t>(std::llround(nominal + jitter.uniform(-spec_.jitter_ms, spec_.jitter_ms)));
      t = std::max<std::int64_t>({t, prev, 0});
      prev = t;
      if (req.real_time) {
        std::unique_lock lock(mu_);
        if (cv_.wait_until(lock, origin + std::chrono::milliseconds(t), [this] { return software_stop_.load(); }))
          return;
      } else if (software_stop_) {
        return;
      }
      const std::uint64_t noise_seed = hash_combine(hash_combine(binding_.seed, hash_string(spec_.id)), k);
      Frame f;
      try {
        f = render_device_frame(*scene_, sensor_, Illumination{}, exposure_of(spec_.exposure), t, 0, noise_seed);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu_);
        error_ = e.what();
        state_ = SessionState::done;
        cv_.notify_all();
        return;
      }
      f.timestamp_ms = t;
      std::lock_guard lock(mu_);
      if (state_ != SessionState::capturing) return;
      push_frame(std::move(f), tag, dataset);
    }
  }

  static double exposure_of(const Exposure& e) {
    if (const auto* f = std::get_if<FixedExposure>(&e)) return static_cast<double>(f->microseconds);
    return static_cast<double>(std::get<AutoExposure>(e).initial_us);
  }

  void preview_loop() {
    std::uint64_t k = 0;
    std::unique_lock lock(mu_);
    while (!preview_stop_ && state_ == SessionState::previewing) {
      const auto seed = hash_combine(hash_combine(binding_.seed, hash_string(spec_.id + "/preview")), k);
      Frame f = render_device_frame(*scene_, sensor_, Illumination{}, exposure_of(spec_.exposure), 0, 0, seed);
      f.device = spec_.id;
      f.illumination_tag = "preview";
      f.sequence_index = static_cast<std::int64_t>(k++);
      latest_ = std::move(f);
      ++latest_id_;
      cv_.wait_for(lock, preview_period_, [this] { return preview_stop_ || state_ != SessionState::previewing; });
    }
  }

  void join_preview() {
    {
      std::lock_guard lock(mu_);
      preview_stop_ = true;
      cv_.notify_all();
    }
    if (preview_thread_.joinable()) preview_thread_.join();
  }
  void join_preview_if_leaving() {
    std::unique_lock lock(mu_);
    if (state_ != SessionState::previewing) return;
    lock.unlock();
    join_preview();
  }
  void join_software() {
    software_stop_ = true;
    {
      std::lock_guard lock(mu_);
      cv_.notify_all();
    }
    if (software_thread_.joinable()) software_thread_.join();
  }
  void stop_workers() {
    join_preview();
    join_software();
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  LogFn log_;
  SessionState state_ = SessionState::idle;
  DeviceSpec spec_;
  SceneBinding binding_;
  SensorModel sensor_;
  std::shared_ptr<const SpectralScene> scene_;
  CaptureRequest request_;
  std::vector<Frame> frames_;
  std::map<std::string, double> ae_exposure_;
  std::optional<Frame> latest_;
  std::uint64_t latest_id_ = 0;
  std::vector<std::string> warnings_;
  std::string error_;
  std::chrono::milliseconds deadline_{10000};
  std::chrono::milliseconds preview_period_{200};
  std::chrono::steady_clock::time_point last_activity_{};
  mutable bool timed_out_ = false;
  bool preview_stop_ = false;
  std::atomic<bool> software_stop_{false};
  std::thread preview_thread_;
  std::thread software_thread_;
};

/// Index of the frame in `reference` closest in time to `t_ms`, -1 when empty.
inline std::ptrdiff_t nearest_frame(const std::vector<std::int64_t>& reference, std::int64_t t_ms) {
  std::ptrdiff_t best = -1;
  std::int64_t best_d = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const std::int64_t d = std::abs(reference[i] - t_ms);
    if (best < 0 || d < best_d) {
      best = static_cast<std::ptrdiff_t>(i);
      best_d = d;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Wire formats

inline constexpr char kMsf1Magic[4] = {'M', 'S', 'F', '1'};
inline constexpr std::size_t kMsf1HeaderBytes = 16;

/// 16-byte header (magic, u16 width, u16 height, u8 channels, u8 bit depth,
/// u16 reserved, u32 timestamp), then little-endian samples: one byte each
/// up to 8 bits, two above.
inline std::string encode_msf1(const Frame& f) {
  const std::size_t bps = f.bit_depth > 8 ? 2 : 1;
  std::string out(kMsf1HeaderBytes + f.pixels.size() * bps, '\0');
  auto* p = reinterpret_cast<unsigned char*>(out.data());
  std::memcpy(p, kMsf1Magic, 4);
  auto put16 = [](unsigned char* q, std::uint32_t v) {
    q[0] = static_cast<unsigned char>(v & 0xFF);
    q[1] = static_cast<unsigned char>((v >> 8) & 0xFF);
  };
  put16(p + 4, static_cast<std::uint32_t>(f.width));
  put16(p + 6, static_cast<std::uint32_t>(f.height));
  p[8] = static_cast<unsigned char>(f.channels);
  p[9] = static_cast<unsigned char>(f.bit_depth);
  const auto ts = static_cast<std::uint32_t>(f.timestamp_ms);
  put16(p + 12, ts & 0xFFFF);
  put16(p + 14, ts >> 16);
  unsigned char* q = p + kMsf1HeaderBytes;
  if (bps == 1) {
    for (auto v : f.pixels) *q++ = static_cast<unsigned char>(v);
  } else {
    for (auto v : f.pixels) {
      put16(q, v);
      q += 2;
    }
  }
  return out;
}

inline Frame decode_msf1(const std::string& bytes) {
  if (bytes.size() < kMsf1HeaderBytes || std::memcmp(bytes.data(), kMsf1Magic, 4) != 0)
    throw Error("not an MSF1 frame");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  auto get16 = [](const unsigned char* q) { return static_cast<std::uint32_t>(q[0] | (q[1] << 8)); };
  Frame f(static_cast<int>(get16(p + 4)), static_cast<int>(get16(p + 6)), p[8], p[9]);
  f.timestamp_ms = static_cast<std::int64_t>(get16(p + 12) | (get16(p + 14) << 16));
  const std::size_t bps = f.bit_depth > 8 ? 2 : 1;
  if (bytes.size() != kMsf1HeaderBytes + f.pixels.size() * bps) throw Error("MSF1 frame has the wrong length");
  const unsigned char* q = p + kMsf1HeaderBytes;
  for (auto& v : f.pixels) {
    v = static_cast<std::uint16_t>(bps == 1 ? q[0] : get16(q));
    q += bps;
  }
  return f;
}

/// Binary PGM (P5) of a single-channel frame, 16-bit big-endian above 8 bits.
inline std::string encode_pgm(const Frame& f) {
  if (f.channels != 1) throw Error("PGM needs a single-channel frame");
  std::string out = "P5\n" + std::to_string(f.width) + " " + std::to_string(f.height) + "\n" +
                    std::to_string(f.max_value()) + "\n";
  for (auto v : f.pixels) {
    if (f.bit_depth > 8) out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xFF));
  }
  return out;
}

// ---------------------------------------------------------------------------
// REST

namespace detail {

// httplib's default also sets SO_REUSEPORT, which lets a second server bind
// a port already in use. Keep SO_REUSEADDR only so collisions fail loudly.
inline void exclusive_socket(socket_t sock) {
  int yes = 1;
  setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
}

inline void json_reply(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

inline void frame_reply(httplib::Response& res, const Frame& f, std::uint64_t id, bool pgm) {
  res.set_header("X-Frame-Id", std::to_string(id));
  res.set_header("X-Dataset", f.dataset);
  res.set_header("X-Device", f.device);
  res.set_header("X-Tag", f.illumination_tag);
  res.set_header("X-Sequence-Index", std::to_string(f.sequence_index));
  res.set_header("X-Exposure-Us", std::to_string(f.exposure_us));
  res.set_header("X-Timestamp-Ms", std::to_string(f.timestamp_ms));
  if (pgm) {
    res.set_content(encode_pgm(f), "image/x-portable-graymap");
  } else {
    res.set_content(encode_msf1(f), "application/octet-stream");
  }
}

/// Maps library exceptions onto HTTP statuses with a JSON error body.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ConflictError& e) {
    json_reply(res, {{"error", e.what()}, {"kind", "conflict"}}, 409);
  } catch (const ConfigError& e) {
    json_reply(res, {{"error", e.what()}, {"kind", "config"}, {"subject", e.subject()}}, 422);
  } catch (const TimeoutError& e) {
    json_reply(res, {{"error", e.what()}, {"kind", "timeout"}}, 504);
  } catch (const nlohmann::json::exception& e) {
    json_reply(res, {{"error", e.what()}, {"kind", "bad_request"}}, 400);
  } catch (const std::exception& e) {
    json_reply(res, {{"error", e.what()}, {"kind", "error"}}, 400);
  }
}

}  // namespace detail

/// REST front of one DeviceSession. The device spec is fixed at construction;
/// POST /initialize may replace it with a "device" entry.
class DeviceServer {
 public:
  explicit DeviceServer(DeviceSpec spec, LogFn log = {}) : spec_(std::move(spec)), session_(std::move(log)) {
    server_.set_socket_options(detail::exclusive_socket);
    routes();
  }
  ~DeviceServer() { stop(); }
  DeviceServer(const DeviceServer&) = delete;
  DeviceServer& operator=(const DeviceServer&) = delete;

  /// Binds `port` (0 picks a free one) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ <= 0) throw Error("device '" + spec_.id + "' cannot bind port " + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.bind_to_port(host, port)) throw Error("cannot bind port " + std::to_string(port));
    port_ = port;
    server_.listen_after_bind();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  DeviceSession& session() { return session_; }

 private:
  void routes() {
    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      detail::json_reply(res, {{"ok", true}, {"device", spec_.id}});
    });
    server_.Post("/initialize", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
        DeviceSpec spec = body.contains("device") ? device_from_json(body["device"]) : spec_;
        detail::json_reply(res, session_.initialize(spec, SceneBinding::from_json(body.value("scene", nlohmann::json::object()))));
      });
    });
    server_.Post("/params", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        session_.set_params(nlohmann::json::parse(req.body));
        detail::json_reply(res, session_.status());
      });
    });
    server_.Post("/capture", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        session_.capture(CaptureRequest::from_json(nlohmann::json::parse(req.body)));
        detail::json_reply(res, session_.status(), 202);
      });
    });
    server_.Post("/reset", [this](const httplib::Request&, httplib::Response& res) {
      detail::guarded(res, [&] {
        session_.reset();
        detail::json_reply(res, session_.status());
      });
    });
    server_.Post("/trigger", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const auto f = session_.on_trigger(TriggerInput::from_json(nlohmann::json::parse(req.body)));
        nlohmann::json j{{"accepted", f.has_value()}};
        if (f) {
          j["sequence_index"] = f->sequence_index;
          j["dataset"] = f->dataset;
        }
        detail::json_reply(res, j);
      });
    });
    server_.Get("/preview", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const auto p = session_.preview();
        if (!p) {
          res.status = 204;
          return;
        }
        detail::frame_reply(res, p->frame, p->id, req.get_param_value("format") == "pgm");
      });
    });
    server_.Get(R"(/frames/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      detail::guarded(res, [&] {
        const auto i = std::stoull(req.matches[1].str());
        const auto st = session_.status();
        if (i >= st["frames_captured"].get<std::size_t>()) {
          detail::json_reply(res, {{"error", "frame " + std::to_string(i) + " not captured"}}, 404);
          return;
        }
        detail::frame_reply(res, session_.frame(i), i, req.get_param_value("format") == "pgm");
      });
    });
    server_.Get("/status", [this](const httplib::Request&, httplib::Response& res) {
      detail::guarded(res, [&] { detail::json_reply(res, session_.status()); });
    });
  }

  DeviceSpec spec_;
  DeviceSession session_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

/// Client side of the device REST surface. Errors come back as the library
/// exception matching the HTTP status.
class DeviceClient {
 public:
  DeviceClient(const std::string& host, int port) : cli_(host, port) {
    cli_.set_connection_timeout(2, 0);
    cli_.set_read_timeout(60, 0);
    cli_.set_keep_alive(false);
  }

  bool health() {
    auto r = cli_.Get("/health");
    return r && r->status == 200;
  }
  nlohmann::json initialize(const SceneBinding& binding, const std::optional<DeviceSpec>& spec = std::nullopt) {
    nlohmann::json body{{"scene", binding.to_json()}};
    if (spec) body["device"] = nlohmann::json::parse(device_to_json(*spec).dump());
    return post("/initialize", body);
  }
  nlohmann::json set_params(const nlohmann::json& p) { return post("/params", p); }
  nlohmann::json capture(const CaptureRequest& req) { return post("/capture", req.to_json()); }
  nlohmann::json reset() { return post("/reset", nlohmann::json::object()); }
  nlohmann::json trigger(const TriggerInput& t) { return post("/trigger", t.to_json()); }
  nlohmann::json status() { return get_json("/status"); }

  std::optional<PreviewFrame> preview() {
    auto r = cli_.Get("/preview");
    if (!r) throw Error("device unreachable: " + httplib::to_string(r.error()));
    if (r->status == 204) return std::nullopt;
    check(*r);
    return PreviewFrame{std::stoull(r->get_header_value("X-Frame-Id")), frame_from(*r)};
  }

  Frame frame(std::size_t i) {
    auto r = cli_.Get("/frames/" + std::to_string(i));
    if (!r) throw Error("device unreachable: " + httplib::to_string(r.error()));
    check(*r);
    return frame_from(*r);
  }

 private:
  static Frame frame_from(const httplib::Response& r) {
    Frame f = decode_msf1(r.body);
    f.device = r.get_header_value("X-Device");
    f.dataset = r.get_header_value("X-Dataset");
    f.illumination_tag = r.get_header_value("X-Tag");
    f.sequence_index = std::stoll(r.get_header_value("X-Sequence-Index"));
    f.exposure_us = std::stoll(r.get_header_value("X-Exposure-Us"));
    f.timestamp_ms = std::stoll(r.get_header_value("X-Timestamp-Ms"));
    return f;
  }

  static void check(const httplib::Response& r) {
    if (r.status < 300) return;
    std::string msg = r.body, subject;
    try {
      const auto j = nlohmann::json::parse(r.body);
      msg = j.value("error", r.body);
      subject = j.value("subject", std::string{});
    } catch (const nlohmann::json::exception&) {
    }
    switch (r.status) {
      case 409: throw ConflictError(msg);
      case 422: throw ConfigError(ConfigError::Kind::dangling_reference, subject, msg);
      case 504: throw TimeoutError(msg);
      default: throw Error("HTTP " + std::to_string(r.status) + ": " + msg);
    }
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body) {
    auto r = cli_.Post(path, body.dump(), "application/json");
    if (!r) throw Error("device unreachable: " + httplib::to_string(r.error()));
    check(*r);
    return nlohmann::json::parse(r->body);
  }
  nlohmann::json get_json(const std::string& path) {
    auto r = cli_.Get(path);
    if (!r) throw Error("device unreachable: " + httplib::to_string(r.error()));
    check(*r);
    return nlohmann::json::parse(r->body);
  }

  httplib::Client cli_;
};

}  // namespace specrig
