#pragma once

// Virtual controller board: replays a compiled schedule as LED, trigger and
// DAC events, and folds LED/DAC state at any instant.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "specrig/error.hpp"
#include "specrig/events.hpp"
#include "specrig/sensor_sim.hpp"
#include "specrig/sync_config.hpp"

namespace specrig {

enum class ClockMode { as_fast_as_possible, real_time };

/// Simulated time. In real-time mode advancing sleeps until the wall clock
/// catches up; otherwise time jumps.
class RigClock {
 public:
  explicit RigClock(ClockMode mode = ClockMode::as_fast_as_possible)
      : mode_(mode), origin_(std::chrono::steady_clock::now()) {}

  std::int64_t now_ms() const noexcept { return now_ms_; }
  ClockMode mode() const noexcept { return mode_; }

  void advance_to(std::int64_t t_ms) {
    if (t_ms <= now_ms_) return;
    if (mode_ == ClockMode::real_time) std::this_thread::sleep_until(origin_ + std::chrono::milliseconds(t_ms));
    now_ms_ = t_ms;
  }

 private:
  ClockMode mode_;
  std::chrono::steady_clock::time_point origin_;
  std::int64_t now_ms_ = 0;
};

struct EventLog {
  std::vector<ControllerEvent> events;

  std::string to_ndjson() const {
    std::string out;
    for (const auto& e : events) {
      out += event_to_json(e).dump();
      out += '\n';
    }
    return out;
  }

  static EventLog from_ndjson(const std::string& text) {
    EventLog log;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) log.events.push_back(event_from_json(nlohmann::json::parse(line)));
    return log;
  }
};

/// The sink threw; `last_delivered_ms` is -1 when nothing was delivered.
class CaptureLoopError : public Error {
 public:
  CaptureLoopError(std::int64_t last_delivered_ms, const std::string& what)
      : Error("capture loop aborted after t=" + std::to_string(last_delivered_ms) + " ms: " + what),
        last_delivered_ms_(last_delivered_ms) {}
  std::int64_t last_delivered_ms() const noexcept { return last_delivered_ms_; }

 private:
  std::int64_t last_delivered_ms_;
};

using EventSink = std::function<void(const ControllerEvent&)>;

/// Delivers every scheduled event exactly once, in time order.
inline EventLog run_capture_loop(const Schedule& schedule, const EventSink& sink, RigClock& clock) {
  EventLog log;
  log.events.reserve(schedule.events.size());
  std::int64_t last = -1;
  for (const auto& e : schedule.events) {
    clock.advance_to(e.t_ms);
    try {
      sink(e);
    } catch (const std::exception& ex) {
      throw CaptureLoopError(last, ex.what());
    }
    log.events.push_back(e);
    last = e.t_ms;
  }
  clock.advance_to(schedule.total_duration_ms);
  return log;
}

// ---------------------------------------------------------------------------
// State folding

struct SlotLevel {
  std::uint8_t current = 0;
  std::uint8_t pwm = 0;
  bool on() const noexcept { return current > 0 && pwm > 0; }
  bool operator==(const SlotLevel&) const = default;
};

struct RigState {
  std::map<std::string, std::vector<SlotLevel>> leds;
  std::map<std::string, int> dac_mv;

  void apply(const ControllerEvent& e) {
    if (const auto* c = std::get_if<LedCommand>(&e.kind)) {
      auto& slots = leds[c->group];
      if (static_cast<int>(slots.size()) <= c->slot) slots.resize(static_cast<std::size_t>(c->slot) + 1);
      slots[static_cast<std::size_t>(c->slot)] = {c->current_level, c->pwm_level};
    } else if (const auto* d = std::get_if<DacLevel>(&e.kind)) {
      dac_mv[d->group] = d->millivolts;
    }
  }

  int active_slots(const std::string& group) const {
    auto it = leds.find(group);
    if (it == leds.end()) return 0;
    int n = 0;
    for (const auto& s : it->second) n += s.on() ? 1 : 0;
    return n;
  }
};

/// All groups of `cfg` (if given) with every slot off.
inline RigState initial_state(const CaptureConfig* cfg = nullptr) {
  RigState st;
  if (cfg)
    for (const auto& g : cfg->illumination_groups) {
      if (g.kind == IlluminationKind::laser) {
        st.dac_mv[g.id] = 0;
      } else {
        st.leds[g.id].assign(static_cast<std::size_t>(g.slots), SlotLevel{});
      }
    }
  return st;
}

/// Fold of every event with t <= t_ms.
inline RigState led_state_at(const EventLog& log, std::int64_t t_ms, const CaptureConfig* cfg = nullptr) {
  RigState st = initial_state(cfg);
  for (const auto& e : log.events) {
    if (e.t_ms > t_ms) break;
    st.apply(e);
  }
  return st;
}

/// One light source at a given power, as carried with a trigger pulse.
struct Emitter {
  double nm = 0.0;
  double power = 0.0;
  bool back = false;
  bool laser = false;
  bool operator==(const Emitter&) const = default;
};

/// Active sources of a rig state, one entry per (group, wavelength).
inline std::vector<Emitter> emitters_from_state(const RigState& st, const CaptureConfig& cfg) {
  const auto& lib = SpectralLibrary::instance();
  std::vector<Emitter> out;
  for (const auto& g : cfg.illumination_groups) {
    if (g.kind == IlluminationKind::laser) {
      auto it = st.dac_mv.find(g.id);
      if (it == st.dac_mv.end() || it->second <= 0) continue;
      out.push_back({g.wavelength_nm[0], lib.laser_power_at_max() * it->second / g.max_dac_mv, g.back_side, true});
      continue;
    }
    auto it = st.leds.find(g.id);
    if (it == st.leds.end()) continue;
    std::map<double, double> by_nm;
    for (std::size_t s = 0; s < it->second.size() && s < g.wavelength_nm.size(); ++s) {
      const auto& lvl = it->second[s];
      if (!lvl.on() || g.wavelength_nm[s] <= 0.0) continue;
      by_nm[g.wavelength_nm[s]] += lib.led_slot_power() * (lvl.current / 255.0) * (lvl.pwm / 255.0);
    }
    for (const auto& [nm, p] : by_nm) out.push_back({nm, p, g.back_side, false});
  }
  return out;
}

inline Illumination illumination_from_emitters(const std::vector<Emitter>& emitters) {
  const double fwhm = SpectralLibrary::instance().led_fwhm_nm();
  Illumination il;
  for (const auto& e : emitters) {
    if (e.laser) {
      il.laser_nm = e.nm;
      il.laser_power += e.power;
    } else {
      add_led(e.back ? il.back : il.front, e.nm, e.power, fwhm);
    }
  }
  return il;
}

inline nlohmann::json emitters_to_json(const std::vector<Emitter>& emitters) {
  auto j = nlohmann::json::array();
  for (const auto& e : emitters) j.push_back({{"nm", e.nm}, {"power", e.power}, {"back", e.back}, {"laser", e.laser}});
  return j;
}

inline std::vector<Emitter> emitters_from_json(const nlohmann::json& j) {
  std::vector<Emitter> out;
  for (const auto& e : j)
    out.push_back({e.at("nm").get<double>(), e.at("power").get<double>(), e.value("back", false),
                   e.value("laser", false)});
  return out;
}

}  // namespace specrig
