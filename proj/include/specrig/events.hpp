#pragma once

// Messages emitted by the virtual controller board.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

namespace specrig {

struct FixedExposure {
  std::int64_t microseconds = 0;
  bool operator==(const FixedExposure&) const = default;
};

/// Multiplicative auto-exposure: each frame's exposure is rescaled by
/// target/measured until the mean lands inside target +- tolerance.
struct AutoExposure {
  double target_fraction = 0.5;
  double tolerance_fraction = 0.1;
  int max_frames = 20;
  std::int64_t initial_us = 5000;
  std::int64_t max_us = 40000;
  bool operator==(const AutoExposure&) const = default;
};

using Exposure = std::variant<FixedExposure, AutoExposure>;

/// Upper bound on how long one exposure can last, in microseconds.
inline std::int64_t max_exposure_us(const Exposure& e) {
  if (const auto* f = std::get_if<FixedExposure>(&e)) return f->microseconds;
  return std::get<AutoExposure>(e).max_us;
}

struct LedCommand {
  std::string group;
  int slot = 0;
  std::uint8_t current_level = 0;
  std::uint8_t pwm_level = 0;

  bool is_off() const noexcept { return current_level == 0 || pwm_level == 0; }
  bool operator==(const LedCommand&) const = default;
};

struct TriggerPulse {
  std::string device;
  std::string illumination_tag;
  // Per-pulse override of the device's configured exposure.
  std::optional<Exposure> exposure;
  bool operator==(const TriggerPulse&) const = default;
};

struct DacLevel {
  std::string group;
  int millivolts = 0;
  bool operator==(const DacLevel&) const = default;
};

struct ControllerEvent {
  std::int64_t t_ms = 0;
  std::variant<LedCommand, TriggerPulse, DacLevel> kind;

  bool operator==(const ControllerEvent&) const = default;

  // Delivery order among events sharing a timestamp: switch-offs first, then
  // switch-ons and DAC changes, then triggers, so a pulse sees the settled
  // illumination of its own millisecond.
  int rank() const noexcept {
    if (const auto* led = std::get_if<LedCommand>(&kind)) return led->is_off() ? 0 : 1;
    if (const auto* dac = std::get_if<DacLevel>(&kind)) return dac->millivolts == 0 ? 0 : 1;
    return 2;
  }
};

}  // namespace specrig
