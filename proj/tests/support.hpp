#pragma once

#include <filesystem>
#include <string>

#include "specrig/sync_config.hpp"

namespace specrig::test {

inline std::filesystem::path fixture_path(const std::string& name) {
  return std::filesystem::path(SPECRIG_FIXTURE_DIR) / (name + ".json");
}

inline CaptureConfig fixture(const std::string& name) { return load_config(fixture_path(name)); }

}  // namespace specrig::test
