#pragma once

#include <string>
#include <vector>

#include "cpn/cosim.hpp"

namespace cpn::cli {

/// Scenario file contents plus naming/lookup tables the reports need.
struct LoadedScenario {
  cosim::ScenarioConfig config;
  std::vector<std::string> entity_names;  // communication nodes by index
  /// Optional explicit per-link repetition sequences for forecast reports
  /// (empty vector = derive from the link's chain).
  std::vector<std::vector<int>> link_repetitions;
};

/// Parses the versioned JSON scenario format documented in the README.
/// Throws cpn::Error with a message naming the offending field.
LoadedScenario parse_scenario(const std::string& text);

/// Reads and parses a scenario file.
LoadedScenario load_scenario(const std::string& path);

}  // namespace cpn::cli
