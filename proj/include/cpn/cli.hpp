#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "cpn/cosim.hpp"
#include "cpn/scenario.hpp"

namespace cpn::cli {

struct RunManifest {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed_override;
  std::optional<cosim::Mode> mode_override;
};

struct CompareOutcome {
  cosim::TraceLog worst_case_trace;
  cosim::TraceLog predicted_trace;
  cosim::MetricsReport worst_case;
  cosim::MetricsReport predicted;
  double improvement_percent = 0.0;
  bool fault = false;
};

/// Runs both modes of a scenario on the same seed.
CompareOutcome run_compare(const cosim::ScenarioConfig& base);

/// Renders the delay-forecast table of a loaded scenario (no plants run).
std::string forecast_report(const LoadedScenario& scenario);

/// Exit codes: 0 success, 1 configuration error, 2 simulation fault.
int cmd_run(const RunManifest& manifest);
int cmd_compare(const RunManifest& manifest);
int cmd_forecast(const RunManifest& manifest);

}  // namespace cpn::cli
