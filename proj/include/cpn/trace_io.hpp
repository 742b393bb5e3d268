#pragma once

#include <string>
#include <vector>

#include "cpn/cosim.hpp"

namespace cpn::cli {

/// Writes content to path atomically (temp file + rename).
void write_text_atomic(const std::string& path, const std::string& content);

/// One row per (step, subsystem): step, id, state, input, references, the
/// stage-one first block, per-predecessor ages and promises, stage costs.
/// Numbers carry full precision so parsing reproduces the trace exactly.
std::string trace_csv(const cosim::TraceLog& trace,
                      const cosim::ScenarioConfig& config);

std::vector<cosim::StepRecord> parse_trace_csv(
    const std::string& text, const cosim::ScenarioConfig& config);

std::string summary_text(const cosim::TraceLog& trace,
                         const cosim::MetricsReport& metrics,
                         const cosim::ScenarioConfig& config);

std::string compare_text(const cosim::ScenarioConfig& config,
                         const cosim::MetricsReport& worst_case,
                         const cosim::MetricsReport& predicted);

}  // namespace cpn::cli
