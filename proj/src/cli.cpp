#include "cpn/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "cpn/forecast.hpp"
#include "cpn/trace_io.hpp"

namespace cpn::cli {

namespace {

int log_level() {
  const char* v = std::getenv("CPN_LOG");
  return v ? std::atoi(v) : 0;
}

void log_info(const std::string& msg) {
  if (log_level() > 0) std::cerr << "[cpnsim] " << msg << "\n";
}

cosim::ScenarioConfig apply_overrides(const RunManifest& manifest,
                                      cosim::ScenarioConfig cfg) {
  if (manifest.seed_override) cfg.seed = *manifest.seed_override;
  if (manifest.mode_override) cfg.mode = *manifest.mode_override;
  return cfg;
}

std::string out_path(const RunManifest& manifest, const std::string& file) {
  return (std::filesystem::path(manifest.out_dir) / file).string();
}

}  // namespace

CompareOutcome run_compare(const cosim::ScenarioConfig& base) {
  CompareOutcome out;
  cosim::ScenarioConfig wc = base;
  wc.mode = cosim::Mode::WorstCase;
  cosim::ScenarioConfig pred = base;
  pred.mode = cosim::Mode::Predicted;
  out.worst_case_trace = cosim::run(wc);
  out.predicted_trace = cosim::run(pred);
  out.worst_case = cosim::metrics(out.worst_case_trace, wc);
  out.predicted = cosim::metrics(out.predicted_trace, pred);
  out.fault = out.worst_case_trace.fault || out.predicted_trace.fault;
  if (out.worst_case.total > 0)
    out.improvement_percent = 100.0 *
                              (out.worst_case.total - out.predicted.total) /
                              out.worst_case.total;
  return out;
}

std::string forecast_report(const LoadedScenario& scenario) {
  const auto& cfg = scenario.config;
  const int H = cfg.horizon;

  // repetition profile: explicit sequences win, chains otherwise
  forecast::RepetitionProfile profile;
  profile.horizon = H;
  profile.reps.resize(H, cfg.topology.num_links());
  for (int j = 0; j < cfg.topology.num_links(); ++j) {
    if (!scenario.link_repetitions[j].empty()) {
      const auto& reps = scenario.link_repetitions[j];
      for (int k = 0; k < H; ++k)
        profile.reps(k, j) =
            reps[std::min<size_t>(k, reps.size() - 1)];
    } else {
      profile.reps.col(j) =
          forecast::compute_repetitions(cfg.chains[j], cfg.phi, 0, H);
    }
  }
  auto graph = forecast::build_delay_graph(cfg.topology, profile);

  std::vector<std::pair<int, int>> pairs = cfg.forecast_pairs;
  if (pairs.empty()) {
    for (const auto& sub : cfg.subsystems)
      for (int p : sub.predecessors)
        pairs.emplace_back(cfg.subsystems[p].node, sub.node);
  }
  std::ostringstream os;
  os << "delay forecast: " << cfg.name << " (phi=" << format_compact(cfg.phi)
     << ", horizon=" << H << ")\n";
  os << "link repetition sequences:\n";
  for (int j = 0; j < cfg.topology.num_links(); ++j) {
    const auto& l = cfg.topology.links[j];
    os << "  link " << j << " ";
    if (l.from_entity)
      os << scenario.entity_names[*l.from_entity];
    else
      os << "(inject)";
    os << " -> " << scenario.entity_names[l.to_entity] << ":";
    for (int k = 0; k < H; ++k) {
      os << ' ';
      if (forecast::is_unreachable(profile.reps(k, j)))
        os << "unreachable";
      else
        os << profile.reps(k, j);
    }
    os << "\n";
  }
  auto table = forecast::forecast_pairs(graph, pairs, 0, H);
  os << "reliable delays (injection step -> delay):\n";
  for (const auto& e : table.entries) {
    os << "  " << scenario.entity_names[e.sender] << " -> "
       << scenario.entity_names[e.receiver] << ":";
    for (int k = 0; k < H; ++k) {
      os << ' ';
      if (forecast::is_unreachable(e.tau[k]))
        os << "unreachable";
      else
        os << e.tau[k];
    }
    os << "\n";
  }
  return os.str();
}

int cmd_run(const RunManifest& manifest) {
  LoadedScenario scenario;
  try {
    scenario = load_scenario(manifest.config_path);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  auto cfg = apply_overrides(manifest, scenario.config);
  log_info("running " + cfg.name + " in " + cosim::to_string(cfg.mode) +
           " mode");
  auto trace = cosim::run(cfg);
  auto m = cosim::metrics(trace, cfg);
  write_text_atomic(out_path(manifest, "trace.csv"), trace_csv(trace, cfg));
  write_text_atomic(out_path(manifest, "summary.txt"),
                    summary_text(trace, m, cfg));
  if (trace.fault) {
    std::cerr << "simulation fault at step " << trace.fault_step << ": "
              << trace.fault_what << "\n";
    return 2;
  }
  std::cout << summary_text(trace, m, cfg);
  return 0;
}

int cmd_compare(const RunManifest& manifest) {
  LoadedScenario scenario;
  try {
    scenario = load_scenario(manifest.config_path);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  auto cfg = apply_overrides(manifest, scenario.config);
  log_info("comparing modes on " + cfg.name);
  auto outcome = run_compare(cfg);
  write_text_atomic(out_path(manifest, "trace_worstcase.csv"),
                    trace_csv(outcome.worst_case_trace, cfg));
  write_text_atomic(out_path(manifest, "trace_predicted.csv"),
                    trace_csv(outcome.predicted_trace, cfg));
  std::string table =
      compare_text(cfg, outcome.worst_case, outcome.predicted);
  write_text_atomic(out_path(manifest, "compare.txt"), table);
  if (outcome.fault) {
    const auto& t = outcome.worst_case_trace.fault ? outcome.worst_case_trace
                                                   : outcome.predicted_trace;
    std::cerr << "simulation fault at step " << t.fault_step << ": "
              << t.fault_what << "\n";
    return 2;
  }
  std::cout << table;
  return 0;
}

int cmd_forecast(const RunManifest& manifest) {
  LoadedScenario scenario;
  try {
    scenario = load_scenario(manifest.config_path);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  std::cout << forecast_report(scenario);
  return 0;
}

}  // namespace cpn::cli
