#include "cpn/trace_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cpn/common.hpp"

namespace cpn::cli {

void write_text_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, target);
}

namespace {

struct Dims {
  int nx = 0, nu = 0, preds = 0;
};

Dims max_dims(const cosim::ScenarioConfig& config) {
  Dims d;
  for (const auto& s : config.subsystems) {
    d.nx = std::max(d.nx, s.plant.nx());
    d.nu = std::max(d.nu, s.plant.nu());
    d.preds = std::max(d.preds, static_cast<int>(s.predecessors.size()));
  }
  return d;
}

}  // namespace

std::string trace_csv(const cosim::TraceLog& trace,
                      const cosim::ScenarioConfig& config) {
  Dims dims = max_dims(config);
  std::ostringstream os;
  os << "step,subsystem,name";
  for (int i = 0; i < dims.nx; ++i) os << ",x" << i;
  for (int i = 0; i < dims.nu; ++i) os << ",u" << i;
  for (int i = 0; i < dims.nx; ++i) os << ",xref" << i;
  for (int i = 0; i < dims.nu; ++i) os << ",uref" << i;
  for (int i = 0; i < dims.nu; ++i) os << ",u_stage1_" << i;
  for (int p = 0; p < dims.preds; ++p) os << ",age_p" << p << ",promise_p" << p;
  os << ",j1,j2\n";
  auto put = [&](const Eigen::VectorXd& v, int want) {
    for (int i = 0; i < want; ++i) {
      os << ',';
      if (i < v.size()) os << format_double(v(i));
    }
  };
  for (const auto& r : trace.records) {
    os << r.step << ',' << r.subsystem << ','
       << config.subsystems[r.subsystem].name;
    put(r.state, dims.nx);
    put(r.input, dims.nu);
    put(r.state_ref, dims.nx);
    put(r.input_ref, dims.nu);
    put(r.stage1_first, dims.nu);
    for (int p = 0; p < dims.preds; ++p) {
      os << ',';
      if (p < static_cast<int>(r.pred_ages.size())) os << r.pred_ages[p];
      os << ',';
      if (p < static_cast<int>(r.pred_promises.size())) os << r.pred_promises[p];
    }
    os << ',' << format_double(r.stage1_objective) << ','
       << format_double(r.stage2_objective) << "\n";
  }
  return os.str();
}

std::vector<cosim::StepRecord> parse_trace_csv(
    const std::string& text, const cosim::ScenarioConfig& config) {
  Dims dims = max_dims(config);
  std::vector<cosim::StepRecord> out;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    cells.resize(3 + 2 * dims.nx + 3 * dims.nu + 2 * dims.preds + 2);
    cosim::StepRecord r;
    size_t c = 0;
    r.step = std::stoi(cells[c++]);
    r.subsystem = std::stoi(cells[c++]);
    ++c;  // name
    const auto& sub = config.subsystems[r.subsystem];
    auto grab = [&](int have, int want) {
      Eigen::VectorXd v(have);
      for (int i = 0; i < want; ++i) {
        if (i < have) v(i) = std::stod(cells[c]);
        ++c;
      }
      return v;
    };
    r.state = grab(sub.plant.nx(), dims.nx);
    r.input = grab(sub.plant.nu(), dims.nu);
    r.state_ref = grab(sub.plant.nx(), dims.nx);
    r.input_ref = grab(sub.plant.nu(), dims.nu);
    r.stage1_first = grab(sub.plant.nu(), dims.nu);
    for (int p = 0; p < dims.preds; ++p) {
      std::string age = cells[c++];
      std::string promise = cells[c++];
      if (p < static_cast<int>(sub.predecessors.size())) {
        r.pred_ages.push_back(std::stoi(age));
        r.pred_promises.push_back(std::stoi(promise));
      }
    }
    r.stage1_objective = std::stod(cells[c++]);
    r.stage2_objective = std::stod(cells[c++]);
    out.push_back(std::move(r));
  }
  return out;
}

std::string summary_text(const cosim::TraceLog& trace,
                         const cosim::MetricsReport& metrics,
                         const cosim::ScenarioConfig& config) {
  std::ostringstream os;
  os << "scenario: " << config.name << "\n";
  os << "mode: " << cosim::to_string(config.mode) << "\n";
  os << "seed: " << config.seed << "\n";
  os << "duration: " << config.duration << "\n";
  os << "status: " << (trace.fault ? "fault" : "ok") << "\n";
  if (trace.fault) {
    os << "fault_step: " << trace.fault_step << "\n";
    os << "fault: " << trace.fault_what << "\n";
  }
  for (size_t i = 0; i < metrics.per_subsystem.size(); ++i)
    os << "metric[" << config.subsystems[i].name
       << "]: " << format_compact(metrics.per_subsystem[i]) << "\n";
  os << "metric_total: " << format_compact(metrics.total) << "\n";

  long sent = static_cast<long>(trace.messages.size());
  long delivered = 0, honored = 0, promised = 0;
  for (const auto& m : trace.messages) {
    if (m.visible_step >= 0) ++delivered;
    if (m.promised_step >= 0 && m.ledger_active && m.network_arrival >= 0) {
      ++promised;
      if (m.network_arrival <= m.promised_step) ++honored;
    }
  }
  os << "messages_sent: " << sent << "\n";
  os << "messages_delivered: " << delivered << "\n";
  os << "promises_honored: " << honored << "/" << promised << "\n";
  os << "containment_checks: " << trace.containment_checks << "\n";
  os << "containment_violation: "
     << format_compact(trace.max_containment_violation) << "\n";
  return os.str();
}

std::string compare_text(const cosim::ScenarioConfig& config,
                         const cosim::MetricsReport& worst_case,
                         const cosim::MetricsReport& predicted) {
  std::ostringstream os;
  os << "performance measure (" << config.name << ")\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-14s", "method");
  os << buf;
  for (const auto& s : config.subsystems) {
    std::snprintf(buf, sizeof(buf), "%12s", s.name.c_str());
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%12s", "total");
  os << buf << "\n";
  auto row = [&](const char* label, const cosim::MetricsReport& m) {
    std::snprintf(buf, sizeof(buf), "%-14s", label);
    os << buf;
    for (double v : m.per_subsystem) {
      std::snprintf(buf, sizeof(buf), "%12.2f", v);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%12.2f", m.total);
    os << buf << "\n";
  };
  row("worst case", worst_case);
  row("predicted", predicted);
  double improvement =
      worst_case.total > 0
          ? 100.0 * (worst_case.total - predicted.total) / worst_case.total
          : 0.0;
  std::snprintf(buf, sizeof(buf), "improvement: %.1f%%\n", improvement);
  os << buf;
  return os.str();
}

}  // namespace cpn::cli
