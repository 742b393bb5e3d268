#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "cpn/dmpc.hpp"
#include "cpn/netmodel.hpp"
#include "cpn/rpnc.hpp"

namespace cpn::cosim {

enum class Mode { Predicted, WorstCase };

const char* to_string(Mode m);

struct SubsystemConfig {
  std::string name;
  int node = 0;  // communication node hosting this controller
  dmpc::PlantModel plant;
  Eigen::VectorXd x0;
  std::vector<int> predecessors;                  // subsystem indices
  std::vector<dmpc::PredecessorSpec> pred_specs;  // aligned with predecessors
  dmpc::TrackingSpec tracking;
  dmpc::ControllerConfig controller;
};

/// Pins the visible age of messages sent inside a step window, both in the
/// delivery layer and in the forecasts the controllers see.
struct DelayOverride {
  int sender = 0;
  int receiver = 0;
  int sent_from = 0;
  int sent_to = 0;
  int age = 1;
};

struct ScenarioConfig {
  std::string name;
  std::uint64_t seed = 1;
  int duration = 0;
  Mode mode = Mode::Predicted;
  int horizon = 5;
  double phi = 0.9;
  netmodel::NetworkTopology topology;
  std::vector<netmodel::LinkStateChain> chains;
  bool relax_processability = false;
  std::vector<SubsystemConfig> subsystems;
  std::vector<DelayOverride> delay_overrides;
  std::vector<std::pair<int, int>> forecast_pairs;  // node pairs for reports

  dmpc::InfoGraph info_graph() const;
  void validate() const;
};

struct StepRecord {
  int step = 0;
  int subsystem = 0;
  Eigen::VectorXd state;
  Eigen::VectorXd input;
  Eigen::VectorXd state_ref;
  Eigen::VectorXd input_ref;
  Eigen::VectorXd stage1_first;
  std::vector<int> pred_ages;
  std::vector<int> pred_promises;  // promised visible step of the next arrival
  double stage1_objective = 0.0;
  double stage2_objective = 0.0;
};

struct MessageRecord {
  long id = -1;
  int sender = 0;
  int receiver = 0;
  int sent_step = 0;
  int network_arrival = -1;
  int visible_step = -1;
  int promised_step = -1;
  bool ledger_active = true;
};

struct LedgerEventRecord {
  int step = 0;
  long message = -1;
  std::string kind;
};

struct TraceLog {
  bool fault = false;
  int fault_step = -1;
  std::string fault_what;
  std::vector<StepRecord> records;
  std::vector<MessageRecord> messages;
  std::vector<LedgerEventRecord> events;
  /// Worst observed deviation of a realized input from the tube the sender
  /// had communicated (audited at every step against each receiver's newest
  /// message); stays at numerical noise when the contract holds.
  double max_containment_violation = 0.0;
  long containment_checks = 0;
};

struct MetricsReport {
  std::vector<double> per_subsystem;
  double total = 0.0;
};

/// Runs the coupled network/control simulation: scheduler first, forecasts
/// delivered instantly, controllers in information order, outgoing plans
/// become new packets, plants advance. Deterministic for a fixed seed.
TraceLog run(const ScenarioConfig& config);

/// Summed weighted quadratic deviation between the realized trajectories and
/// their references (predecessor trajectories for followers), using the
/// stage-one tracking weights.
MetricsReport metrics(const TraceLog& trace, const ScenarioConfig& config);

}  // namespace cpn::cosim
