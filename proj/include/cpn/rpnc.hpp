#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cpn/forecast.hpp"
#include "cpn/netmodel.hpp"
#include "cpn/optkernel.hpp"

namespace cpn::rpnc {

/// Arrival promise attached to a flight. `kappa` is the promised prediction
/// index relative to the step the promise was made; a packet promised kappa
/// at step t is visible at the receiver no later than step t + kappa - 1.
struct PromiseEntry {
  int flight_id = 0;
  int kappa = 0;
  int delta_k = 0;
  bool active = false;
  int promised_step = 0;  // absolute step by which the arrival is visible
  long payload = -1;
};

struct PromiseLedger {
  std::vector<PromiseEntry> entries;

  PromiseEntry* find(int flight_id);
  const PromiseEntry* find(int flight_id) const;
  void erase(int flight_id);
};

/// In-progress reliable transmission: link j was activated for this flight
/// and `remaining` more consecutive attempts are owed to reach the promised
/// reliability. The next optimization sees the residual as the link's
/// repetition count at step zero.
struct Commitment {
  int link = 0;
  int remaining = 0;
};

struct ConstraintBlock {
  Eigen::MatrixXd matrix;  // rows x (F * H * n_v)
  Eigen::VectorXd bound;

  int rows() const { return static_cast<int>(matrix.rows()); }
  static ConstraintBlock empty(int cols);
  void append(const ConstraintBlock& other);
};

/// One receding-horizon scheduling problem over the stacked per-flight
/// binary activation vector (flight-major, then step, then link).
struct RpncProblem {
  netmodel::NetworkTopology topology;
  int horizon = 0;
  std::vector<netmodel::PacketFlight> flights;
  std::vector<Eigen::VectorXd> cost_diag;  // queue weights per flight
  forecast::RepetitionProfile base_profile;
  std::vector<forecast::RepetitionProfile> flight_profiles;
  std::vector<std::vector<forecast::GammaMask>> gammas;  // [flight][kappa 0..H]
  std::vector<std::optional<int>> promise_window;        // kappa - delta_k
  bool relax_processability = false;

  int num_flights() const { return static_cast<int>(flights.size()); }
  int num_vars() const {
    return num_flights() * horizon * topology.num_links();
  }
  int var(int f, int k, int j) const {
    return (f * horizon + k) * topology.num_links() + j;
  }
};

/// Builds problem data (profiles with commitment overrides, masks, default
/// destination-zero queue costs) for the current flight set.
RpncProblem make_problem(const netmodel::NetworkTopology& topology,
                         const std::vector<netmodel::PacketFlight>& flights,
                         const forecast::RepetitionProfile& base_profile,
                         int horizon,
                         const std::map<int, Commitment>& commitments,
                         const PromiseLedger& ledger,
                         bool relax_processability);

/// Deterministic queue trajectory q_1..q_H for one flight under its masks.
std::vector<Eigen::VectorXi> predict_queues(
    const netmodel::PacketFlight& flight,
    const std::vector<forecast::GammaMask>& gammas,
    const netmodel::NetworkTopology& topology, const Eigen::VectorXi& v_traj);

ConstraintBlock assemble_constituency(const RpncProblem& p);
ConstraintBlock assemble_reliability(const RpncProblem& p);
/// Returns no block when the flight has no active promise.
std::optional<ConstraintBlock> assemble_consistency(const RpncProblem& p,
                                                    int flight_index);
ConstraintBlock assemble_processability(const RpncProblem& p,
                                        int flight_index);

struct RpncSolution {
  optkernel::SolveStatus status = optkernel::SolveStatus::Infeasible;
  Eigen::VectorXi v;  // stacked binary decision
  double objective = 0.0;
  std::vector<std::vector<Eigen::VectorXi>> trajectories;  // per flight q_1..q_H

  Eigen::VectorXi flight_block(const RpncProblem& p, int f, int k) const;
};

/// Globally optimal binary schedule (branch and bound, lexicographically
/// smallest among optimal vectors). The reported objective includes the
/// current queue cost so an immediately served one-hop flight costs its one
/// waiting step.
RpncSolution solve_rpnc(const RpncProblem& p);

/// Promised arrival index per flight under a solved schedule: the first
/// prediction step at which the destination queue is occupied (0 when the
/// flight already arrived), or none when the schedule never delivers it.
std::vector<std::optional<int>> extract_forecasts(const RpncProblem& p,
                                                  const RpncSolution& sol);

struct Request {
  int origin = 0;
  int dest = 0;
  long payload = -1;
};

struct LedgerEvent {
  int step = 0;
  int flight_id = 0;
  long payload = -1;
  std::string kind;  // promise | improved | repromise | fulfilled | deactivated | reset
};

struct PromiseInfo {
  int flight_id = 0;
  long payload = -1;
  int promised_step = 0;  // absolute visible-by step
  bool active = true;
};

struct PolicyStepResult {
  std::vector<std::pair<int, Eigen::VectorXi>> applied;  // flight_id, v0 block
  std::vector<netmodel::ArrivalRecord> arrivals;
  std::vector<long> arrival_payloads;
  std::vector<PromiseInfo> promises;
  std::vector<LedgerEvent> events;
  forecast::RepetitionProfile profile;  // base profile used this step
  int retries = 0;
};

struct SchedulerConfig {
  double phi = 0.9;
  int horizon = 5;
  bool relax_processability = false;
  Eigen::VectorXd cost_diag;  // optional global override (size n_q); empty = default
};

/// Centralized reliable predictive network controller: owns the network
/// ground truth, the promise ledger and transmission commitments, and runs
/// the five-step policy loop once per call.
class NetworkController {
 public:
  NetworkController(netmodel::NetworkTopology topology,
                    std::vector<netmodel::LinkStateChain> chains,
                    SchedulerConfig config);

  PolicyStepResult policy_step(const std::vector<Request>& requests, Rng& rng);

  /// Withdraws an undelivered request (its information has been overtaken);
  /// the flight, its promise and any transmission commitment are dropped.
  /// Returns false when no such flight is in the air.
  bool cancel_by_payload(long payload);

  /// Current entity holding the flight's packet, when still in the air.
  std::optional<int> location_by_payload(long payload) const;

  const netmodel::NetworkState& state() const { return state_; }
  const PromiseLedger& ledger() const { return ledger_; }
  const netmodel::NetworkTopology& topology() const { return topology_; }
  int time() const { return state_.time; }

 private:
  netmodel::NetworkTopology topology_;
  netmodel::NetworkState state_;
  SchedulerConfig config_;
  PromiseLedger ledger_;
  std::map<int, Commitment> commitments_;  // flight_id -> commitment
  std::map<int, long> payloads_;           // flight_id -> cosim handle
  int next_flight_id_ = 0;
};

}  // namespace cpn::rpnc
