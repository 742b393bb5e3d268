#pragma once

#include <Eigen/Dense>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "cpn/common.hpp"
#include "cpn/optkernel.hpp"

namespace cpn::dmpc {

/// Discrete-time LTI subsystem with a box input constraint and an optional
/// polytope on its own state.
struct PlantModel {
  Eigen::MatrixXd A, B;
  Eigen::VectorXd input_lower, input_upper;
  Eigen::MatrixXd state_matrix;  // may have zero rows
  Eigen::VectorXd state_bound;

  int nx() const { return static_cast<int>(A.rows()); }
  int nu() const { return static_cast<int>(B.cols()); }
  void validate() const;
};

/// Acyclic information structure between subsystems.
struct InfoGraph {
  int count = 0;
  std::vector<std::vector<int>> predecessors;
  std::vector<std::vector<int>> followers;

  void validate() const;
  std::vector<int> topological_order() const;
};

/// What subsystem i couples to for one predecessor j: j's dynamics, the
/// difference box on (x_i - x_j) and the worst-case communication delay.
struct PredecessorSpec {
  PlantModel model;
  Eigen::VectorXd offset;      // difference target, size nx of the pred
  Eigen::VectorXd diff_lower;  // empty = unconstrained
  Eigen::VectorXd diff_upper;
  int tau_bar = 1;
};

/// Delay bookkeeping for one (receiver, sender) pair at solve time.
struct DelayInfo {
  int age = 0;                          // d: age of the newest information
  std::vector<int> predicted_ages;      // d~ over the horizon
  Eigen::VectorXd assumed_inputs;       // sender plan aligned to now, H*nu_p
  Eigen::VectorXd incoming_halfwidth;   // per delta column r in [1-d, H-1]
};

/// Augmented own-plus-predecessors prediction model stacked over the
/// horizon. B2 carries the uncertainty columns for deviation indices
/// r = 1-d .. H-1 per predecessor (past unobserved deviations included).
struct AugmentedModel {
  int horizon = 0;
  int nx = 0;  // augmented state dimension
  int nu = 0;  // own input dimension
  std::vector<int> pred_nx, pred_nu, pred_age;
  std::vector<int> pred_state_offset;  // row offset of each pred block
  std::vector<int> delta_offset;       // first delta column per pred
  int n_delta = 0;

  Eigen::MatrixXd A_aug, B_own;
  std::vector<Eigen::MatrixXd> B_pred;
  Eigen::MatrixXd A_stack;   // (H+1)nx x nx
  Eigen::MatrixXd B_stack;   // (H+1)nx x H nu
  Eigen::MatrixXd B1_stack;  // (H+1)nx x sum_p H nu_p
  Eigen::MatrixXd B2_stack;  // (H+1)nx x n_delta

  Eigen::MatrixXd Cx;  // per-step augmented state rows
  Eigen::VectorXd bx;
  Eigen::MatrixXd Cu;  // per-step own input rows
  Eigen::VectorXd bu;

  int delta_col(int p, int r) const;  // r in [1 - pred_age[p], H-1]
};

AugmentedModel build_models(const PlantModel& own,
                            const std::vector<PredecessorSpec>& preds,
                            const std::vector<int>& ages, int H);

/// Admissible indices of the disturbance-feedback gain: block (l, r) may be
/// nonzero iff 1 - d_k <= r <= l - d~(l). Columns are the delta columns of
/// the model (all predecessors concatenated).
struct SupportPattern {
  int rows = 0;  // H (input steps)
  int cols = 0;  // n_delta
  std::vector<std::uint8_t> allowed;  // rows x cols

  bool at(int l, int c) const { return allowed[l * cols + c] != 0; }
  int count() const;
};

/// Single-predecessor support per the delay-shifted window.
SupportPattern feedback_support(const std::vector<int>& d_traj, int H,
                                int nu_delta);
/// General form over all predecessors of a model.
SupportPattern feedback_support(const AugmentedModel& model,
                                const std::vector<DelayInfo>& delays);

/// Axis-aligned per-step uncertainty box; shape() and bound() render the
/// stacked [I; -I] description used by the slack certificate.
struct UncertaintyBox {
  Eigen::VectorXd halfwidth;  // per delta column

  Eigen::MatrixXd shape() const;
  Eigen::VectorXd bound() const;
};

/// Constraint data of the admissible input-sequence set: the three
/// conditions are  Z >= 0,  Z C_delta = F2 K + F4,  and
/// F2 v + Z b_delta <= F5 - F1 x0 - F3 u_pred.
struct AdmissibleSet {
  Eigen::MatrixXd F1, F2, F3, F4;
  Eigen::VectorXd F5;
  UncertaintyBox box;

  int rows() const { return static_cast<int>(F5.size()); }
  /// Right-hand side for a given estimate and assumed predecessor plan.
  Eigen::VectorXd residual(const Eigen::VectorXd& x0,
                           const Eigen::VectorXd& pred_traj) const;
};

AdmissibleSet build_admissible_set(const AugmentedModel& model,
                                   const UncertaintyBox& box);

/// Disturbance-feedback policy with its nonnegative slack certificate and
/// the outgoing per-step deviation halfwidths b_Delta.
struct FeedbackPolicy {
  Eigen::VectorXd nominal;             // H*nu
  Eigen::MatrixXd gain;                // H*nu x n_delta (zeros off support)
  Eigen::MatrixXd slack;               // F2-rows x 2 n_delta
  Eigen::VectorXd outgoing_halfwidth;  // H*nu
  double objective = 0.0;
};

struct PeerMessage {
  int sender = 0;
  int step = 0;
  Eigen::VectorXd state;
  Eigen::VectorXd plan;             // H*nu
  Eigen::VectorXd deviation_bound;  // H*nu
};

/// Reconstructs the state of a sender whose newest known state is `d` steps
/// old, from that state and its inputs over the gap (oldest first). Throws
/// when fewer than d inputs are supplied.
Eigen::VectorXd estimate_state(const PlantModel& model,
                               const Eigen::VectorXd& last_known,
                               const Eigen::VectorXd& inputs, int d);

/// Per-step quadratic tracking terms: x'Qx x + lx'x per step plus input
/// terms; built by the controller from its tracking specification.
struct StageCost {
  std::vector<Eigen::MatrixXd> Qx;  // H+1 matrices (terminal included)
  std::vector<Eigen::VectorXd> lx;
  std::vector<Eigen::MatrixXd> Qu;  // H matrices
  std::vector<Eigen::VectorXd> lu;
};

struct StageTwoCost {
  double balance_weight = 1.0;
  double tighten_weight = 1.0;
  double tail_balance_weight = 1.0;
  int f1_upper = 0;                 // balance range is l = 1 .. f1_upper
  int tau_out = 0;                  // tighten range is l = 0 .. tau_out
  Eigen::VectorXd target;           // per (l, m): balance target halfwidth
};

struct StageContext {
  const AugmentedModel* model = nullptr;
  Eigen::VectorXd x0;
  std::vector<DelayInfo> delays;
  SupportPattern support;
  UncertaintyBox box;
  Eigen::VectorXd contain_lower, contain_upper;  // bounds on the nominal plan
  double eps_reg = 1e-8;
  /// > 0 turns the robust state rows into soft constraints with this
  /// quadratic violation penalty; input rows and tubes stay hard.
  double soft_state_weight = 0.0;
};

struct StageResult {
  optkernel::SolveStatus status = optkernel::SolveStatus::Infeasible;
  FeedbackPolicy policy;
  double max_state_slack = 0.0;
};

/// First stage: minimizes the nominal tracking cost over (v, K, Z) inside
/// the admissible set, evaluating the cost with zero deviations.
StageResult solve_stage1(const StageContext& ctx, const StageCost& cost);

/// Second stage: keeps the nominal plan fixed and reshapes the feedback gain
/// and certificate to balance incoming versus outgoing uncertainty and
/// tighten the outgoing set over the transmission window. The applied input
/// is untouched.
StageResult solve_stage2(const StageContext& ctx,
                         const FeedbackPolicy& stage1,
                         const StageTwoCost& cost);

/// Piecewise-constant reference with per-segment announcement times; a
/// segment is invisible to the controller before its announcement step.
struct ReferenceSignal {
  struct Segment {
    int from = 0;
    Eigen::VectorXd value;
    int announce = 0;
  };
  std::vector<Segment> segments;

  bool empty() const { return segments.empty(); }
  Eigen::VectorXd at(int t, int dim) const;
  Eigen::VectorXd visible(int t, int now, int dim) const;
};

struct TrackingSpec {
  ReferenceSignal input_ref;
  ReferenceSignal state_ref;
  bool state_ref_from_input = false;  // integrate input_ref through the plant
  Eigen::VectorXd x_ref0;             // initial reference state
  Eigen::VectorXd qx_self, qt_self, qu_self;      // diagonals, may be empty
  double qu_match = 0.0;                          // weight on u - u_pred
  std::vector<Eigen::VectorXd> qx_diff, qt_diff;  // per predecessor
};

struct ControllerConfig {
  int horizon = 5;
  double flexibility = 1.0;
  double balance_weight = 1.0;
  double tighten_weight = 1.0;
  double tail_balance_weight = 1.0;
  double eps_reg = 1e-8;
  double soft_state_weight = 0.0;
};

/// One subsystem's delay-aware robust controller. Keeps the plans it has
/// communicated so that re-optimizations stay inside the deviation sets it
/// previously announced.
class SubsystemController {
 public:
  SubsystemController(int id, PlantModel own,
                      std::vector<PredecessorSpec> preds, TrackingSpec tracking,
                      ControllerConfig config, bool has_followers);

  struct PredecessorInput {
    PeerMessage newest;
    int age = 0;
    std::vector<int> predicted_ages;
  };

  struct StepResult {
    bool ok = true;
    std::string fault;
    Eigen::VectorXd input;
    PeerMessage message;
    Eigen::VectorXd stage1_first;
    double stage1_objective = 0.0;
    double stage2_objective = 0.0;
    FeedbackPolicy policy;
    Eigen::VectorXd estimate;  // augmented state estimate used
  };

  /// `run_stage_two` = false reproduces the constant-delay reference method:
  /// the gain is not reshaped and the communicated deviation bound is the
  /// constant flexibility allowance instead of the tightened certificate.
  StepResult step(int now, const Eigen::VectorXd& own_state,
                  const std::vector<PredecessorInput>& preds, int tau_out,
                  bool run_stage_two = true);

  /// Reference state trajectory actually targeted (announcement-free).
  Eigen::VectorXd reference_state(int t) const;
  Eigen::VectorXd reference_input(int t) const;

  int id() const { return id_; }
  int horizon() const { return config_.horizon; }
  const PlantModel& plant() const { return own_; }
  const std::vector<PredecessorSpec>& predecessors() const { return preds_; }

 private:
  struct SentRecord {
    int step;
    Eigen::VectorXd plan;
    Eigen::VectorXd bound;
  };

  StageCost build_cost(int now, const std::vector<DelayInfo>& delays) const;

  int id_;
  PlantModel own_;
  std::vector<PredecessorSpec> preds_;
  TrackingSpec tracking_;
  ControllerConfig config_;
  bool has_followers_;
  std::deque<SentRecord> sent_;
  mutable std::vector<Eigen::VectorXd> ref_state_cache_;
};

}  // namespace cpn::dmpc
