#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <vector>

namespace cpn::optkernel {

/// Feasibility / optimality tolerance shared by all solvers.
inline constexpr double kFeasTol = 1e-6;
/// Integrality rounding tolerance for branch and bound.
inline constexpr double kIntTol = 1e-8;

enum class SolveStatus { Optimal, Infeasible, Unbounded, IterationLimit };

const char* to_string(SolveStatus s);

/// min c'x  s.t.  A x <= b,  E x = d,  lower <= x <= upper.
/// Infinite bounds are expressed with +-infinity entries.
struct LinearProgram {
  Eigen::VectorXd objective;
  Eigen::MatrixXd ineq_matrix;
  Eigen::VectorXd ineq_bound;
  Eigen::MatrixXd eq_matrix;
  Eigen::VectorXd eq_bound;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  int num_vars() const { return static_cast<int>(objective.size()); }
  /// Sizes the constraint blocks to n variables and zero rows, bounds to
  /// (-inf, inf).
  static LinearProgram make(int n);
};

/// min 0.5 x'Q x + c'x with the same constraint structure as LinearProgram.
/// Q must be symmetric positive semidefinite.
struct QuadraticProgram {
  Eigen::MatrixXd hessian;
  Eigen::VectorXd linear;
  Eigen::MatrixXd ineq_matrix;
  Eigen::VectorXd ineq_bound;
  Eigen::MatrixXd eq_matrix;
  Eigen::VectorXd eq_bound;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  int num_vars() const { return static_cast<int>(linear.size()); }
  static QuadraticProgram make(int n);
};

struct SolveReport {
  SolveStatus status = SolveStatus::Infeasible;
  Eigen::VectorXd solution;
  double objective = 0.0;
  /// Largest constraint violation at the reported solution (scaled).
  double max_violation = 0.0;
  int iterations = 0;

  bool ok() const { return status == SolveStatus::Optimal; }
};

/// Dense two-phase bounded-variable simplex. Deterministic for fixed input.
SolveReport solve_lp(const LinearProgram& lp);

/// Dense dual active-set method (Goldfarb-Idnani). Requires a PSD Hessian;
/// a tiny diagonal shift is applied internally when the factorization needs
/// it. Deterministic for fixed input.
SolveReport solve_qp(const QuadraticProgram& qp);

/// Global optimum of the LP restricted to {0,1} on the given indices.
/// Best-bound node selection, branching on the most fractional variable
/// (ties to the lowest index). Among equally optimal assignments the
/// lexicographically smallest binary vector is returned.
SolveReport branch_and_bound(const LinearProgram& lp,
                             const std::vector<int>& binary_indices);

/// Plain-text dump of a program in the standard form documented in the
/// README (one line per row; for cross-checking against external tools).
void dump_program(std::ostream& os, const LinearProgram& lp);
void dump_program(std::ostream& os, const QuadraticProgram& qp);

}  // namespace cpn::optkernel
