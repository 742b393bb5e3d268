#include "cpn/optkernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <queue>
#include <vector>

#include "cpn/common.hpp"

namespace cpn::optkernel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double max_violation_of(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                        const Eigen::MatrixXd& E, const Eigen::VectorXd& d,
                        const Eigen::VectorXd& lo, const Eigen::VectorXd& up,
                        const Eigen::VectorXd& x) {
  double v = 0.0;
  if (A.rows() > 0) {
    Eigen::VectorXd r = A * x - b;
    for (int i = 0; i < r.size(); ++i) v = std::max(v, r(i));
  }
  if (E.rows() > 0) {
    Eigen::VectorXd r = E * x - d;
    for (int i = 0; i < r.size(); ++i) v = std::max(v, std::abs(r(i)));
  }
  for (int j = 0; j < x.size(); ++j) {
    if (std::isfinite(lo(j))) v = std::max(v, lo(j) - x(j));
    if (std::isfinite(up(j))) v = std::max(v, x(j) - up(j));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Bounded-variable two-phase tableau simplex.
// ---------------------------------------------------------------------------

enum class VarStatus { Basic, AtLower, AtUpper, Free, Fixed };

class Simplex {
 public:
  explicit Simplex(const LinearProgram& lp) : lp_(lp) {
    n_ = lp.num_vars();
    m1_ = static_cast<int>(lp.ineq_matrix.rows());
    m2_ = static_cast<int>(lp.eq_matrix.rows());
    m_ = m1_ + m2_;
    nc_ = n_ + m1_ + m_;  // structural + slack + artificial
  }

  SolveReport run() {
    SolveReport rep;
    build();
    if (!phase(/*phase_one=*/true)) {
      rep.status = SolveStatus::IterationLimit;
      return rep;
    }
    if (phase1_objective() > 1e-7) {
      rep.status = SolveStatus::Infeasible;
      rep.iterations = iters_;
      return rep;
    }
    freeze_artificials();
    bool ok = phase(/*phase_one=*/false);
    rep.iterations = iters_;
    if (!ok) {
      rep.status = SolveStatus::IterationLimit;
      rep.solution = current_x();
      return rep;
    }
    if (unbounded_) {
      rep.status = SolveStatus::Unbounded;
      return rep;
    }
    rep.status = SolveStatus::Optimal;
    rep.solution = current_x();
    rep.objective = lp_.objective.dot(rep.solution);
    rep.max_violation = max_violation_of(lp_.ineq_matrix, lp_.ineq_bound,
                                         lp_.eq_matrix, lp_.eq_bound, lp_.lower,
                                         lp_.upper, rep.solution);
    return rep;
  }

 private:
  void build() {
    tab_.setZero(m_, nc_);
    rhs_.setZero(m_);
    lo_.setConstant(nc_, -kInf);
    up_.setConstant(nc_, kInf);
    value_.setZero(nc_);
    status_.assign(nc_, VarStatus::AtLower);
    basis_.assign(m_, -1);

    for (int j = 0; j < n_; ++j) {
      lo_(j) = lp_.lower(j);
      up_(j) = lp_.upper(j);
      if (lo_(j) > up_(j) + 1e-12) contradictory_ = true;
      if (std::isfinite(lo_(j)) && std::isfinite(up_(j)) &&
          up_(j) - lo_(j) <= 1e-12) {
        status_[j] = VarStatus::Fixed;
        value_(j) = lo_(j);
      } else if (std::isfinite(lo_(j))) {
        status_[j] = VarStatus::AtLower;
        value_(j) = lo_(j);
      } else if (std::isfinite(up_(j))) {
        status_[j] = VarStatus::AtUpper;
        value_(j) = up_(j);
      } else {
        status_[j] = VarStatus::Free;
        value_(j) = 0.0;
      }
    }
    for (int i = 0; i < m1_; ++i) {
      lo_(n_ + i) = 0.0;  // slack
    }

    Eigen::MatrixXd rows(m_, n_);
    Eigen::VectorXd rhs(m_);
    for (int i = 0; i < m1_; ++i) {
      rows.row(i) = lp_.ineq_matrix.row(i);
      rhs(i) = lp_.ineq_bound(i);
    }
    for (int i = 0; i < m2_; ++i) {
      rows.row(m1_ + i) = lp_.eq_matrix.row(i);
      rhs(m1_ + i) = lp_.eq_bound(i);
    }

    // Residual with structural variables at their initial values decides the
    // artificial's sign so it starts nonnegative and basic.
    for (int r = 0; r < m_; ++r) {
      double res = rhs(r);
      for (int j = 0; j < n_; ++j) res -= rows(r, j) * value_(j);
      double sigma = (res >= 0.0) ? 1.0 : -1.0;
      for (int j = 0; j < n_; ++j) tab_(r, j) = sigma * rows(r, j);
      if (r < m1_) tab_(r, n_ + r) = sigma;
      int art = n_ + m1_ + r;
      tab_(r, art) = 1.0;
      lo_(art) = 0.0;
      rhs_(r) = sigma * rhs(r);
      basis_[r] = art;
      status_[art] = VarStatus::Basic;
      value_(art) = std::abs(res);
    }
  }

  double phase1_objective() const {
    double s = 0.0;
    for (int r = 0; r < m_; ++r) {
      int j = basis_[r];
      if (j >= n_ + m1_) s += value_(j);
    }
    return s;
  }

  void freeze_artificials() {
    for (int j = n_ + m1_; j < nc_; ++j) {
      up_(j) = 0.0;
      if (status_[j] != VarStatus::Basic) {
        status_[j] = VarStatus::Fixed;
        value_(j) = 0.0;
      } else {
        value_(j) = 0.0;  // basic at zero within tolerance
      }
    }
    recompute_basics();
  }

  Eigen::VectorXd cost_vector(bool phase_one) const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(nc_);
    if (phase_one) {
      for (int j = n_ + m1_; j < nc_; ++j) c(j) = 1.0;
    } else {
      c.head(n_) = lp_.objective;
    }
    return c;
  }

  void recompute_basics() {
    // x_B = B^-1 b - sum over nonbasic of (B^-1 A_j) x_j; tab_ already holds
    // B^-1 A and rhs_ holds B^-1 b.
    Eigen::VectorXd acc = rhs_;
    for (int j = 0; j < nc_; ++j) {
      if (status_[j] == VarStatus::Basic) continue;
      double v = value_(j);
      if (v != 0.0) acc -= tab_.col(j) * v;
    }
    for (int r = 0; r < m_; ++r) value_(basis_[r]) = acc(r);
  }

  bool phase(bool phase_one) {
    if (contradictory_ && phase_one) return true;  // will report via objective
    Eigen::VectorXd c = cost_vector(phase_one);
    int degenerate_streak = 0;
    const int max_iters = 2000 + 40 * (m_ + nc_);
    for (int it = 0; it < max_iters; ++it) {
      ++iters_;
      // reduced costs z = c - c_B' tab
      Eigen::VectorXd cb(m_);
      for (int r = 0; r < m_; ++r) cb(r) = c(basis_[r]);
      Eigen::VectorXd z = c - tab_.transpose() * cb;

      bool bland = degenerate_streak > 200;
      int enter = -1;
      double best = 0.0;
      int dir = 0;
      for (int j = 0; j < nc_; ++j) {
        if (status_[j] == VarStatus::Basic || status_[j] == VarStatus::Fixed)
          continue;
        double zj = z(j);
        int d = 0;
        if (status_[j] == VarStatus::AtLower && zj < -1e-9) d = 1;
        else if (status_[j] == VarStatus::AtUpper && zj > 1e-9) d = -1;
        else if (status_[j] == VarStatus::Free && std::abs(zj) > 1e-9)
          d = zj < 0 ? 1 : -1;
        if (d == 0) continue;
        if (bland) { enter = j; dir = d; break; }
        if (std::abs(zj) > best + 1e-15) {
          best = std::abs(zj);
          enter = j;
          dir = d;
        }
      }
      if (enter < 0) return true;  // optimal for this phase

      Eigen::VectorXd y = tab_.col(enter);
      // ratio test
      double t_max = kInf;
      int leave_row = -1;
      double leave_to = 0.0;  // bound the leaving variable hits
      // entering variable's own bound span
      if (std::isfinite(lo_(enter)) && std::isfinite(up_(enter)))
        t_max = up_(enter) - lo_(enter);
      for (int r = 0; r < m_; ++r) {
        double yr = dir * y(r);
        if (std::abs(yr) <= 1e-11) continue;
        int k = basis_[r];
        double t;
        double target;
        if (yr > 0) {  // basic value decreases
          if (!std::isfinite(lo_(k))) continue;
          t = (value_(k) - lo_(k)) / yr;
          target = lo_(k);
        } else {  // increases
          if (!std::isfinite(up_(k))) continue;
          t = (value_(k) - up_(k)) / yr;
          target = up_(k);
        }
        if (t < -1e-9) t = 0.0;
        if (t < t_max - 1e-12 ||
            (t < t_max + 1e-12 && leave_row >= 0 && basis_[r] < basis_[leave_row])) {
          t_max = std::max(t, 0.0);
          leave_row = r;
          leave_to = target;
        }
      }
      if (!std::isfinite(t_max)) {
        if (phase_one) return true;  // phase-1 objective is bounded below
        unbounded_ = true;
        return true;
      }
      degenerate_streak = (t_max < 1e-11) ? degenerate_streak + 1 : 0;

      // apply the step
      value_(enter) += dir * t_max;
      for (int r = 0; r < m_; ++r) value_(basis_[r]) -= dir * t_max * y(r);

      if (leave_row < 0) {
        // bound flip
        status_[enter] =
            (status_[enter] == VarStatus::AtLower) ? VarStatus::AtUpper
                                                   : VarStatus::AtLower;
        continue;
      }
      int leaving = basis_[leave_row];
      value_(leaving) = leave_to;
      status_[leaving] = (std::isfinite(lo_(leaving)) && leave_to <= lo_(leaving) + 1e-12)
                             ? VarStatus::AtLower
                             : VarStatus::AtUpper;
      if (std::isfinite(lo_(leaving)) && std::isfinite(up_(leaving)) &&
          up_(leaving) - lo_(leaving) <= 1e-12)
        status_[leaving] = VarStatus::Fixed;
      basis_[leave_row] = enter;
      status_[enter] = VarStatus::Basic;

      double piv = tab_(leave_row, enter);
      tab_.row(leave_row) /= piv;
      rhs_(leave_row) /= piv;
      for (int r = 0; r < m_; ++r) {
        if (r == leave_row) continue;
        double f = tab_(r, enter);
        if (f != 0.0) {
          tab_.row(r) -= f * tab_.row(leave_row);
          rhs_(r) -= f * rhs_(leave_row);
        }
      }
      if ((it & 127) == 127) recompute_basics();
    }
    return false;  // iteration limit
  }

  Eigen::VectorXd current_x() const { return value_.head(n_); }

  const LinearProgram& lp_;
  int n_ = 0, m1_ = 0, m2_ = 0, m_ = 0, nc_ = 0;
  Eigen::MatrixXd tab_;
  Eigen::VectorXd rhs_, lo_, up_, value_;
  std::vector<VarStatus> status_;
  std::vector<int> basis_;
  bool unbounded_ = false;
  bool contradictory_ = false;
  int iters_ = 0;
};

// ---------------------------------------------------------------------------
// Goldfarb-Idnani dual active-set QP.
// ---------------------------------------------------------------------------

// Solves min 0.5 x'G x + g0'x s.t. CE'x + ce0 = 0, CI'x + ci0 >= 0.
class GoldfarbIdnani {
 public:
  GoldfarbIdnani(const Eigen::MatrixXd& G, const Eigen::VectorXd& g0,
                 const Eigen::MatrixXd& CE, const Eigen::VectorXd& ce0,
                 const Eigen::MatrixXd& CI, const Eigen::VectorXd& ci0)
      : G_(G), g0_(g0), CE_(CE), ce0_(ce0), CI_(CI), ci0_(ci0) {}

  SolveStatus solve(Eigen::VectorXd& x, int& iterations) {
    const int n = static_cast<int>(g0_.size());
    const int p = static_cast<int>(ce0_.size());
    const int m = static_cast<int>(ci0_.size());

    Eigen::LLT<Eigen::MatrixXd> llt;
    Eigen::MatrixXd G = G_;
    double shift = 0.0;
    for (int attempt = 0;; ++attempt) {
      llt.compute(G);
      if (llt.info() == Eigen::Success) break;
      double scale = std::max(1.0, G_.diagonal().cwiseAbs().maxCoeff());
      shift = (shift == 0.0) ? 1e-12 * scale : shift * 100.0;
      if (attempt > 8) return SolveStatus::IterationLimit;
      G = G_ + shift * Eigen::MatrixXd::Identity(n, n);
    }

    // J = L^-T, unconstrained minimizer x = -G^-1 g0
    Eigen::MatrixXd J = Eigen::MatrixXd::Identity(n, n);
    llt.matrixL().transpose().solveInPlace<Eigen::OnTheLeft>(J);
    x = -llt.solve(g0_);

    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd r = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(n + 1);
    std::vector<int> active;  // indices: [0,p) equalities, p+i inequality i
    int q = 0;

    auto add_constraint = [&](const Eigen::VectorXd& np) -> bool {
      d = J.transpose() * np;
      // rotate d(q..n-1) onto d(q)
      for (int j = n - 1; j > q; --j) {
        double cc = d(j - 1), ss = d(j);
        double h = std::hypot(cc, ss);
        if (h < 1e-300) continue;
        double c1 = cc / h, s1 = ss / h;
        d(j - 1) = h;
        d(j) = 0.0;
        for (int i = 0; i < n; ++i) {
          double t1 = J(i, j - 1), t2 = J(i, j);
          J(i, j - 1) = c1 * t1 + s1 * t2;
          J(i, j) = -s1 * t1 + c1 * t2;
        }
      }
      if (std::abs(d(q)) < 1e-12 * (1.0 + np.norm())) return false;  // dependent
      R.col(q).head(q + 1) = d.head(q + 1);
      ++q;
      return true;
    };

    auto delete_constraint = [&](int l) {
      // l is a position within `active` among inequalities (>= p).
      // u(q) holds the incoming constraint's accumulator and shifts too.
      for (int i = l; i < q - 1; ++i) {
        active[i] = active[i + 1];
        R.col(i) = R.col(i + 1);
      }
      for (int i = l; i < q; ++i) u(i) = u(i + 1);
      --q;
      active.resize(q);
      R.col(q).setZero();
      // re-triangularize R columns l..q-1
      for (int j = l; j < q; ++j) {
        double cc = R(j, j), ss = R(j + 1, j);
        double h = std::hypot(cc, ss);
        if (h < 1e-300) continue;
        double c1 = cc / h, s1 = ss / h;
        for (int kcol = j; kcol < q; ++kcol) {
          double t1 = R(j, kcol), t2 = R(j + 1, kcol);
          R(j, kcol) = c1 * t1 + s1 * t2;
          R(j + 1, kcol) = -s1 * t1 + c1 * t2;
        }
        for (int i = 0; i < n; ++i) {
          double t1 = J(i, j), t2 = J(i, j + 1);
          J(i, j) = c1 * t1 + s1 * t2;
          J(i, j + 1) = -s1 * t1 + c1 * t2;
        }
      }
    };

    auto compute_zr = [&](const Eigen::VectorXd& np) {
      d = J.transpose() * np;
      z = J.rightCols(n - q) * d.tail(n - q);
      // r = R^-1 d (first q entries)
      r.head(q) = d.head(q);
      for (int i = q - 1; i >= 0; --i) {
        double s = r(i);
        for (int j = i + 1; j < q; ++j) s -= R(i, j) * r(j);
        r(i) = s / R(i, i);
      }
    };

    iterations = 0;
    // Equality constraints first; they are never dropped.
    for (int i = 0; i < p; ++i) {
      Eigen::VectorXd np = CE_.col(i);
      compute_zr(np);
      double resid = np.dot(x) + ce0_(i);
      double z2 = z.squaredNorm();
      if (z2 > 1e-24) {
        double t2 = -resid / z.dot(np);
        x += t2 * z;
        u.head(q) -= t2 * r.head(q);
        u(q) = t2;
      } else {
        if (std::abs(resid) > 1e-8 * (1.0 + std::abs(ce0_(i))))
          return SolveStatus::Infeasible;
        u(q) = 0.0;
      }
      active.push_back(i);
      if (!add_constraint(np)) {
        // dependent equality; consistent, drop silently
        active.pop_back();
      }
    }

    const int max_iter = 100 + 10 * (m + p);
    int ip = -1;
    Eigen::VectorXd np;
    double slack_ip = 0.0;
    bool need_new_violated = true;
    while (iterations++ < max_iter) {
      if (need_new_violated) {
        // most violated inequality not active
        ip = -1;
        double worst = -1e-8;
        for (int i = 0; i < m; ++i) {
          bool is_active = false;
          for (int a = 0; a < q; ++a)
            if (active[a] == p + i) { is_active = true; break; }
          if (is_active) continue;
          double s = CI_.col(i).dot(x) + ci0_(i);
          double scale = 1.0 + std::abs(ci0_(i));
          if (s / scale < worst) {
            worst = s / scale;
            ip = i;
          }
        }
        if (ip < 0) return SolveStatus::Optimal;
        np = CI_.col(ip);
        slack_ip = np.dot(x) + ci0_(ip);
        u(q) = 0.0;
      }
      compute_zr(np);

      // partial step length t1 (dual), over active inequalities with r > 0
      double t1 = kInf;
      int l_drop = -1;
      for (int a = 0; a < q; ++a) {
        if (active[a] < p) continue;  // equalities never drop
        if (r(a) > 1e-12) {
          double t = u(a) / r(a);
          if (t < t1 - 1e-15) {
            t1 = t;
            l_drop = a;
          }
        }
      }
      double z2 = z.squaredNorm();
      double t2 = kInf;
      if (z2 > 1e-22) t2 = -slack_ip / z.dot(np);
      double t = std::min(t1, t2);
      if (!std::isfinite(t)) return SolveStatus::Infeasible;

      if (!std::isfinite(t2)) {
        // dual step only
        u.head(q) -= t * r.head(q);
        u(q) += t;
        delete_constraint(l_drop);
        need_new_violated = false;
        continue;
      }
      x += t * z;
      u.head(q) -= t * r.head(q);
      u(q) += t;
      slack_ip = np.dot(x) + ci0_(ip);
      if (t == t2 || std::abs(slack_ip) < 1e-9 * (1.0 + std::abs(ci0_(ip)))) {
        active.push_back(p + ip);
        if (!add_constraint(np)) {
          active.pop_back();
          // dependent but satisfied now; move on
        }
        need_new_violated = true;
      } else {
        delete_constraint(l_drop);
        need_new_violated = false;
      }
    }
    return SolveStatus::IterationLimit;
  }

 private:
  const Eigen::MatrixXd& G_;
  const Eigen::VectorXd& g0_;
  const Eigen::MatrixXd& CE_;
  const Eigen::VectorXd& ce0_;
  const Eigen::MatrixXd& CI_;
  const Eigen::VectorXd& ci0_;
};

// Eliminates variables with lower == upper, returning index maps.
struct Reduction {
  std::vector<int> free_of_full;   // free index -> full index
  Eigen::VectorXd fixed_values;    // full-sized, NaN for free
  bool infeasible = false;
};

Reduction reduce_fixed(const Eigen::VectorXd& lo, const Eigen::VectorXd& up) {
  Reduction red;
  int n = static_cast<int>(lo.size());
  red.fixed_values.setConstant(n, std::numeric_limits<double>::quiet_NaN());
  for (int j = 0; j < n; ++j) {
    if (lo(j) > up(j) + 1e-12) red.infeasible = true;
    if (std::isfinite(lo(j)) && std::isfinite(up(j)) && up(j) - lo(j) <= 1e-12)
      red.fixed_values(j) = 0.5 * (lo(j) + up(j));
    else
      red.free_of_full.push_back(j);
  }
  return red;
}

}  // namespace

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::Unbounded: return "unbounded";
    case SolveStatus::IterationLimit: return "iteration-limit";
  }
  return "?";
}

LinearProgram LinearProgram::make(int n) {
  LinearProgram lp;
  lp.objective = Eigen::VectorXd::Zero(n);
  lp.ineq_matrix.resize(0, n);
  lp.ineq_bound.resize(0);
  lp.eq_matrix.resize(0, n);
  lp.eq_bound.resize(0);
  lp.lower = Eigen::VectorXd::Constant(n, -kInf);
  lp.upper = Eigen::VectorXd::Constant(n, kInf);
  return lp;
}

QuadraticProgram QuadraticProgram::make(int n) {
  QuadraticProgram qp;
  qp.hessian = Eigen::MatrixXd::Zero(n, n);
  qp.linear = Eigen::VectorXd::Zero(n);
  qp.ineq_matrix.resize(0, n);
  qp.ineq_bound.resize(0);
  qp.eq_matrix.resize(0, n);
  qp.eq_bound.resize(0);
  qp.lower = Eigen::VectorXd::Constant(n, -kInf);
  qp.upper = Eigen::VectorXd::Constant(n, kInf);
  return qp;
}

SolveReport solve_lp(const LinearProgram& lp) {
  if (lp.ineq_matrix.rows() != lp.ineq_bound.size() ||
      lp.eq_matrix.rows() != lp.eq_bound.size() ||
      lp.ineq_matrix.cols() != lp.num_vars() ||
      (lp.eq_matrix.rows() > 0 && lp.eq_matrix.cols() != lp.num_vars()) ||
      lp.lower.size() != lp.num_vars() || lp.upper.size() != lp.num_vars())
    throw Error("solve_lp: inconsistent dimensions");
  for (int j = 0; j < lp.num_vars(); ++j)
    if (lp.lower(j) > lp.upper(j) + 1e-12) {
      SolveReport rep;
      rep.status = SolveStatus::Infeasible;
      return rep;
    }
  Simplex s(lp);
  return s.run();
}

SolveReport solve_qp(const QuadraticProgram& qp) {
  const int n = qp.num_vars();
  if (qp.hessian.rows() != n || qp.hessian.cols() != n ||
      qp.ineq_matrix.rows() != qp.ineq_bound.size() ||
      qp.eq_matrix.rows() != qp.eq_bound.size())
    throw Error("solve_qp: inconsistent dimensions");

  SolveReport rep;
  Reduction red = reduce_fixed(qp.lower, qp.upper);
  if (red.infeasible) {
    rep.status = SolveStatus::Infeasible;
    return rep;
  }
  const int nf = static_cast<int>(red.free_of_full.size());
  Eigen::VectorXd xfix = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < n; ++j)
    if (!std::isnan(red.fixed_values(j))) xfix(j) = red.fixed_values(j);

  // reduced objective: 0.5 f'Qff f + (c_f + Qfx xfix)'f
  Eigen::MatrixXd Qff(nf, nf);
  Eigen::VectorXd cf(nf);
  for (int a = 0; a < nf; ++a) {
    int ja = red.free_of_full[a];
    cf(a) = qp.linear(ja) + qp.hessian.row(ja).dot(xfix);
    for (int b = 0; b < nf; ++b) Qff(a, b) = qp.hessian(ja, red.free_of_full[b]);
  }
  Qff = 0.5 * (Qff + Qff.transpose().eval());

  // collect inequality rows (Ax <= b plus finite bounds of free vars)
  std::vector<Eigen::VectorXd> ci_cols;
  std::vector<double> ci0;
  for (int i = 0; i < qp.ineq_matrix.rows(); ++i) {
    Eigen::VectorXd row(nf);
    double shiftb = qp.ineq_bound(i) - qp.ineq_matrix.row(i).dot(xfix);
    for (int a = 0; a < nf; ++a) row(a) = qp.ineq_matrix(i, red.free_of_full[a]);
    if (nf == 0 || row.cwiseAbs().maxCoeff() <= 1e-14) {
      if (shiftb < -1e-9) {
        rep.status = SolveStatus::Infeasible;
        return rep;
      }
      continue;
    }
    ci_cols.push_back(-row);  // CI'x + ci0 >= 0
    ci0.push_back(shiftb);
  }
  for (int a = 0; a < nf; ++a) {
    int j = red.free_of_full[a];
    if (std::isfinite(qp.lower(j))) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(nf);
      e(a) = 1.0;
      ci_cols.push_back(e);
      ci0.push_back(-qp.lower(j));
    }
    if (std::isfinite(qp.upper(j))) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(nf);
      e(a) = -1.0;
      ci_cols.push_back(e);
      ci0.push_back(qp.upper(j));
    }
  }
  std::vector<Eigen::VectorXd> ce_cols;
  std::vector<double> ce0;
  for (int i = 0; i < qp.eq_matrix.rows(); ++i) {
    Eigen::VectorXd row(nf);
    double shiftd = qp.eq_bound(i) - qp.eq_matrix.row(i).dot(xfix);
    for (int a = 0; a < nf; ++a) row(a) = qp.eq_matrix(i, red.free_of_full[a]);
    if (nf == 0 || row.cwiseAbs().maxCoeff() <= 1e-14) {
      if (std::abs(shiftd) > 1e-9) {
        rep.status = SolveStatus::Infeasible;
        return rep;
      }
      continue;
    }
    ce_cols.push_back(row);
    ce0.push_back(-shiftd);
  }

  Eigen::MatrixXd CI(nf, static_cast<int>(ci_cols.size()));
  Eigen::VectorXd CI0(static_cast<int>(ci_cols.size()));
  for (size_t i = 0; i < ci_cols.size(); ++i) {
    CI.col(static_cast<int>(i)) = ci_cols[i];
    CI0(static_cast<int>(i)) = ci0[i];
  }
  Eigen::MatrixXd CE(nf, static_cast<int>(ce_cols.size()));
  Eigen::VectorXd CE0(static_cast<int>(ce_cols.size()));
  for (size_t i = 0; i < ce_cols.size(); ++i) {
    CE.col(static_cast<int>(i)) = ce_cols[i];
    CE0(static_cast<int>(i)) = ce0[i];
  }

  Eigen::VectorXd xf;
  int iters = 0;
  SolveStatus st = SolveStatus::Optimal;
  if (nf > 0) {
    GoldfarbIdnani gi(Qff, cf, CE, CE0, CI, CI0);
    st = gi.solve(xf, iters);
  } else {
    xf.resize(0);
    for (size_t i = 0; i < ci0.size(); ++i)
      if (ci0[i] < -1e-9) st = SolveStatus::Infeasible;
    for (size_t i = 0; i < ce0.size(); ++i)
      if (std::abs(ce0[i]) > 1e-9) st = SolveStatus::Infeasible;
  }
  rep.status = st;
  rep.iterations = iters;
  if (st != SolveStatus::Optimal) return rep;

  Eigen::VectorXd x = xfix;
  for (int a = 0; a < nf; ++a) x(red.free_of_full[a]) = xf(a);
  rep.solution = x;
  rep.objective = 0.5 * x.dot(qp.hessian * x) + qp.linear.dot(x);
  rep.max_violation = max_violation_of(qp.ineq_matrix, qp.ineq_bound,
                                       qp.eq_matrix, qp.eq_bound, qp.lower,
                                       qp.upper, x);
  return rep;
}

// ---------------------------------------------------------------------------
// Branch and bound.
// ---------------------------------------------------------------------------

namespace {

struct BnbNode {
  double bound;
  long id;
  std::vector<std::pair<int, double>> fixes;
};

struct BnbNodeCmp {
  bool operator()(const BnbNode& a, const BnbNode& b) const {
    if (a.bound != b.bound) return a.bound > b.bound;
    return a.id > b.id;
  }
};

LinearProgram with_fixes(const LinearProgram& lp,
                         const std::vector<std::pair<int, double>>& fixes) {
  LinearProgram out = lp;
  for (auto& [j, v] : fixes) {
    out.lower(j) = v;
    out.upper(j) = v;
  }
  return out;
}

// Depth-first search for any integral point of `lp` (objective ignored).
// Returns true and fills `out` on success.
bool feasibility_dfs(const LinearProgram& lp, const std::vector<int>& bins,
                     std::vector<std::pair<int, double>> fixes,
                     Eigen::VectorXd& out, int depth_budget = 1 << 16) {
  LinearProgram probe = with_fixes(lp, fixes);
  probe.objective.setZero();
  SolveReport rel = solve_lp(probe);
  if (rel.status == SolveStatus::Infeasible) return false;
  if (rel.status != SolveStatus::Optimal) return false;
  int frac = -1;
  double worst = kIntTol * 10;
  for (int j : bins) {
    bool fixed = false;
    for (auto& [fj, fv] : fixes)
      if (fj == j) { fixed = true; break; }
    if (fixed) continue;
    double f = std::abs(rel.solution(j) - std::round(rel.solution(j)));
    if (f > worst) {
      worst = f;
      frac = j;
    }
  }
  if (frac < 0) {
    // snap binaries and certify with all of them fixed
    std::vector<std::pair<int, double>> all = fixes;
    for (int j : bins) {
      bool fixed = false;
      for (auto& [fj, fv] : fixes)
        if (fj == j) { fixed = true; break; }
      if (!fixed) all.emplace_back(j, std::round(rel.solution(j)));
    }
    LinearProgram leaf = with_fixes(lp, all);
    leaf.objective.setZero();
    SolveReport lr = solve_lp(leaf);
    if (lr.status == SolveStatus::Optimal) {
      out = lr.solution;
      return true;
    }
    return false;
  }
  if (depth_budget <= 0) return false;
  for (double v : {0.0, 1.0}) {
    auto child = fixes;
    child.emplace_back(frac, v);
    if (feasibility_dfs(lp, bins, std::move(child), out, depth_budget - 1))
      return true;
  }
  return false;
}

}  // namespace

SolveReport branch_and_bound(const LinearProgram& lp,
                             const std::vector<int>& binary_indices) {
  SolveReport rep;
  const int n = lp.num_vars();
  for (int j : binary_indices)
    if (j < 0 || j >= n) throw Error("branch_and_bound: index out of range");

  LinearProgram root = lp;
  for (int j : binary_indices) {
    root.lower(j) = std::max(root.lower(j), 0.0);
    root.upper(j) = std::min(root.upper(j), 1.0);
  }

  bool have_incumbent = false;
  double inc_obj = kInf;
  Eigen::VectorXd inc_x;

  auto try_candidate = [&](const Eigen::VectorXd& x, double obj) {
    if (!have_incumbent || obj < inc_obj - 1e-9) {
      have_incumbent = true;
      inc_obj = obj;
      inc_x = x;
    } else if (obj < inc_obj + 1e-9) {
      for (int j : binary_indices) {
        double a = std::round(inc_x(j)), b = std::round(x(j));
        if (a != b) {
          if (b < a) {
            inc_x = x;
            inc_obj = std::min(inc_obj, obj);
          }
          break;
        }
      }
    }
  };

  // initial dive: round the root relaxation
  SolveReport rootrel = solve_lp(root);
  if (rootrel.status == SolveStatus::Infeasible) {
    rep.status = SolveStatus::Infeasible;
    return rep;
  }
  if (rootrel.status == SolveStatus::Unbounded) {
    // may still be bounded once binaries are fixed; fall through to search
  } else if (rootrel.status == SolveStatus::Optimal) {
    std::vector<std::pair<int, double>> dive;
    for (int j : binary_indices)
      dive.emplace_back(j, std::round(rootrel.solution(j)));
    SolveReport dr = solve_lp(with_fixes(root, dive));
    if (dr.status == SolveStatus::Optimal) try_candidate(dr.solution, dr.objective);
  }

  std::priority_queue<BnbNode, std::vector<BnbNode>, BnbNodeCmp> open;
  long next_id = 0;
  open.push({rootrel.status == SolveStatus::Optimal ? rootrel.objective : -kInf,
             next_id++,
             {}});
  long expanded = 0;
  const long node_limit = 2000000;
  while (!open.empty()) {
    BnbNode node = open.top();
    open.pop();
    if (have_incumbent && node.bound > inc_obj - 1e-9) break;  // best-bound
    if (++expanded > node_limit) {
      rep.status = SolveStatus::IterationLimit;
      return rep;
    }
    SolveReport rel = solve_lp(with_fixes(root, node.fixes));
    if (rel.status == SolveStatus::Infeasible) continue;
    bool unbounded_node = rel.status == SolveStatus::Unbounded;
    if (rel.status == SolveStatus::IterationLimit) {
      rep.status = SolveStatus::IterationLimit;
      return rep;
    }
    if (!unbounded_node && have_incumbent && rel.objective > inc_obj - 1e-9)
      continue;
    int frac = -1;
    double worst = kIntTol * 10;
    if (!unbounded_node) {
      for (int j : binary_indices) {
        bool fixed = false;
        for (auto& [fj, fv] : node.fixes)
          if (fj == j) { fixed = true; break; }
        if (fixed) continue;
        double f = std::abs(rel.solution(j) - std::round(rel.solution(j)));
        if (f > worst) {
          worst = f;
          frac = j;
        }
      }
    } else {
      for (int j : binary_indices) {
        bool fixed = false;
        for (auto& [fj, fv] : node.fixes)
          if (fj == j) { fixed = true; break; }
        if (!fixed) { frac = j; break; }
      }
      if (frac < 0) {
        rep.status = SolveStatus::Unbounded;  // all binaries fixed, still unbounded
        return rep;
      }
    }
    if (frac < 0) {
      // integral: certify by fixing all binaries to rounded values
      std::vector<std::pair<int, double>> all = node.fixes;
      for (int j : binary_indices) {
        bool fixed = false;
        for (auto& [fj, fv] : node.fixes)
          if (fj == j) { fixed = true; break; }
        if (!fixed) all.emplace_back(j, std::round(rel.solution(j)));
      }
      SolveReport leaf = solve_lp(with_fixes(root, all));
      if (leaf.status == SolveStatus::Optimal)
        try_candidate(leaf.solution, leaf.objective);
      continue;
    }
    for (double v : {0.0, 1.0}) {
      BnbNode child;
      child.fixes = node.fixes;
      child.fixes.emplace_back(frac, v);
      child.bound = unbounded_node ? -kInf : rel.objective;
      child.id = next_id++;
      open.push(std::move(child));
    }
  }

  if (!have_incumbent) {
    rep.status = SolveStatus::Infeasible;
    return rep;
  }

  // Lexicographic polish: walk the binaries in index order and push each to 0
  // when some optimal completion allows it. The incumbent acts as a witness,
  // so only entries currently at 1 cost a feasibility search.
  LinearProgram capped = root;
  int rows = static_cast<int>(capped.ineq_matrix.rows());
  capped.ineq_matrix.conservativeResize(rows + 1, n);
  capped.ineq_matrix.row(rows) = lp.objective.transpose();
  capped.ineq_bound.conservativeResize(rows + 1);
  capped.ineq_bound(rows) = inc_obj + 1e-6;

  Eigen::VectorXd witness = inc_x;
  std::vector<std::pair<int, double>> fixes;
  for (int j : binary_indices) {
    if (std::round(witness(j)) == 0.0) {
      fixes.emplace_back(j, 0.0);
      continue;
    }
    auto probe = fixes;
    probe.emplace_back(j, 0.0);
    Eigen::VectorXd found;
    if (feasibility_dfs(capped, binary_indices, probe, found)) {
      fixes.emplace_back(j, 0.0);
      witness = found;
    } else {
      fixes.emplace_back(j, 1.0);
    }
  }
  LinearProgram final_lp = with_fixes(root, fixes);
  SolveReport fin = solve_lp(final_lp);
  if (fin.status == SolveStatus::Optimal && fin.objective <= inc_obj + 1e-6) {
    rep.status = SolveStatus::Optimal;
    rep.solution = fin.solution;
    for (int j : binary_indices) rep.solution(j) = std::round(rep.solution(j));
    rep.objective = fin.objective;
    rep.max_violation = fin.max_violation;
    rep.iterations = static_cast<int>(expanded);
    return rep;
  }
  // fall back to the incumbent from phase A
  rep.status = SolveStatus::Optimal;
  rep.solution = inc_x;
  for (int j : binary_indices) rep.solution(j) = std::round(rep.solution(j));
  rep.objective = inc_obj;
  rep.iterations = static_cast<int>(expanded);
  return rep;
}

void dump_program(std::ostream& os, const LinearProgram& lp) {
  os << "lp vars " << lp.num_vars() << "\n";
  os << "min";
  for (int j = 0; j < lp.num_vars(); ++j) os << ' ' << lp.objective(j);
  os << "\n";
  for (int i = 0; i < lp.ineq_matrix.rows(); ++i) {
    os << "le";
    for (int j = 0; j < lp.num_vars(); ++j) os << ' ' << lp.ineq_matrix(i, j);
    os << " | " << lp.ineq_bound(i) << "\n";
  }
  for (int i = 0; i < lp.eq_matrix.rows(); ++i) {
    os << "eq";
    for (int j = 0; j < lp.num_vars(); ++j) os << ' ' << lp.eq_matrix(i, j);
    os << " | " << lp.eq_bound(i) << "\n";
  }
  os << "lb";
  for (int j = 0; j < lp.num_vars(); ++j) os << ' ' << lp.lower(j);
  os << "\nub";
  for (int j = 0; j < lp.num_vars(); ++j) os << ' ' << lp.upper(j);
  os << "\n";
}

void dump_program(std::ostream& os, const QuadraticProgram& qp) {
  os << "qp vars " << qp.num_vars() << "\n";
  for (int i = 0; i < qp.num_vars(); ++i) {
    os << "q";
    for (int j = 0; j < qp.num_vars(); ++j) os << ' ' << qp.hessian(i, j);
    os << "\n";
  }
  os << "min";
  for (int j = 0; j < qp.num_vars(); ++j) os << ' ' << qp.linear(j);
  os << "\n";
  for (int i = 0; i < qp.ineq_matrix.rows(); ++i) {
    os << "le";
    for (int j = 0; j < qp.num_vars(); ++j) os << ' ' << qp.ineq_matrix(i, j);
    os << " | " << qp.ineq_bound(i) << "\n";
  }
  for (int i = 0; i < qp.eq_matrix.rows(); ++i) {
    os << "eq";
    for (int j = 0; j < qp.num_vars(); ++j) os << ' ' << qp.eq_matrix(i, j);
    os << " | " << qp.eq_bound(i) << "\n";
  }
  os << "lb";
  for (int j = 0; j < qp.num_vars(); ++j) os << ' ' << qp.lower(j);
  os << "\nub";
  for (int j = 0; j < qp.num_vars(); ++j) os << ' ' << qp.upper(j);
  os << "\n";
}

}  // namespace cpn::optkernel
