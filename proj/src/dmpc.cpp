#include "cpn/dmpc.hpp"

#include <algorithm>
#include <cmath>

namespace cpn::dmpc {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::MatrixXd matrix_power(const Eigen::MatrixXd& A, int p) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(A.rows(), A.cols());
  for (int i = 0; i < p; ++i) out = A * out;
  return out;
}
}  // namespace

void PlantModel::validate() const {
  if (A.rows() != A.cols()) throw Error("plant: A must be square");
  if (B.rows() != A.rows()) throw Error("plant: B row count mismatch");
  if (input_lower.size() != nu() || input_upper.size() != nu())
    throw Error("plant: input bound dimension mismatch");
  for (int m = 0; m < nu(); ++m)
    if (input_lower(m) > input_upper(m))
      throw Error("plant: empty input interval");
  if (state_matrix.rows() != state_bound.size())
    throw Error("plant: state polytope shape mismatch");
  if (state_matrix.rows() > 0) {
    if (state_matrix.cols() != nx())
      throw Error("plant: state polytope dimension mismatch");
    optkernel::LinearProgram lp = optkernel::LinearProgram::make(nx());
    lp.ineq_matrix = state_matrix;
    lp.ineq_bound = state_bound;
    auto rep = optkernel::solve_lp(lp);
    if (rep.status == optkernel::SolveStatus::Infeasible)
      throw Error("plant: empty state polytope");
  }
}

void InfoGraph::validate() const {
  if (static_cast<int>(predecessors.size()) != count ||
      static_cast<int>(followers.size()) != count)
    throw Error("info graph: size mismatch");
  for (int i = 0; i < count; ++i) {
    for (int j : predecessors[i]) {
      if (j < 0 || j >= count) throw Error("info graph: bad index");
      if (std::find(followers[j].begin(), followers[j].end(), i) ==
          followers[j].end())
        throw Error("info graph: predecessor/follower sets inconsistent");
    }
    for (int j : followers[i]) {
      if (std::find(predecessors[j].begin(), predecessors[j].end(), i) ==
          predecessors[j].end())
        throw Error("info graph: predecessor/follower sets inconsistent");
    }
  }
  topological_order();  // throws on cycles
}

std::vector<int> InfoGraph::topological_order() const {
  std::vector<int> indeg(count, 0);
  for (int i = 0; i < count; ++i)
    indeg[i] = static_cast<int>(predecessors[i].size());
  std::vector<int> order;
  std::vector<int> ready;
  for (int i = 0; i < count; ++i)
    if (indeg[i] == 0) ready.push_back(i);
  while (!ready.empty()) {
    std::sort(ready.begin(), ready.end());
    int u = ready.front();
    ready.erase(ready.begin());
    order.push_back(u);
    for (int v : followers[u])
      if (--indeg[v] == 0) ready.push_back(v);
  }
  if (static_cast<int>(order.size()) != count)
    throw Error("info graph: cycle detected");
  return order;
}

int AugmentedModel::delta_col(int p, int r) const {
  int low = 1 - pred_age[p];
  if (r < low || r > horizon - 1) throw Error("delta_col: index out of window");
  return delta_offset[p] + (r - low) * pred_nu[p];
}

AugmentedModel build_models(const PlantModel& own,
                            const std::vector<PredecessorSpec>& preds,
                            const std::vector<int>& ages, int H) {
  if (ages.size() != preds.size())
    throw Error("build_models: one age per predecessor required");
  AugmentedModel m;
  m.horizon = H;
  m.nu = own.nu();
  int nx = own.nx();
  for (const auto& p : preds) nx += p.model.nx();
  m.nx = nx;

  m.A_aug = Eigen::MatrixXd::Zero(nx, nx);
  m.A_aug.topLeftCorner(own.nx(), own.nx()) = own.A;
  m.B_own = Eigen::MatrixXd::Zero(nx, own.nu());
  m.B_own.topRows(own.nx()) = own.B;
  int off = own.nx();
  for (size_t p = 0; p < preds.size(); ++p) {
    const auto& pm = preds[p].model;
    m.pred_nx.push_back(pm.nx());
    m.pred_nu.push_back(pm.nu());
    m.pred_age.push_back(ages[p]);
    m.pred_state_offset.push_back(off);
    m.A_aug.block(off, off, pm.nx(), pm.nx()) = pm.A;
    Eigen::MatrixXd Bp = Eigen::MatrixXd::Zero(nx, pm.nu());
    Bp.block(off, 0, pm.nx(), pm.nu()) = pm.B;
    m.B_pred.push_back(Bp);
    off += pm.nx();
  }

  // horizon stacks; past deviation columns reach powers up to H + d - 2
  const int rows = (H + 1) * nx;
  int max_age = 0;
  for (int a : ages) max_age = std::max(max_age, a);
  m.A_stack.resize(rows, nx);
  std::vector<Eigen::MatrixXd> powers(H + max_age + 1);
  for (int l = 0; l <= H + max_age; ++l) {
    powers[l] = matrix_power(m.A_aug, l);
    if (l <= H) m.A_stack.middleRows(l * nx, nx) = powers[l];
  }
  m.B_stack = Eigen::MatrixXd::Zero(rows, H * m.nu);
  for (int l = 0; l <= H; ++l)
    for (int k = 0; k < H; ++k)
      if (l - 1 - k >= 0)
        m.B_stack.block(l * nx, k * m.nu, nx, m.nu) =
            powers[l - 1 - k] * m.B_own;

  int pred_cols = 0;
  for (size_t p = 0; p < preds.size(); ++p) pred_cols += H * m.pred_nu[p];
  m.B1_stack = Eigen::MatrixXd::Zero(rows, pred_cols);
  int col = 0;
  for (size_t p = 0; p < preds.size(); ++p) {
    for (int k = 0; k < H; ++k) {
      for (int l = 0; l <= H; ++l)
        if (l - 1 - k >= 0)
          m.B1_stack.block(l * nx, col, nx, m.pred_nu[p]) =
              powers[l - 1 - k] * m.B_pred[p];
      col += m.pred_nu[p];
    }
  }

  m.n_delta = 0;
  for (size_t p = 0; p < preds.size(); ++p) {
    m.delta_offset.push_back(m.n_delta);
    m.n_delta += (H - 1 + ages[p]) * m.pred_nu[p];
  }
  m.B2_stack = Eigen::MatrixXd::Zero(rows, m.n_delta);
  for (size_t p = 0; p < preds.size(); ++p) {
    int low = 1 - ages[p];
    int c = m.delta_offset[p];
    for (int r = low; r <= H - 1; ++r) {
      for (int l = 0; l <= H; ++l)
        if (l - 1 - r >= 0)
          m.B2_stack.block(l * nx, c, nx, m.pred_nu[p]) =
              powers[l - 1 - r] * m.B_pred[p];
      c += m.pred_nu[p];
    }
  }

  // per-step constraint rows on the augmented state: own polytope plus the
  // difference boxes to each predecessor
  std::vector<Eigen::RowVectorXd> cx_rows;
  std::vector<double> cx_bounds;
  for (int r = 0; r < own.state_matrix.rows(); ++r) {
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(nx);
    row.head(own.nx()) = own.state_matrix.row(r);
    cx_rows.push_back(row);
    cx_bounds.push_back(own.state_bound(r));
  }
  for (size_t p = 0; p < preds.size(); ++p) {
    const auto& spec = preds[p];
    if (spec.diff_lower.size() == 0) continue;
    if (spec.model.nx() != own.nx())
      throw Error("build_models: difference box needs equal state dimensions");
    int poff = m.pred_state_offset[p];
    for (int d = 0; d < own.nx(); ++d) {
      double offv = spec.offset.size() > 0 ? spec.offset(d) : 0.0;
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(nx);
      row(d) = 1.0;
      row(poff + d) = -1.0;
      cx_rows.push_back(row);
      cx_bounds.push_back(spec.diff_upper(d) + offv);
      cx_rows.push_back(-row);
      cx_bounds.push_back(-(spec.diff_lower(d) + offv));
    }
  }
  m.Cx.resize(static_cast<int>(cx_rows.size()), nx);
  m.bx.resize(static_cast<int>(cx_rows.size()));
  for (size_t i = 0; i < cx_rows.size(); ++i) {
    m.Cx.row(static_cast<int>(i)) = cx_rows[i];
    m.bx(static_cast<int>(i)) = cx_bounds[i];
  }

  m.Cu.resize(2 * m.nu, m.nu);
  m.bu.resize(2 * m.nu);
  m.Cu.topRows(m.nu) = Eigen::MatrixXd::Identity(m.nu, m.nu);
  m.Cu.bottomRows(m.nu) = -Eigen::MatrixXd::Identity(m.nu, m.nu);
  m.bu.head(m.nu) = own.input_upper;
  m.bu.tail(m.nu) = -own.input_lower;
  return m;
}

int SupportPattern::count() const {
  int c = 0;
  for (auto v : allowed) c += v != 0;
  return c;
}

SupportPattern feedback_support(const std::vector<int>& d_traj, int H,
                                int nu_delta) {
  if (static_cast<int>(d_traj.size()) < H)
    throw Error("feedback_support: age trajectory shorter than the horizon");
  SupportPattern s;
  s.rows = H;
  const int d0 = d_traj[0];
  s.cols = (H - 1 + d0) * nu_delta;
  s.allowed.assign(static_cast<size_t>(s.rows) * s.cols, 0);
  for (int l = 0; l < H; ++l) {
    int upper = l - d_traj[l];
    for (int r = 1 - d0; r <= upper && r <= H - 1; ++r) {
      if (r < 1 - d0) continue;
      int base = (r - (1 - d0)) * nu_delta;
      for (int m = 0; m < nu_delta; ++m)
        s.allowed[l * s.cols + base + m] = 1;
    }
  }
  return s;
}

SupportPattern feedback_support(const AugmentedModel& model,
                                const std::vector<DelayInfo>& delays) {
  SupportPattern s;
  s.rows = model.horizon;
  s.cols = model.n_delta;
  s.allowed.assign(static_cast<size_t>(s.rows) * std::max(s.cols, 1), 0);
  if (s.cols == 0) return s;
  for (size_t p = 0; p < delays.size(); ++p) {
    auto single = feedback_support(delays[p].predicted_ages, model.horizon,
                                   model.pred_nu[p]);
    for (int l = 0; l < s.rows; ++l)
      for (int c = 0; c < single.cols; ++c)
        if (single.at(l, c))
          s.allowed[l * s.cols + model.delta_offset[p] + c] = 1;
  }
  return s;
}

Eigen::MatrixXd UncertaintyBox::shape() const {
  const int n = static_cast<int>(halfwidth.size());
  Eigen::MatrixXd C(2 * n, n);
  C.topRows(n) = Eigen::MatrixXd::Identity(n, n);
  C.bottomRows(n) = -Eigen::MatrixXd::Identity(n, n);
  return C;
}

Eigen::VectorXd UncertaintyBox::bound() const {
  const int n = static_cast<int>(halfwidth.size());
  Eigen::VectorXd b(2 * n);
  b.head(n) = halfwidth;
  b.tail(n) = halfwidth;
  return b;
}

Eigen::VectorXd AdmissibleSet::residual(const Eigen::VectorXd& x0,
                                        const Eigen::VectorXd& pred_traj) const {
  Eigen::VectorXd rhs = F5 - F1 * x0;
  if (pred_traj.size() > 0) rhs -= F3 * pred_traj;
  return rhs;
}

AdmissibleSet build_admissible_set(const AugmentedModel& model,
                                   const UncertaintyBox& box) {
  const int H = model.horizon;
  const int nx = model.nx;
  const int ncx = static_cast<int>(model.Cx.rows());
  const int ncu = static_cast<int>(model.Cu.rows());
  const int xrows = (H + 1) * ncx;
  const int urows = H * ncu;

  AdmissibleSet s;
  s.box = box;
  s.F1.setZero(xrows + urows, nx);
  s.F2.setZero(xrows + urows, H * model.nu);
  s.F3.setZero(xrows + urows, model.B1_stack.cols());
  s.F4.setZero(xrows + urows, std::max(model.n_delta, 0));
  s.F5.resize(xrows + urows);
  for (int l = 0; l <= H; ++l) {
    s.F1.middleRows(l * ncx, ncx) = model.Cx * model.A_stack.middleRows(l * nx, nx);
    s.F2.middleRows(l * ncx, ncx).noalias() =
        model.Cx * model.B_stack.middleRows(l * nx, nx);
    s.F3.middleRows(l * ncx, ncx).noalias() =
        model.Cx * model.B1_stack.middleRows(l * nx, nx);
    if (model.n_delta > 0)
      s.F4.middleRows(l * ncx, ncx).noalias() =
          model.Cx * model.B2_stack.middleRows(l * nx, nx);
    s.F5.segment(l * ncx, ncx) = model.bx;
  }
  for (int l = 0; l < H; ++l) {
    s.F2.block(xrows + l * ncu, l * model.nu, ncu, model.nu) = model.Cu;
    s.F5.segment(xrows + l * ncu, ncu) = model.bu;
  }
  return s;
}

Eigen::VectorXd estimate_state(const PlantModel& model,
                               const Eigen::VectorXd& last_known,
                               const Eigen::VectorXd& inputs, int d) {
  if (d < 0) throw Error("estimate_state: negative age");
  if (inputs.size() < static_cast<long>(d) * model.nu())
    throw Error("estimate_state: missing-inputs");
  Eigen::VectorXd x = last_known;
  for (int t = 0; t < d; ++t)
    x = model.A * x + model.B * inputs.segment(t * model.nu(), model.nu());
  return x;
}

// ---------------------------------------------------------------------------
// Stage assembly
// ---------------------------------------------------------------------------

namespace {

struct VarMap {
  int H = 0, nu = 0;
  int n_v = 0;                 // nominal entries
  bool root = false;           // no uncertainty columns: explicit b_Delta vars
  std::vector<std::array<int, 3>> k_entries;  // (l, m, col) for K and S
  std::vector<std::array<int, 2>> t_entries;  // (state row f, col)
  int k_base = 0, s_base = 0, t_base = 0, b_base = 0;
  int slack_base = 0, n_slack = 0;  // soft state-row violations
  int total = 0;

  int v_index(int l, int m) const { return l * nu + m; }
};

struct StageMatrices {
  AdmissibleSet adm;
  Eigen::MatrixXd CxB;  // state rows of F2 ((H+1)*ncx x H*nu)
  int xrows = 0;
};

VarMap layout_vars(const StageContext& ctx, const StageMatrices& sm) {
  const auto& model = *ctx.model;
  VarMap vm;
  vm.H = model.horizon;
  vm.nu = model.nu;
  vm.n_v = vm.H * vm.nu;
  vm.root = model.n_delta == 0;
  if (!vm.root) {
    for (int l = 0; l < vm.H; ++l)
      for (int c = 0; c < ctx.support.cols; ++c) {
        if (!ctx.support.at(l, c)) continue;
        if (ctx.box.halfwidth(c) <= 0.0) continue;  // no effect, keep gain 0
        for (int m = 0; m < vm.nu; ++m)
          vm.k_entries.push_back({l, m, c});
      }
    // prune state certificates to rows/columns that can carry mass
    for (int f = 0; f < sm.xrows; ++f) {
      for (int c = 0; c < model.n_delta; ++c) {
        if (ctx.box.halfwidth(c) <= 0.0) continue;
        bool need = std::abs(sm.adm.F4(f, c)) > 1e-14;
        if (!need) {
          for (const auto& e : vm.k_entries) {
            if (e[2] != c) continue;
            if (std::abs(sm.CxB(f, vm.v_index(e[0], e[1]))) > 1e-14) {
              need = true;
              break;
            }
          }
        }
        if (need) vm.t_entries.push_back({f, c});
      }
    }
  }
  vm.k_base = vm.n_v;
  vm.s_base = vm.k_base + static_cast<int>(vm.k_entries.size());
  vm.t_base = vm.s_base + static_cast<int>(vm.k_entries.size());
  vm.b_base = vm.t_base + static_cast<int>(vm.t_entries.size());
  vm.slack_base = vm.b_base + (vm.root ? vm.n_v : 0);
  vm.n_slack = ctx.soft_state_weight > 0.0 ? sm.xrows : 0;
  vm.total = vm.slack_base + vm.n_slack;
  return vm;
}

// coefficient row of the outgoing halfwidth b_Delta(l, m) over the variables
Eigen::RowVectorXd bdelta_row(const VarMap& vm, const StageContext& ctx, int l,
                              int m) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(vm.total);
  if (vm.root) {
    row(vm.b_base + vm.v_index(l, m)) = 1.0;
    return row;
  }
  for (size_t i = 0; i < vm.k_entries.size(); ++i) {
    const auto& e = vm.k_entries[i];
    if (e[0] == l && e[1] == m)
      row(vm.s_base + static_cast<int>(i)) = ctx.box.halfwidth(e[2]);
  }
  return row;
}

struct AssemblyOut {
  optkernel::QuadraticProgram qp;
  VarMap vm;
  StageMatrices sm;
};

AssemblyOut assemble_stage(const StageContext& ctx) {
  const auto& model = *ctx.model;
  const int H = model.horizon;
  const int nu = model.nu;
  const int ncx = static_cast<int>(model.Cx.rows());
  const int ncu = static_cast<int>(model.Cu.rows());

  AssemblyOut out;
  out.sm.adm = build_admissible_set(model, ctx.box);
  out.sm.xrows = (H + 1) * ncx;
  out.sm.CxB = out.sm.adm.F2.topRows(out.sm.xrows);
  out.vm = layout_vars(ctx, out.sm);
  const VarMap& vm = out.vm;

  Eigen::VectorXd pred_traj(model.B1_stack.cols());
  {
    int col = 0;
    for (size_t p = 0; p < ctx.delays.size(); ++p) {
      pred_traj.segment(col, H * model.pred_nu[p]) = ctx.delays[p].assumed_inputs;
      col += H * model.pred_nu[p];
    }
  }
  Eigen::VectorXd rhs = out.sm.adm.residual(ctx.x0, pred_traj);

  auto& qp = out.qp;
  qp = optkernel::QuadraticProgram::make(vm.total);

  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> bounds;

  // robust state rows
  for (int f = 0; f < out.sm.xrows; ++f) {
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(vm.total);
    bool nonzero = false;
    for (int i = 0; i < vm.n_v; ++i) {
      row(i) = out.sm.CxB(f, i);
      nonzero = nonzero || row(i) != 0.0;
    }
    if (vm.root) {
      for (int l = 0; l < H; ++l)
        for (int m = 0; m < nu; ++m) {
          double c = std::abs(out.sm.CxB(f, vm.v_index(l, m)));
          if (c > 1e-14) {
            row(vm.b_base + vm.v_index(l, m)) = c;
            nonzero = true;
          }
        }
    } else {
      for (size_t i = 0; i < vm.t_entries.size(); ++i) {
        if (vm.t_entries[i][0] != f) continue;
        row(vm.t_base + static_cast<int>(i)) =
            ctx.box.halfwidth(vm.t_entries[i][1]);
        nonzero = true;
      }
    }
    if (vm.n_slack > 0) {
      row(vm.slack_base + f) = -1.0;
      nonzero = true;
    }
    if (!nonzero && rhs(f) > -1e-12) continue;  // trivially satisfied
    rows.push_back(row);
    bounds.push_back(rhs(f));
  }

  // robust input rows: Cu v_l + |Cu| bDelta_l <= bu
  std::vector<Eigen::RowVectorXd> bdelta_cache(H * nu);
  for (int l = 0; l < H; ++l)
    for (int m = 0; m < nu; ++m)
      bdelta_cache[vm.v_index(l, m)] = bdelta_row(vm, ctx, l, m);
  for (int l = 0; l < H; ++l) {
    for (int c = 0; c < ncu; ++c) {
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(vm.total);
      for (int m = 0; m < nu; ++m) {
        row(vm.v_index(l, m)) += model.Cu(c, m);
        double a = std::abs(model.Cu(c, m));
        if (a > 1e-14) row += a * bdelta_cache[vm.v_index(l, m)];
      }
      rows.push_back(row);
      bounds.push_back(model.bu(c));
    }
  }

  // certificate dominance: T >= +-(CxB K + F4), S >= +-K
  for (size_t i = 0; i < vm.t_entries.size(); ++i) {
    int f = vm.t_entries[i][0];
    int c = vm.t_entries[i][1];
    for (double sign : {1.0, -1.0}) {
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(vm.total);
      row(vm.t_base + static_cast<int>(i)) = -1.0;
      for (size_t k = 0; k < vm.k_entries.size(); ++k) {
        const auto& e = vm.k_entries[k];
        if (e[2] != c) continue;
        row(vm.k_base + static_cast<int>(k)) =
            sign * out.sm.CxB(f, vm.v_index(e[0], e[1]));
      }
      rows.push_back(row);
      bounds.push_back(-sign * out.sm.adm.F4(f, c));
    }
  }
  for (size_t i = 0; i < vm.k_entries.size(); ++i) {
    for (double sign : {1.0, -1.0}) {
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(vm.total);
      row(vm.s_base + static_cast<int>(i)) = -1.0;
      row(vm.k_base + static_cast<int>(i)) = sign;
      rows.push_back(row);
      bounds.push_back(0.0);
    }
  }

  qp.ineq_matrix.resize(static_cast<int>(rows.size()), vm.total);
  qp.ineq_bound.resize(static_cast<int>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    qp.ineq_matrix.row(static_cast<int>(i)) = rows[i];
    qp.ineq_bound(static_cast<int>(i)) = bounds[i];
  }

  // bounds: containment boxes on the nominal plan, nonnegative b_Delta
  for (int i = 0; i < vm.n_v; ++i) {
    if (ctx.contain_lower.size() > 0) qp.lower(i) = ctx.contain_lower(i);
    if (ctx.contain_upper.size() > 0) qp.upper(i) = ctx.contain_upper(i);
  }
  if (vm.root)
    for (int i = 0; i < vm.n_v; ++i) qp.lower(vm.b_base + i) = 0.0;
  for (int i = 0; i < vm.n_slack; ++i) qp.lower(vm.slack_base + i) = 0.0;

  // epsilon regularization keeps the problem strictly convex
  qp.hessian = 2.0 * ctx.eps_reg *
               Eigen::MatrixXd::Identity(vm.total, vm.total);
  for (int i = 0; i < vm.n_slack; ++i)
    qp.hessian(vm.slack_base + i, vm.slack_base + i) =
        2.0 * ctx.soft_state_weight;
  return out;
}

FeedbackPolicy extract_policy(const StageContext& ctx, const AssemblyOut& a,
                              const Eigen::VectorXd& x) {
  const auto& model = *ctx.model;
  const VarMap& vm = a.vm;
  const int H = model.horizon;
  const int nu = model.nu;
  FeedbackPolicy pol;
  pol.nominal = x.head(vm.n_v);
  pol.gain = Eigen::MatrixXd::Zero(vm.n_v, model.n_delta);
  for (size_t i = 0; i < vm.k_entries.size(); ++i) {
    const auto& e = vm.k_entries[i];
    pol.gain(vm.v_index(e[0], e[1]), e[2]) = x(vm.k_base + static_cast<int>(i));
  }

  // outgoing halfwidths
  pol.outgoing_halfwidth = Eigen::VectorXd::Zero(vm.n_v);
  for (int l = 0; l < H; ++l)
    for (int m = 0; m < nu; ++m)
      pol.outgoing_halfwidth(vm.v_index(l, m)) =
          std::max(0.0, bdelta_row(vm, ctx, l, m).dot(x));

  // slack certificate Z = [Z+ Z-] with Z+ - Z- = F2 K + F4 and
  // Z+ + Z- = That >= |F2 K + F4|
  const int frows = a.sm.adm.rows();
  const int nd = model.n_delta;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(frows, std::max(nd, 0));
  if (nd > 0) {
    M = a.sm.adm.F2 * pol.gain + a.sm.adm.F4;
    Eigen::MatrixXd That = M.cwiseAbs();
    for (size_t i = 0; i < vm.t_entries.size(); ++i) {
      int f = vm.t_entries[i][0];
      int c = vm.t_entries[i][1];
      That(f, c) = std::max(That(f, c), x(vm.t_base + static_cast<int>(i)));
    }
    // input-row certificates come from the gain-dominating S variables
    const int ncu = static_cast<int>(model.Cu.rows());
    Eigen::MatrixXd Shat = pol.gain.cwiseAbs();
    for (size_t i = 0; i < vm.k_entries.size(); ++i) {
      const auto& e = vm.k_entries[i];
      Shat(vm.v_index(e[0], e[1]), e[2]) =
          std::max(Shat(vm.v_index(e[0], e[1]), e[2]),
                   x(vm.s_base + static_cast<int>(i)));
    }
    for (int l = 0; l < H; ++l)
      for (int c = 0; c < ncu; ++c) {
        int f = a.sm.xrows + l * ncu + c;
        for (int d = 0; d < nd; ++d) {
          double acc = 0;
          for (int m = 0; m < nu; ++m)
            acc += std::abs(model.Cu(c, m)) * Shat(vm.v_index(l, m), d);
          That(f, d) = std::max(That(f, d), acc);
        }
      }
    pol.slack.resize(frows, 2 * nd);
    pol.slack.leftCols(nd) = 0.5 * (That + M);
    pol.slack.rightCols(nd) = 0.5 * (That - M);
  } else {
    pol.slack.resize(frows, 0);
  }
  return pol;
}

}  // namespace

StageResult solve_stage1(const StageContext& ctx, const StageCost& cost) {
  const auto& model = *ctx.model;
  const int H = model.horizon;
  const int nx = model.nx;
  const int nu = model.nu;
  auto a = assemble_stage(ctx);
  const VarMap& vm = a.vm;

  // nominal trajectory split: xt = xfree + Bs v
  Eigen::VectorXd pred_traj(model.B1_stack.cols());
  {
    int col = 0;
    for (size_t p = 0; p < ctx.delays.size(); ++p) {
      pred_traj.segment(col, H * model.pred_nu[p]) = ctx.delays[p].assumed_inputs;
      col += H * model.pred_nu[p];
    }
  }
  Eigen::VectorXd xfree = model.A_stack * ctx.x0;
  if (pred_traj.size() > 0) xfree += model.B1_stack * pred_traj;

  Eigen::MatrixXd Hv = Eigen::MatrixXd::Zero(vm.n_v, vm.n_v);
  Eigen::VectorXd gv = Eigen::VectorXd::Zero(vm.n_v);
  for (int l = 0; l <= H; ++l) {
    const Eigen::MatrixXd& Q = cost.Qx[l];
    if (Q.size() == 0) continue;
    Eigen::MatrixXd Bl = model.B_stack.middleRows(l * nx, nx);
    Eigen::VectorXd xf = xfree.segment(l * nx, nx);
    Hv.noalias() += Bl.transpose() * Q * Bl;
    gv.noalias() += Bl.transpose() * (2.0 * Q * xf + cost.lx[l]);
  }
  for (int l = 0; l < H; ++l) {
    const Eigen::MatrixXd& Qu = cost.Qu[l];
    if (Qu.size() == 0) continue;
    Hv.block(l * nu, l * nu, nu, nu) += Qu;
    gv.segment(l * nu, nu) += cost.lu[l];
  }

  auto& qp = a.qp;
  qp.hessian.topLeftCorner(vm.n_v, vm.n_v) += 2.0 * Hv;
  qp.linear.head(vm.n_v) = gv;

  auto rep = optkernel::solve_qp(qp);
  StageResult res;
  res.status = rep.status;
  if (!rep.ok()) return res;
  res.policy = extract_policy(ctx, a, rep.solution);
  res.policy.objective = rep.objective;
  for (int i = 0; i < vm.n_slack; ++i)
    res.max_state_slack =
        std::max(res.max_state_slack, rep.solution(vm.slack_base + i));
  return res;
}

StageResult solve_stage2(const StageContext& ctx, const FeedbackPolicy& stage1,
                         const StageTwoCost& cost) {
  const auto& model = *ctx.model;
  const int H = model.horizon;
  const int nu = model.nu;
  auto a = assemble_stage(ctx);
  const VarMap& vm = a.vm;
  auto& qp = a.qp;

  // the nominal plan is preset; only the gain and certificate move
  for (int i = 0; i < vm.n_v; ++i) {
    qp.lower(i) = stage1.nominal(i);
    qp.upper(i) = stage1.nominal(i);
  }

  for (int l = 0; l < H; ++l) {
    for (int m = 0; m < nu; ++m) {
      Eigen::RowVectorXd row = bdelta_row(vm, ctx, l, m);
      double target = cost.target.size() > 0 ? cost.target(vm.v_index(l, m)) : 0.0;
      double wq = 0.0, wl = 0.0;
      if (l >= 1 && l <= cost.f1_upper) {
        wq += cost.balance_weight;
        wl += -2.0 * cost.balance_weight * target;
      } else if (l >= 1) {
        wq += cost.tail_balance_weight;
        wl += -2.0 * cost.tail_balance_weight * target;
      }
      if (l <= cost.tau_out) wq += cost.tighten_weight;
      if (wq == 0.0 && wl == 0.0) continue;
      qp.hessian.noalias() += 2.0 * wq * row.transpose() * row;
      qp.linear.noalias() += wl * row.transpose();
    }
  }

  auto rep = optkernel::solve_qp(qp);
  StageResult res;
  res.status = rep.status;
  if (!rep.ok())
    throw Error("solve_stage2: infeasible although stage 1 succeeded");
  res.policy = extract_policy(ctx, a, rep.solution);
  res.policy.nominal = stage1.nominal;  // bit-identical by construction
  res.policy.objective = rep.objective;
  return res;
}

// ---------------------------------------------------------------------------
// References and the per-subsystem controller
// ---------------------------------------------------------------------------

Eigen::VectorXd ReferenceSignal::at(int t, int dim) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  for (const auto& s : segments)
    if (s.from <= t) v = s.value;
  return v;
}

Eigen::VectorXd ReferenceSignal::visible(int t, int now, int dim) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  for (const auto& s : segments) {
    if (s.announce > now) continue;
    if (s.from <= t) v = s.value;
  }
  return v;
}

SubsystemController::SubsystemController(int id, PlantModel own,
                                         std::vector<PredecessorSpec> preds,
                                         TrackingSpec tracking,
                                         ControllerConfig config,
                                         bool has_followers)
    : id_(id),
      own_(std::move(own)),
      preds_(std::move(preds)),
      tracking_(std::move(tracking)),
      config_(config),
      has_followers_(has_followers) {
  own_.validate();
  for (auto& p : preds_) p.model.validate();
  if (tracking_.x_ref0.size() == 0)
    tracking_.x_ref0 = Eigen::VectorXd::Zero(own_.nx());
}

Eigen::VectorXd SubsystemController::reference_state(int t) const {
  if (!tracking_.state_ref_from_input && !tracking_.state_ref.empty())
    return tracking_.state_ref.at(t, own_.nx());
  if (ref_state_cache_.empty()) ref_state_cache_.push_back(tracking_.x_ref0);
  while (static_cast<int>(ref_state_cache_.size()) <= t) {
    int s = static_cast<int>(ref_state_cache_.size()) - 1;
    ref_state_cache_.push_back(own_.A * ref_state_cache_.back() +
                               own_.B * reference_input(s));
  }
  return ref_state_cache_[t];
}

Eigen::VectorXd SubsystemController::reference_input(int t) const {
  return tracking_.input_ref.at(t, own_.nu());
}

StageCost SubsystemController::build_cost(
    int now, const std::vector<DelayInfo>& delays) const {
  const int H = config_.horizon;
  const int nu = own_.nu();
  int nx_aug = own_.nx();
  std::vector<int> poff;
  for (const auto& p : preds_) {
    poff.push_back(nx_aug);
    nx_aug += p.model.nx();
  }

  // visible reference state over the horizon
  std::vector<Eigen::VectorXd> xref(H + 1);
  if (tracking_.qx_self.size() > 0 || tracking_.qt_self.size() > 0) {
    if (tracking_.state_ref_from_input) {
      Eigen::VectorXd x = reference_state(now);
      for (int l = 0; l <= H; ++l) {
        xref[l] = x;
        x = own_.A * x + own_.B * tracking_.input_ref.visible(now + l, now, nu);
      }
    } else {
      for (int l = 0; l <= H; ++l)
        xref[l] = tracking_.state_ref.visible(now + l, now, own_.nx());
    }
  }

  StageCost cost;
  cost.Qx.resize(H + 1);
  cost.lx.resize(H + 1);
  cost.Qu.resize(H);
  cost.lu.resize(H);
  for (int l = 0; l <= H; ++l) {
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(nx_aug, nx_aug);
    Eigen::VectorXd lx = Eigen::VectorXd::Zero(nx_aug);
    const bool terminal = l == H;
    const Eigen::VectorXd& wself =
        terminal && tracking_.qt_self.size() > 0 ? tracking_.qt_self
                                                 : tracking_.qx_self;
    if (wself.size() > 0) {
      for (int d = 0; d < own_.nx(); ++d) {
        Q(d, d) += wself(d);
        lx(d) -= 2.0 * wself(d) * xref[l](d);
      }
    }
    for (size_t p = 0; p < preds_.size(); ++p) {
      const Eigen::VectorXd& wdiff =
          terminal && p < tracking_.qt_diff.size() &&
                  tracking_.qt_diff[p].size() > 0
              ? tracking_.qt_diff[p]
              : (p < tracking_.qx_diff.size() ? tracking_.qx_diff[p]
                                              : Eigen::VectorXd());
      if (wdiff.size() == 0) continue;
      const auto& spec = preds_[p];
      for (int d = 0; d < own_.nx(); ++d) {
        double w = wdiff(d);
        double off = spec.offset.size() > 0 ? spec.offset(d) : 0.0;
        int pd = poff[p] + d;
        Q(d, d) += w;
        Q(pd, pd) += w;
        Q(d, pd) -= w;
        Q(pd, d) -= w;
        lx(d) -= 2.0 * w * off;
        lx(pd) += 2.0 * w * off;
      }
    }
    cost.Qx[l] = Q;
    cost.lx[l] = lx;
  }
  for (int l = 0; l < H; ++l) {
    Eigen::MatrixXd Qu = Eigen::MatrixXd::Zero(nu, nu);
    Eigen::VectorXd lu = Eigen::VectorXd::Zero(nu);
    if (tracking_.qu_self.size() > 0) {
      Eigen::VectorXd uref = tracking_.input_ref.visible(now + l, now, nu);
      for (int m = 0; m < nu; ++m) {
        Qu(m, m) += tracking_.qu_self(m);
        lu(m) -= 2.0 * tracking_.qu_self(m) * uref(m);
      }
    }
    if (tracking_.qu_match > 0 && !delays.empty() &&
        preds_[0].model.nu() == nu) {
      Eigen::VectorXd um = delays[0].assumed_inputs.segment(l * nu, nu);
      for (int m = 0; m < nu; ++m) {
        Qu(m, m) += tracking_.qu_match;
        lu(m) -= 2.0 * tracking_.qu_match * um(m);
      }
    }
    cost.Qu[l] = Qu;
    cost.lu[l] = lu;
  }
  return cost;
}

SubsystemController::StepResult SubsystemController::step(
    int now, const Eigen::VectorXd& own_state,
    const std::vector<PredecessorInput>& preds, int tau_out,
    bool run_stage_two) {
  StepResult result;
  const int H = config_.horizon;
  const int nu = own_.nu();
  if (static_cast<int>(preds.size()) != static_cast<int>(preds_.size())) {
    result.ok = false;
    result.fault = "predecessor inputs do not match the information graph";
    return result;
  }

  std::vector<DelayInfo> delays;
  std::vector<int> ages;
  Eigen::VectorXd x0(own_.nx() +
                     [&] {
                       int s = 0;
                       for (auto& p : preds_) s += p.model.nx();
                       return s;
                     }());
  x0.head(own_.nx()) = own_state;
  int xoff = own_.nx();
  for (size_t p = 0; p < preds_.size(); ++p) {
    const auto& in = preds[p];
    const auto& pm = preds_[p].model;
    const int nup = pm.nu();
    int d = in.age;
    if (d < 0 || d > H) {
      result.ok = false;
      result.fault = "missing-inputs: information age " + std::to_string(d) +
                     " exceeds the horizon";
      return result;
    }
    DelayInfo info;
    info.age = d;
    info.predicted_ages = in.predicted_ages;
    while (static_cast<int>(info.predicted_ages.size()) < H)
      info.predicted_ages.push_back(info.predicted_ages.empty()
                                        ? d
                                        : info.predicted_ages.back());
    for (auto& a : info.predicted_ages) a = std::max(0, a);
    info.predicted_ages[0] = d;

    Eigen::VectorXd est;
    try {
      est = estimate_state(pm, in.newest.state,
                           in.newest.plan.head(static_cast<long>(d) * nup), d);
    } catch (const Error& e) {
      result.ok = false;
      result.fault = e.what();
      return result;
    }
    x0.segment(xoff, pm.nx()) = est;
    xoff += pm.nx();

    info.assumed_inputs.resize(H * nup);
    info.incoming_halfwidth.resize((H - 1 + d) * nup);
    for (int l = 0; l < H; ++l) {
      int idx = std::min(d + l, H - 1);
      info.assumed_inputs.segment(l * nup, nup) =
          in.newest.plan.segment(idx * nup, nup);
    }
    for (int r = 1 - d; r <= H - 1; ++r) {
      int idx = std::min(d + r, H - 1);
      Eigen::VectorXd w =
          in.newest.deviation_bound.segment(idx * nup, nup).cwiseMax(0.0);
      info.incoming_halfwidth.segment((r - (1 - d)) * nup, nup) = w;
    }
    delays.push_back(std::move(info));
    ages.push_back(d);
  }

  AugmentedModel model = build_models(own_, preds_, ages, H);

  StageContext ctx;
  ctx.model = &model;
  ctx.x0 = x0;
  ctx.delays = delays;
  ctx.support = feedback_support(model, delays);
  ctx.box.halfwidth.resize(model.n_delta);
  for (size_t p = 0; p < delays.size(); ++p)
    ctx.box.halfwidth.segment(model.delta_offset[p],
                              delays[p].incoming_halfwidth.size()) =
        delays[p].incoming_halfwidth;
  ctx.eps_reg = config_.eps_reg;
  ctx.soft_state_weight = config_.soft_state_weight;

  // containment: stay inside every deviation tube communicated recently
  ctx.contain_lower = Eigen::VectorXd::Constant(H * nu, -kInf);
  ctx.contain_upper = Eigen::VectorXd::Constant(H * nu, kInf);
  for (const auto& rec : sent_) {
    int gap = now - rec.step;
    if (gap < 1 || gap > H - 1) continue;
    for (int l = 0; l < H; ++l) {
      int idx = gap + l;
      if (idx > H - 1) break;
      for (int m = 0; m < nu; ++m) {
        double center = rec.plan(idx * nu + m);
        double width = std::max(0.0, rec.bound(idx * nu + m)) + 1e-9;
        ctx.contain_lower(l * nu + m) =
            std::max(ctx.contain_lower(l * nu + m), center - width);
        ctx.contain_upper(l * nu + m) =
            std::min(ctx.contain_upper(l * nu + m), center + width);
      }
    }
  }

  StageCost cost = build_cost(now, delays);
  auto stage1 = solve_stage1(ctx, cost);
  if (stage1.status != optkernel::SolveStatus::Optimal) {
    result.ok = false;
    result.fault = std::string("stage-1 solve ") +
                   optkernel::to_string(stage1.status);
    return result;
  }

  StageTwoCost c2;
  c2.balance_weight = config_.balance_weight;
  c2.tighten_weight = config_.tighten_weight;
  c2.tail_balance_weight = config_.tail_balance_weight;
  int dmax = 0;
  for (int a : ages) dmax = std::max(dmax, a);
  c2.f1_upper = std::max(0, H - dmax - 1);
  c2.tau_out = has_followers_ ? std::min(std::max(tau_out, 0), H - 1) : 0;
  c2.target.resize(H * nu);
  for (int l = 0; l < H; ++l) {
    double t = 0.0;
    if (preds_.empty()) {
      t = config_.flexibility;
    } else if (l >= 1) {
      for (size_t p = 0; p < delays.size(); ++p) {
        const int nup = preds_[p].model.nu();
        int col = (l - (1 - delays[p].age)) * nup;
        for (int m = 0; m < nup; ++m)
          t = std::max(t, delays[p].incoming_halfwidth(col + m));
      }
    }
    for (int m = 0; m < nu; ++m) c2.target(l * nu + m) = t;
  }

  FeedbackPolicy final_policy;
  if (run_stage_two) {
    auto stage2 = solve_stage2(ctx, stage1.policy, c2);
    final_policy = stage2.policy;
  } else {
    // constant-delay reference method: no reshaping, constant allowance
    final_policy = stage1.policy;
    final_policy.outgoing_halfwidth =
        Eigen::VectorXd::Constant(H * nu, config_.flexibility);
  }

  result.input = stage1.policy.nominal.head(nu);
  result.stage1_first = stage1.policy.nominal.head(nu);
  result.stage1_objective = stage1.policy.objective;
  result.stage2_objective = final_policy.objective;
  result.policy = final_policy;
  result.estimate = x0;
  result.message.sender = id_;
  result.message.step = now;
  result.message.state = own_state;
  result.message.plan = stage1.policy.nominal;
  result.message.deviation_bound = final_policy.outgoing_halfwidth;

  if (has_followers_) {
    sent_.push_back({now, result.message.plan, result.message.deviation_bound});
    while (static_cast<int>(sent_.size()) > H) sent_.pop_front();
  }
  return result;
}

}  // namespace cpn::dmpc
