#include "cpn/rpnc.hpp"

#include <algorithm>

namespace cpn::rpnc {

using forecast::GammaMask;
using forecast::is_unreachable;
using forecast::RepetitionProfile;
using netmodel::PacketFlight;

PromiseEntry* PromiseLedger::find(int flight_id) {
  for (auto& e : entries)
    if (e.flight_id == flight_id) return &e;
  return nullptr;
}

const PromiseEntry* PromiseLedger::find(int flight_id) const {
  for (const auto& e : entries)
    if (e.flight_id == flight_id) return &e;
  return nullptr;
}

void PromiseLedger::erase(int flight_id) {
  entries.erase(std::remove_if(entries.begin(), entries.end(),
                               [&](const PromiseEntry& e) {
                                 return e.flight_id == flight_id;
                               }),
                entries.end());
}

ConstraintBlock ConstraintBlock::empty(int cols) {
  ConstraintBlock b;
  b.matrix.resize(0, cols);
  b.bound.resize(0);
  return b;
}

void ConstraintBlock::append(const ConstraintBlock& other) {
  if (other.rows() == 0) return;
  const int r0 = rows();
  matrix.conservativeResize(r0 + other.rows(), other.matrix.cols());
  matrix.bottomRows(other.rows()) = other.matrix;
  bound.conservativeResize(r0 + other.rows());
  bound.tail(other.rows()) = other.bound;
}

RpncProblem make_problem(const netmodel::NetworkTopology& topology,
                         const std::vector<PacketFlight>& flights,
                         const RepetitionProfile& base_profile, int horizon,
                         const std::map<int, Commitment>& commitments,
                         const PromiseLedger& ledger,
                         bool relax_processability) {
  RpncProblem p;
  p.topology = topology;
  p.horizon = horizon;
  p.flights = flights;
  p.base_profile = base_profile;
  p.relax_processability = relax_processability;
  for (const auto& f : flights) {
    RepetitionProfile prof = base_profile;
    auto it = commitments.find(f.flight_id);
    if (it != commitments.end())
      prof.reps(0, it->second.link) = it->second.remaining;
    p.flight_profiles.push_back(prof);
    std::vector<GammaMask> masks;
    for (int kappa = 0; kappa <= horizon; ++kappa)
      masks.push_back(forecast::build_gamma(p.flight_profiles.back(), kappa));
    p.gammas.push_back(std::move(masks));
    Eigen::VectorXd q = Eigen::VectorXd::Ones(topology.entity_count);
    q(f.destination) = 0.0;
    p.cost_diag.push_back(q);
    const auto* entry = ledger.find(f.flight_id);
    if (entry && entry->active)
      p.promise_window.push_back(entry->kappa - entry->delta_k);
    else
      p.promise_window.push_back(std::nullopt);
  }
  return p;
}

std::vector<Eigen::VectorXi> predict_queues(
    const PacketFlight& flight, const std::vector<GammaMask>& gammas,
    const netmodel::NetworkTopology& topology, const Eigen::VectorXi& v_traj) {
  const int H = static_cast<int>(gammas.size()) - 1;
  const int n_v = topology.num_links();
  std::vector<Eigen::VectorXi> out;
  for (int kappa = 1; kappa <= H; ++kappa) {
    Eigen::VectorXi q = flight.queue;
    for (int k = 0; k < H; ++k)
      for (int j = 0; j < n_v; ++j)
        if (v_traj(k * n_v + j) != 0 && gammas[kappa].entry(k, j))
          q += topology.links[j].effect_column;
    out.push_back(q);
  }
  return out;
}

ConstraintBlock assemble_constituency(const RpncProblem& p) {
  const int n_v = p.topology.num_links();
  const int n_c = p.topology.num_groups();
  ConstraintBlock b = ConstraintBlock::empty(p.num_vars());
  b.matrix.setZero(p.horizon * n_c, p.num_vars());
  b.bound.setOnes(p.horizon * n_c);
  for (int k = 0; k < p.horizon; ++k)
    for (int i = 0; i < n_c; ++i) {
      int row = k * n_c + i;
      for (int f = 0; f < p.num_flights(); ++f)
        for (int j = 0; j < n_v; ++j)
          if (p.topology.constituency(i, j) == 1)
            b.matrix(row, p.var(f, k, j)) = 1.0;
    }
  return b;
}

ConstraintBlock assemble_reliability(const RpncProblem& p) {
  const int n_v = p.topology.num_links();
  ConstraintBlock b = ConstraintBlock::empty(p.num_vars());
  std::vector<Eigen::RowVectorXd> rows;
  for (int f = 0; f < p.num_flights(); ++f) {
    for (int k = 0; k < p.horizon; ++k) {
      for (int j = 0; j < n_v; ++j) {
        int r = p.flight_profiles[f].at(k, j);
        if (is_unreachable(r) || r <= 1) continue;
        int window = std::min(r - 1, p.horizon - 1 - k);
        if (window < 1) continue;
        for (int group : p.topology.groups_of(j)) {
          Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(p.num_vars());
          row(p.var(f, k, j)) = 1.0;
          for (int m = 1; m <= window; ++m)
            for (int f2 = 0; f2 < p.num_flights(); ++f2)
              for (int j2 = 0; j2 < n_v; ++j2)
                if (p.topology.constituency(group, j2) == 1)
                  row(p.var(f2, k + m, j2)) += 1.0;
          rows.push_back(std::move(row));
        }
      }
    }
  }
  b.matrix.resize(static_cast<int>(rows.size()), p.num_vars());
  b.bound.setOnes(static_cast<int>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    b.matrix.row(static_cast<int>(i)) = rows[i];
  return b;
}

std::optional<ConstraintBlock> assemble_consistency(const RpncProblem& p,
                                                    int flight_index) {
  if (!p.promise_window[flight_index]) return std::nullopt;
  const int window = *p.promise_window[flight_index];
  const auto& flight = p.flights[flight_index];
  const int dest = flight.destination;
  const int n_v = p.topology.num_links();
  ConstraintBlock b = ConstraintBlock::empty(p.num_vars());
  b.matrix.setZero(1, p.num_vars());
  b.bound.resize(1);
  const auto& gamma = p.gammas[flight_index][std::min(window, p.horizon)];
  for (int k = 0; k < p.horizon; ++k)
    for (int j = 0; j < n_v; ++j)
      if (gamma.entry(k, j))
        b.matrix(0, p.var(flight_index, k, j)) =
            -static_cast<double>(p.topology.links[j].effect_column(dest));
  b.bound(0) = -1.0 + flight.queue(dest);
  return b;
}

ConstraintBlock assemble_processability(const RpncProblem& p,
                                        int flight_index) {
  const int n_v = p.topology.num_links();
  const int n_q = p.topology.entity_count;
  const auto& flight = p.flights[flight_index];
  ConstraintBlock b = ConstraintBlock::empty(p.num_vars());
  b.matrix.setZero(p.horizon * n_q, p.num_vars());
  b.bound.resize(p.horizon * n_q);
  Eigen::MatrixXi R = p.topology.routing_matrix();
  for (int kappa = 1; kappa <= p.horizon; ++kappa) {
    const auto& gamma = p.gammas[flight_index][kappa - 1];
    for (int q = 0; q < n_q; ++q) {
      int row = (kappa - 1) * n_q + q;
      b.bound(row) = flight.queue(q);
      for (int k = 0; k < p.horizon; ++k) {
        for (int j = 0; j < n_v; ++j) {
          double coeff = 0.0;
          if (k < kappa && R(q, j) < 0) coeff -= R(q, j);  // consumption
          if (!p.relax_processability && R(q, j) > 0 && gamma.entry(k, j))
            coeff -= R(q, j);  // realized arrival credit
          if (coeff != 0.0) b.matrix(row, p.var(flight_index, k, j)) = coeff;
        }
      }
    }
  }
  return b;
}

RpncSolution solve_rpnc(const RpncProblem& p) {
  const int n = p.num_vars();
  const int n_v = p.topology.num_links();
  RpncSolution sol;
  if (p.num_flights() == 0) {
    sol.status = optkernel::SolveStatus::Optimal;
    sol.v.resize(0);
    sol.objective = 0.0;
    return sol;
  }
  optkernel::LinearProgram lp = optkernel::LinearProgram::make(n);
  lp.lower.setZero();
  lp.upper.setOnes();

  // objective: linear expansion of the diagonal queue cost over the
  // predicted trajectory; the constant below makes the reported value equal
  // the summed queue cost including the current step.
  double constant = 0.0;
  for (int f = 0; f < p.num_flights(); ++f) {
    const auto& flight = p.flights[f];
    constant += (p.horizon + 1) * p.cost_diag[f](flight.location());
    for (int k = 0; k < p.horizon; ++k) {
      for (int j = 0; j < n_v; ++j) {
        int r = p.flight_profiles[f].at(k, j);
        if (is_unreachable(r) || k + r > p.horizon) continue;
        const auto& link = p.topology.links[j];
        double delta = p.cost_diag[f](link.to_entity);
        if (link.from_entity) delta -= p.cost_diag[f](*link.from_entity);
        lp.objective(p.var(f, k, j)) = (p.horizon - k - r + 1) * delta;
      }
    }
  }

  // presolve: activations that cannot matter are pinned to zero
  for (int f = 0; f < p.num_flights(); ++f) {
    // earliest step the flight can be ready at each entity
    forecast::WeightedDelayGraph g =
        forecast::build_delay_graph(p.topology, p.flight_profiles[f]);
    std::vector<int> earliest(p.topology.entity_count, forecast::kUnreachable);
    for (int q = 0; q < p.topology.entity_count; ++q) {
      int d = forecast::shortest_delay(g, p.flights[f].location(), q, 0);
      earliest[q] = d;
    }
    for (int k = 0; k < p.horizon; ++k) {
      for (int j = 0; j < n_v; ++j) {
        const auto& link = p.topology.links[j];
        int r = p.flight_profiles[f].at(k, j);
        bool useless = !link.from_entity || is_unreachable(r) ||
                       k + r > p.horizon ||
                       (link.from_entity &&
                        (is_unreachable(earliest[*link.from_entity]) ||
                         earliest[*link.from_entity] > k));
        if (useless) lp.upper(p.var(f, k, j)) = 0.0;
      }
    }
  }

  ConstraintBlock all = assemble_constituency(p);
  all.append(assemble_reliability(p));
  for (int f = 0; f < p.num_flights(); ++f) {
    if (auto c = assemble_consistency(p, f)) all.append(*c);
    all.append(assemble_processability(p, f));
  }
  lp.ineq_matrix = all.matrix;
  lp.ineq_bound = all.bound;

  std::vector<int> bins(n);
  for (int i = 0; i < n; ++i) bins[i] = i;
  auto rep = optkernel::branch_and_bound(lp, bins);
  sol.status = rep.status;
  if (!rep.ok()) return sol;
  sol.v.resize(n);
  for (int i = 0; i < n; ++i)
    sol.v(i) = static_cast<int>(std::lround(rep.solution(i)));
  sol.objective = rep.objective + constant;
  for (int f = 0; f < p.num_flights(); ++f) {
    Eigen::VectorXi block(p.horizon * n_v);
    for (int k = 0; k < p.horizon; ++k)
      for (int j = 0; j < n_v; ++j)
        block(k * n_v + j) = sol.v(p.var(f, k, j));
    sol.trajectories.push_back(
        predict_queues(p.flights[f], p.gammas[f], p.topology, block));
  }
  return sol;
}

Eigen::VectorXi RpncSolution::flight_block(const RpncProblem& p, int f,
                                           int k) const {
  Eigen::VectorXi out(p.topology.num_links());
  for (int j = 0; j < p.topology.num_links(); ++j) out(j) = v(p.var(f, k, j));
  return out;
}

std::vector<std::optional<int>> extract_forecasts(const RpncProblem& p,
                                                  const RpncSolution& sol) {
  std::vector<std::optional<int>> out;
  for (int f = 0; f < p.num_flights(); ++f) {
    const auto& flight = p.flights[f];
    if (flight.queue(flight.destination) == 1) {
      out.push_back(0);
      continue;
    }
    std::optional<int> a;
    for (int kappa = 1; kappa <= p.horizon; ++kappa) {
      if (sol.trajectories[f][kappa - 1](flight.destination) == 1) {
        a = kappa;
        break;
      }
    }
    out.push_back(a);
  }
  return out;
}

bool NetworkController::cancel_by_payload(long payload) {
  int flight_id = -1;
  for (const auto& [fid, pl] : payloads_)
    if (pl == payload) flight_id = fid;
  if (flight_id < 0) return false;
  bool found = false;
  for (size_t i = 0; i < state_.flights.size(); ++i) {
    if (state_.flights[i].flight_id == flight_id) {
      state_.flights.erase(state_.flights.begin() + static_cast<long>(i));
      found = true;
      break;
    }
  }
  if (!found) return false;
  ledger_.erase(flight_id);
  commitments_.erase(flight_id);
  payloads_.erase(flight_id);
  return true;
}

std::optional<int> NetworkController::location_by_payload(long payload) const {
  for (const auto& [fid, pl] : payloads_) {
    if (pl != payload) continue;
    for (const auto& f : state_.flights)
      if (f.flight_id == fid) return f.location();
  }
  return std::nullopt;
}

NetworkController::NetworkController(
    netmodel::NetworkTopology topology,
    std::vector<netmodel::LinkStateChain> chains, SchedulerConfig config)
    : topology_(std::move(topology)), config_(std::move(config)) {
  topology_.validate();
  for (auto& c : chains) c.validate();
  state_.chains = std::move(chains);
  if (static_cast<int>(state_.chains.size()) != topology_.num_links())
    throw Error("network controller: one chain per link required");
}

PolicyStepResult NetworkController::policy_step(
    const std::vector<Request>& requests, Rng& rng) {
  PolicyStepResult result;
  const int t = state_.time;
  const int H = config_.horizon;

  for (const auto& r : requests) {
    auto flight =
        netmodel::create_request(topology_, r.origin, r.dest, t, next_flight_id_++);
    payloads_[flight.flight_id] = r.payload;
    state_.flights.push_back(std::move(flight));
  }

  auto base = forecast::compute_profile(state_.chains, config_.phi, H);
  result.profile = base;

  auto build = [&]() {
    auto p = make_problem(topology_, state_.flights, base, H, commitments_,
                          ledger_, config_.relax_processability);
    if (config_.cost_diag.size() == topology_.entity_count) {
      for (int f = 0; f < p.num_flights(); ++f) {
        p.cost_diag[f] = config_.cost_diag;
        p.cost_diag[f](p.flights[f].destination) = 0.0;
      }
    }
    return p;
  };

  RpncProblem problem = build();
  RpncSolution sol = solve_rpnc(problem);
  if (sol.status == optkernel::SolveStatus::Infeasible) {
    // first retry: deactivate promises whose window no path can meet
    for (auto& e : ledger_.entries) {
      if (!e.active) continue;
      int f = -1;
      for (int i = 0; i < problem.num_flights(); ++i)
        if (problem.flights[i].flight_id == e.flight_id) f = i;
      if (f < 0) continue;
      auto g = forecast::build_delay_graph(topology_, problem.flight_profiles[f]);
      int best = forecast::shortest_delay(g, problem.flights[f].location(),
                                          problem.flights[f].destination, 0);
      int window = e.kappa - e.delta_k;
      if (forecast::is_unreachable(best) || best > window || window < 0) {
        e.active = false;
        result.events.push_back({t, e.flight_id, e.payload, "released"});
      }
    }
    ++result.retries;
    problem = build();
    sol = solve_rpnc(problem);
  }
  if (sol.status == optkernel::SolveStatus::Infeasible) {
    // second retry: release every promise
    for (auto& e : ledger_.entries) {
      if (e.active) {
        e.active = false;
        result.events.push_back({t, e.flight_id, e.payload, "reset"});
      }
    }
    ++result.retries;
    problem = build();
    sol = solve_rpnc(problem);
  }
  if (sol.status != optkernel::SolveStatus::Optimal)
    throw Error(std::string("rpnc: schedule solve failed: ") +
                optkernel::to_string(sol.status));

  // promises
  auto arrivals_pred = extract_forecasts(problem, sol);
  for (int f = 0; f < problem.num_flights(); ++f) {
    const auto& flight = problem.flights[f];
    if (!arrivals_pred[f]) continue;
    int a = *arrivals_pred[f];
    if (a == 0) continue;  // retires below
    int promised_step = t + a - 1;
    auto* e = ledger_.find(flight.flight_id);
    long payload = payloads_.count(flight.flight_id)
                       ? payloads_[flight.flight_id]
                       : -1;
    if (!e) {
      ledger_.entries.push_back(
          {flight.flight_id, a, 0, true, promised_step, payload});
      result.events.push_back({t, flight.flight_id, payload, "promise"});
    } else if (e->active) {
      if (promised_step > e->promised_step)
        throw Error("rpnc: consistency violated by new promise");
      if (promised_step < e->promised_step)
        result.events.push_back({t, flight.flight_id, payload, "improved"});
      e->kappa = a;
      e->delta_k = 0;
      e->promised_step = promised_step;
    } else {
      e->kappa = a;
      e->delta_k = 0;
      e->active = true;
      e->promised_step = promised_step;
      result.events.push_back({t, flight.flight_id, payload, "repromise"});
    }
    // flights keep the latest promise visible to inspection tools
  }
  for (auto& flight : state_.flights) {
    const auto* e = ledger_.find(flight.flight_id);
    flight.promised_arrival =
        (e && e->active) ? std::optional<int>(e->kappa - e->delta_k)
                         : std::nullopt;
  }
  for (const auto& e : ledger_.entries)
    if (e.active)
      result.promises.push_back({e.flight_id, e.payload, e.promised_step, true});

  // apply the first activation block with sampled link outcomes
  Eigen::VectorXi outcomes = netmodel::sample_and_advance(state_.chains, rng);
  for (int f = 0; f < problem.num_flights(); ++f) {
    Eigen::VectorXi v0 = sol.flight_block(problem, f, 0);
    auto& flight = state_.flights[f];
    result.applied.emplace_back(flight.flight_id, v0);
    int active_link = -1;
    for (int j = 0; j < topology_.num_links(); ++j)
      if (v0(j) == 1) active_link = j;
    flight = netmodel::step_flight(flight, topology_, v0, outcomes);
    if (active_link < 0) {
      commitments_.erase(flight.flight_id);
      continue;
    }
    if (outcomes(active_link) == 1) {
      commitments_.erase(flight.flight_id);
    } else {
      int r_eff = problem.flight_profiles[f].at(0, active_link);
      if (!is_unreachable(r_eff) && r_eff > 1)
        commitments_[flight.flight_id] = {active_link, r_eff - 1};
      else
        commitments_.erase(flight.flight_id);
    }
  }

  // retire served flights
  state_ = netmodel::retire_served(std::move(state_));
  for (auto it = state_.arrivals.begin(); it != state_.arrivals.end();) {
    if (it->arrived_at == t) {
      result.arrivals.push_back(*it);
      long payload =
          payloads_.count(it->flight_id) ? payloads_[it->flight_id] : -1;
      result.arrival_payloads.push_back(payload);
      const auto* e = ledger_.find(it->flight_id);
      if (e)
        result.events.push_back({t, it->flight_id, payload, "fulfilled"});
      ledger_.erase(it->flight_id);
      commitments_.erase(it->flight_id);
      payloads_.erase(it->flight_id);
      ++it;
    } else {
      it = state_.arrivals.erase(it);
    }
  }

  // advance the clock, age promises, deactivate broken reliability windows
  state_.time = t + 1;
  for (auto& e : ledger_.entries) {
    if (!e.active) continue;
    e.delta_k += 1;
    if (e.promised_step < state_.time) {
      e.active = false;
      result.events.push_back({t, e.flight_id, e.payload, "deactivated"});
    }
  }
  return result;
}

}  // namespace cpn::rpnc
