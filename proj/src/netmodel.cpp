#include "cpn/netmodel.hpp"

#include <algorithm>

namespace cpn::netmodel {

LinkSpec LinkSpec::transfer(int id, int from, int to, int n_q) {
  LinkSpec l;
  l.link_id = id;
  l.from_entity = from;
  l.to_entity = to;
  l.effect_column = Eigen::VectorXi::Zero(n_q);
  l.effect_column(from) = -1;
  l.effect_column(to) = 1;
  return l;
}

LinkSpec LinkSpec::injection(int id, int to, int n_q) {
  LinkSpec l;
  l.link_id = id;
  l.to_entity = to;
  l.effect_column = Eigen::VectorXi::Zero(n_q);
  l.effect_column(to) = 1;
  return l;
}

Eigen::MatrixXi NetworkTopology::routing_matrix() const {
  Eigen::MatrixXi R = Eigen::MatrixXi::Zero(entity_count, num_links());
  for (int j = 0; j < num_links(); ++j) R.col(j) = links[j].effect_column;
  return R;
}

std::vector<int> NetworkTopology::groups_of(int link) const {
  std::vector<int> out;
  for (int i = 0; i < constituency.rows(); ++i)
    if (constituency(i, link) != 0) out.push_back(i);
  return out;
}

void NetworkTopology::validate() const {
  if (entity_count <= 0) throw Error("topology: entity_count must be positive");
  if (constituency.cols() != num_links())
    throw Error("topology: constituency columns must match link count");
  for (int i = 0; i < constituency.rows(); ++i) {
    bool any = false;
    for (int j = 0; j < constituency.cols(); ++j) {
      if (constituency(i, j) != 0 && constituency(i, j) != 1)
        throw Error("topology: constituency entries must be 0/1");
      any = any || constituency(i, j) == 1;
    }
    if (!any) throw Error("topology: empty constituency row");
  }
  for (int j = 0; j < num_links(); ++j) {
    bool covered = false;
    for (int i = 0; i < constituency.rows(); ++i)
      covered = covered || constituency(i, j) == 1;
    if (!covered) throw Error("topology: link not covered by any constituency group");
  }
  for (const auto& l : links) {
    if (l.effect_column.size() != entity_count)
      throw Error("topology: effect column dimension mismatch");
    int plus = 0, minus = 0;
    for (int q = 0; q < entity_count; ++q) {
      if (l.effect_column(q) == 1) ++plus;
      else if (l.effect_column(q) == -1) ++minus;
      else if (l.effect_column(q) != 0)
        throw Error("topology: effect entries must be in {-1,0,1}");
    }
    if (plus != 1 || minus > 1)
      throw Error("topology: effect column needs exactly one +1 and at most one -1");
    if (l.to_entity < 0 || l.to_entity >= entity_count ||
        l.effect_column(l.to_entity) != 1)
      throw Error("topology: to_entity must carry the +1");
    if (l.from_entity) {
      if (*l.from_entity < 0 || *l.from_entity >= entity_count ||
          l.effect_column(*l.from_entity) != -1)
        throw Error("topology: from_entity must carry the -1");
    } else if (minus != 0) {
      throw Error("topology: injection link cannot subtract");
    }
  }
}

void LinkStateChain::validate() const {
  const int s = state_count();
  if (s <= 0) throw Error("chain: needs at least one state");
  if (transition.rows() != s || transition.cols() != s)
    throw Error("chain: transition matrix shape mismatch");
  for (int i = 0; i < s; ++i) {
    double sum = 0;
    for (int j = 0; j < s; ++j) {
      if (transition(i, j) < -1e-12) throw Error("chain: negative transition probability");
      sum += transition(i, j);
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw Error("chain: transition row does not sum to 1");
  }
  for (int i = 0; i < s; ++i)
    if (success_prob(i) < 0.0 || success_prob(i) > 1.0)
      throw Error("chain: success probability outside [0,1]");
  if (current_state < 0 || current_state >= s)
    throw Error("chain: current state out of range");
}

LinkStateChain LinkStateChain::constant(double p) {
  LinkStateChain c;
  c.transition = Eigen::MatrixXd::Ones(1, 1);
  c.success_prob = Eigen::VectorXd::Constant(1, p);
  c.current_state = 0;
  return c;
}

int PacketFlight::location() const {
  for (int q = 0; q < queue.size(); ++q)
    if (queue(q) == 1) return q;
  throw Error("flight: empty queue vector");
}

PacketFlight create_request(const NetworkTopology& topology, int origin,
                            int dest, int k, int flight_id) {
  if (origin < 0 || origin >= topology.entity_count || dest < 0 ||
      dest >= topology.entity_count)
    throw Error("create_request: invalid-index");
  if (origin == dest) throw Error("create_request: origin equals destination");
  PacketFlight f;
  f.flight_id = flight_id;
  f.origin = origin;
  f.destination = dest;
  f.queue = Eigen::VectorXi::Zero(topology.entity_count);
  f.queue(origin) = 1;
  f.created_at = k;
  return f;
}

Eigen::VectorXi sample_and_advance(std::vector<LinkStateChain>& chains,
                                   Rng& rng) {
  Eigen::VectorXi outcomes(static_cast<int>(chains.size()));
  for (size_t j = 0; j < chains.size(); ++j) {
    auto& c = chains[j];
    double u = rng.next_unit();
    outcomes(static_cast<int>(j)) = u < c.success_prob(c.current_state) ? 1 : 0;
    double t = rng.next_unit();
    double acc = 0.0;
    int next = c.state_count() - 1;
    for (int s = 0; s < c.state_count(); ++s) {
      acc += c.transition(c.current_state, s);
      if (t < acc) {
        next = s;
        break;
      }
    }
    c.current_state = next;
  }
  return outcomes;
}

PacketFlight step_flight(const PacketFlight& flight,
                         const NetworkTopology& topology,
                         const Eigen::VectorXi& activations,
                         const Eigen::VectorXi& outcomes) {
  if (activations.size() != topology.num_links() ||
      outcomes.size() != topology.num_links())
    throw Error("step_flight: activation vector dimension mismatch");
  PacketFlight next = flight;
  for (int j = 0; j < topology.num_links(); ++j) {
    if (activations(j) == 0 || outcomes(j) == 0) continue;
    next.queue += topology.links[j].effect_column;
  }
  int ones = 0;
  for (int q = 0; q < next.queue.size(); ++q) {
    if (next.queue(q) != 0 && next.queue(q) != 1)
      throw Error("step_flight: infeasible-activation");
    ones += next.queue(q);
  }
  if (ones != 1) throw Error("step_flight: infeasible-activation");
  return next;
}

NetworkState retire_served(NetworkState state) {
  std::vector<PacketFlight> keep;
  keep.reserve(state.flights.size());
  for (auto& f : state.flights) {
    if (f.arrived()) {
      state.arrivals.push_back(
          {f.flight_id, f.origin, f.destination, f.created_at, state.time});
    } else {
      keep.push_back(std::move(f));
    }
  }
  state.flights = std::move(keep);
  return state;
}

}  // namespace cpn::netmodel
