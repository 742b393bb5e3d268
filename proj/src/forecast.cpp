#include "cpn/forecast.hpp"

#include <algorithm>
#include <queue>

namespace cpn::forecast {

const DelayForecastTable::PairEntry* DelayForecastTable::find(
    int sender, int receiver) const {
  for (const auto& e : entries)
    if (e.sender == sender && e.receiver == receiver) return &e;
  return nullptr;
}

int DelayForecastTable::tau(int sender, int receiver, int k) const {
  const auto* e = find(sender, receiver);
  if (!e) return kUnreachable;
  int idx = k - k0;
  if (idx < 0) return kUnreachable;
  if (idx >= horizon) idx = horizon - 1;  // hold-last beyond the window
  return e->tau[idx];
}

Eigen::VectorXi compute_repetitions(const netmodel::LinkStateChain& chain,
                                    double phi, int k0, int H) {
  if (phi <= 0.0 || phi >= 1.0)
    throw Error("compute_repetitions: phi must be in (0,1)");
  chain.validate();
  const int S = chain.state_count();
  Eigen::VectorXi out(H);

  // state distribution at offset k0 from the current state
  Eigen::RowVectorXd dist = Eigen::RowVectorXd::Zero(S);
  dist(chain.current_state) = 1.0;
  for (int s = 0; s < k0; ++s) dist = dist * chain.transition;

  for (int k = 0; k < H; ++k) {
    // joint probability of (all attempts so far failed, chain in state s)
    Eigen::RowVectorXd fail = dist;
    int r = kUnreachable;
    for (int m = 1; m <= H; ++m) {
      Eigen::RowVectorXd after(S);
      for (int s = 0; s < S; ++s)
        after(s) = fail(s) * (1.0 - chain.success_prob(s));
      after = after * chain.transition;
      double fail_mass = after.sum();
      if (1.0 - fail_mass >= phi - 1e-15) {
        r = m;
        break;
      }
      fail = after;
    }
    out(k) = r;
    dist = dist * chain.transition;
  }
  return out;
}

RepetitionProfile compute_profile(
    const std::vector<netmodel::LinkStateChain>& chains, double phi, int H) {
  RepetitionProfile p;
  p.horizon = H;
  p.reps.resize(H, static_cast<int>(chains.size()));
  for (size_t j = 0; j < chains.size(); ++j)
    p.reps.col(static_cast<int>(j)) = compute_repetitions(chains[j], phi, 0, H);
  return p;
}

GammaMask build_gamma(const RepetitionProfile& profile, int kappa) {
  if (kappa < 0) throw Error("build_gamma: kappa must be nonnegative");
  GammaMask g;
  g.kappa = kappa;
  g.horizon = profile.horizon;
  g.num_links = static_cast<int>(profile.reps.cols());
  g.diag.assign(static_cast<size_t>(g.horizon) * g.num_links, 0);
  for (int k = 0; k < g.horizon; ++k) {
    for (int j = 0; j < g.num_links; ++j) {
      int r = profile.reps(k, j);
      if (is_unreachable(r)) continue;
      if (kappa - r - k >= 0) g.diag[k * g.num_links + j] = 1;
    }
  }
  return g;
}

WeightedDelayGraph build_delay_graph(const netmodel::NetworkTopology& topology,
                                     const RepetitionProfile& profile,
                                     int base) {
  WeightedDelayGraph g;
  g.node_count = topology.entity_count;
  g.horizon = base + profile.horizon;
  for (int j = 0; j < topology.num_links(); ++j) {
    const auto& l = topology.links[j];
    if (!l.from_entity) continue;
    WeightedDelayGraph::Edge e;
    e.from = *l.from_entity;
    e.to = l.to_entity;
    e.weights.assign(base, kUnreachable);
    for (int k = 0; k < profile.horizon; ++k)
      e.weights.push_back(profile.reps(k, j));
    g.edges.push_back(std::move(e));
  }
  return g;
}

int shortest_delay(const WeightedDelayGraph& graph, int src, int dst, int k0) {
  if (src < 0 || src >= graph.node_count || dst < 0 || dst >= graph.node_count)
    throw Error("shortest_delay: invalid node");
  if (src == dst) return 0;
  const long cap = static_cast<long>(k0) + graph.horizon;

  std::vector<long> ready(graph.node_count, std::numeric_limits<long>::max());
  ready[src] = k0;
  using Item = std::pair<long, int>;  // (ready time, node)
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  pq.push({k0, src});
  while (!pq.empty()) {
    auto [t, u] = pq.top();
    pq.pop();
    if (t > ready[u]) continue;
    if (u == dst) break;
    for (const auto& e : graph.edges) {
      if (e.from != u) continue;
      // waiting is allowed: best arrival over departures in [t, horizon)
      long best = std::numeric_limits<long>::max();
      long last_depart =
          std::min<long>(static_cast<long>(e.weights.size()) - 1, cap - 1);
      for (long dep = t; dep <= last_depart; ++dep) {
        int w = e.weights[static_cast<size_t>(dep)];
        if (is_unreachable(w)) continue;
        best = std::min(best, dep + w);
      }
      if (best > cap) continue;
      if (best < ready[e.to]) {
        ready[e.to] = best;
        pq.push({best, e.to});
      }
    }
  }
  if (ready[dst] == std::numeric_limits<long>::max() || ready[dst] - k0 > graph.horizon)
    return kUnreachable;
  return static_cast<int>(ready[dst] - k0);
}

DelayForecastTable forecast_pairs(const WeightedDelayGraph& graph,
                                  const std::vector<std::pair<int, int>>& pairs,
                                  int k0, int H) {
  DelayForecastTable table;
  table.k0 = k0;
  table.horizon = H;
  for (auto [s, r] : pairs) {
    DelayForecastTable::PairEntry e;
    e.sender = s;
    e.receiver = r;
    e.tau.resize(H);
    for (int k = 0; k < H; ++k) e.tau[k] = shortest_delay(graph, s, r, k0 + k);
    table.entries.push_back(std::move(e));
  }
  return table;
}

}  // namespace cpn::forecast
