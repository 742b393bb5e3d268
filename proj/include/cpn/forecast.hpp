#pragma once

#include <Eigen/Dense>
#include <limits>
#include <vector>

#include "cpn/netmodel.hpp"

namespace cpn::forecast {

/// Sentinel for "cannot be made reliable within the horizon".
inline constexpr int kUnreachable = std::numeric_limits<int>::max();

inline bool is_unreachable(int r) { return r == kUnreachable; }

/// Repetition counts r[k][j]: consecutive activations of link j, first
/// activated k steps from now, needed to push the cumulative success
/// probability over the reliability threshold.
struct RepetitionProfile {
  int horizon = 0;
  Eigen::MatrixXi reps;  // horizon x n_v, entries >= 1 or kUnreachable

  int at(int k, int j) const { return reps(k, j); }
};

/// Diagonal activation mask for prediction index kappa: entry (k, j) is 1
/// once the repetitions of an activation scheduled at k have completed by
/// kappa. Heaviside convention: theta[0] = 1.
struct GammaMask {
  int kappa = 0;
  int horizon = 0;
  int num_links = 0;
  std::vector<std::uint8_t> diag;  // horizon * num_links entries

  bool entry(int k, int j) const { return diag[k * num_links + j] != 0; }
};

/// Communication graph with per-start-step edge weights (the repetition
/// sequences). Waiting at a node is always allowed.
struct WeightedDelayGraph {
  struct Edge {
    int from = 0;
    int to = 0;
    std::vector<int> weights;  // indexed by absolute depart step
  };
  int node_count = 0;
  int horizon = 0;  // departures allowed at steps [k0, k0 + horizon - 1]
  std::vector<Edge> edges;
};

/// Reliable delay forecasts tau[(sender, receiver)][k - k0] for messages
/// injected at steps k0 .. k0+horizon-1. Receiver-side information ages are
/// maintained by the co-simulation from realized arrivals and these entries.
struct DelayForecastTable {
  int k0 = 0;
  int horizon = 0;
  struct PairEntry {
    int sender = 0;
    int receiver = 0;
    std::vector<int> tau;  // length horizon, kUnreachable allowed
  };
  std::vector<PairEntry> entries;

  const PairEntry* find(int sender, int receiver) const;
  /// Forecast for an injection at absolute step k (k0 <= k < k0 + horizon).
  int tau(int sender, int receiver, int k) const;
};

/// Repetition counts for one link over start offsets k0 .. k0+H-1, obtained
/// by propagating the joint (no-success-yet, chain-state) distribution from
/// the chain's current state. Entries needing more than H activations are
/// unreachable.
Eigen::VectorXi compute_repetitions(const netmodel::LinkStateChain& chain,
                                    double phi, int k0, int H);

/// Assembles the full profile for a topology (column per link).
RepetitionProfile compute_profile(
    const std::vector<netmodel::LinkStateChain>& chains, double phi, int H);

GammaMask build_gamma(const RepetitionProfile& profile, int kappa);

/// Builds the delay graph from a topology plus its repetition profile
/// (transfer links only). Weight sequences start at absolute step `base`.
WeightedDelayGraph build_delay_graph(const netmodel::NetworkTopology& topology,
                                     const RepetitionProfile& profile,
                                     int base = 0);

/// Earliest reliable arrival offset from src to dst departing at k0, over
/// the time-expanded graph (label-correcting, waiting allowed). Returns 0
/// for src == dst and kUnreachable when no path completes within horizon.
int shortest_delay(const WeightedDelayGraph& graph, int src, int dst, int k0);

DelayForecastTable forecast_pairs(const WeightedDelayGraph& graph,
                                  const std::vector<std::pair<int, int>>& pairs,
                                  int k0, int H);

}  // namespace cpn::forecast
