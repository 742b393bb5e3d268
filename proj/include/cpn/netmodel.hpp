#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "cpn/common.hpp"

namespace cpn::netmodel {

/// One directed transfer between entities. A link without a source entity is
/// an injection link (+1 only) used to seed queues; the scheduler never
/// activates those.
struct LinkSpec {
  int link_id = 0;
  std::optional<int> from_entity;
  int to_entity = 0;
  Eigen::VectorXi effect_column;  // {-1,0,1}^{n_q}

  static LinkSpec transfer(int id, int from, int to, int n_q);
  static LinkSpec injection(int id, int to, int n_q);
};

/// Static description of the queueing network: entities, links (columns of
/// the routing matrix) and the constituency groups of mutually exclusive
/// activations.
struct NetworkTopology {
  int entity_count = 0;
  std::vector<LinkSpec> links;
  Eigen::MatrixXi constituency;  // n_c x n_v

  int num_links() const { return static_cast<int>(links.size()); }
  int num_groups() const { return static_cast<int>(constituency.rows()); }
  Eigen::MatrixXi routing_matrix() const;
  /// Groups containing link j.
  std::vector<int> groups_of(int link) const;
  void validate() const;
};

/// Per-link success process: a discrete-time Markov chain whose state sets
/// the instantaneous transmission success probability.
struct LinkStateChain {
  Eigen::MatrixXd transition;    // row-stochastic
  Eigen::VectorXd success_prob;  // p(s) in [0,1]
  int current_state = 0;

  int state_count() const { return static_cast<int>(success_prob.size()); }
  void validate() const;
  static LinkStateChain constant(double p);
};

/// One communication request's queue subsystem: a single packet that lives
/// in exactly one entity queue until it reaches its destination.
struct PacketFlight {
  int flight_id = 0;
  int origin = 0;
  int destination = 0;
  Eigen::VectorXi queue;  // binary, single occupancy
  int created_at = 0;
  std::optional<int> promised_arrival;  // relative steps, managed by the scheduler

  int location() const;
  bool arrived() const { return queue(destination) == 1; }
};

struct ArrivalRecord {
  int flight_id = 0;
  int origin = 0;
  int destination = 0;
  int created_at = 0;
  int arrived_at = 0;
};

struct NetworkState {
  int time = 0;
  std::vector<PacketFlight> flights;
  std::vector<LinkStateChain> chains;
  std::vector<ArrivalRecord> arrivals;
};

/// Creates the queue subsystem for a new communication request.
PacketFlight create_request(const NetworkTopology& topology, int origin,
                            int dest, int k, int flight_id = 0);

/// Draws one Bernoulli outcome per link from the chains' current states and
/// then advances every chain. Exactly two draws per link are consumed
/// regardless of the chain, so parallel runs stay aligned.
Eigen::VectorXi sample_and_advance(std::vector<LinkStateChain>& chains,
                                   Rng& rng);

/// Applies one activation step to a flight: queue' = queue + R*diag(outcome)*v.
/// Throws on an activation that breaks single occupancy (a scheduler bug).
PacketFlight step_flight(const PacketFlight& flight,
                         const NetworkTopology& topology,
                         const Eigen::VectorXi& activations,
                         const Eigen::VectorXi& outcomes);

/// Removes flights that sit at their destination, logging their arrival.
NetworkState retire_served(NetworkState state);

}  // namespace cpn::netmodel
