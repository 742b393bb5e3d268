#include "cpn/cosim.hpp"

#include <algorithm>
#include <map>
#include <limits>

#include "cpn/forecast.hpp"

namespace cpn::cosim {

const char* to_string(Mode m) {
  return m == Mode::Predicted ? "predicted" : "worstcase";
}

dmpc::InfoGraph ScenarioConfig::info_graph() const {
  dmpc::InfoGraph g;
  g.count = static_cast<int>(subsystems.size());
  g.predecessors.resize(g.count);
  g.followers.resize(g.count);
  for (int i = 0; i < g.count; ++i) {
    for (int j : subsystems[i].predecessors) {
      g.predecessors[i].push_back(j);
      if (j < 0 || j >= g.count)
        throw Error("scenario: predecessor index out of range");
      g.followers[j].push_back(i);
    }
  }
  return g;
}

void ScenarioConfig::validate() const {
  if (duration < 0) throw Error("scenario: negative duration");
  if (horizon < 1) throw Error("scenario: horizon must be positive");
  if (phi <= 0.0 || phi >= 1.0) throw Error("scenario: phi must be in (0,1)");
  topology.validate();
  if (static_cast<int>(chains.size()) != topology.num_links())
    throw Error("scenario: one chain per link required");
  for (const auto& c : chains) c.validate();
  for (const auto& s : subsystems) {
    s.plant.validate();
    if (s.node < 0 || s.node >= topology.entity_count)
      throw Error("scenario: subsystem node out of range");
    if (s.x0.size() != s.plant.nx())
      throw Error("scenario: initial state dimension mismatch");
    if (s.predecessors.size() != s.pred_specs.size())
      throw Error("scenario: predecessor spec mismatch");
    for (const auto& ps : s.pred_specs)
      if (ps.tau_bar < 1) throw Error("scenario: tau_bar must be >= 1");
  }
  auto g = info_graph();
  g.validate();
  for (const auto& o : delay_overrides) {
    if (o.sender < 0 || o.sender >= static_cast<int>(subsystems.size()) ||
        o.receiver < 0 || o.receiver >= static_cast<int>(subsystems.size()))
      throw Error("scenario: delay override indices out of range");
    if (o.age < 1) throw Error("scenario: delay override age must be >= 1");
  }
}

namespace {

struct Registry {
  struct Entry {
    MessageRecord record;
    dmpc::PeerMessage payload;
    bool delivered = false;  // visible at the receiver
  };
  std::vector<Entry> entries;  // index == message id

  long add(int sender, int receiver, int sent, dmpc::PeerMessage payload) {
    MessageRecord r;
    r.id = static_cast<long>(entries.size());
    r.sender = sender;
    r.receiver = receiver;
    r.sent_step = sent;
    entries.push_back({r, std::move(payload), false});
    return r.id;
  }
};

int pair_tau_bar(const ScenarioConfig& cfg, int receiver, int sender) {
  const auto& sub = cfg.subsystems[receiver];
  for (size_t p = 0; p < sub.predecessors.size(); ++p)
    if (sub.predecessors[p] == sender) return sub.pred_specs[p].tau_bar;
  return 1;
}

const DelayOverride* find_override(const ScenarioConfig& cfg, int sender,
                                   int receiver, int sent_step) {
  for (const auto& o : cfg.delay_overrides)
    if (o.sender == sender && o.receiver == receiver &&
        sent_step >= o.sent_from && sent_step <= o.sent_to)
      return &o;
  return nullptr;
}

}  // namespace

TraceLog run(const ScenarioConfig& config) {
  config.validate();
  TraceLog trace;
  const int H = config.horizon;
  const int n_sub = static_cast<int>(config.subsystems.size());
  auto graph = config.info_graph();
  auto order = graph.topological_order();

  rpnc::SchedulerConfig sched;
  sched.phi = config.phi;
  sched.horizon = H;
  sched.relax_processability = config.relax_processability;
  rpnc::NetworkController net(config.topology, config.chains, sched);
  Rng net_rng(Rng::derive(config.seed, 0x6E6574ULL));

  std::vector<dmpc::SubsystemController> controllers;
  std::vector<Eigen::VectorXd> x;
  for (int i = 0; i < n_sub; ++i) {
    const auto& s = config.subsystems[i];
    dmpc::ControllerConfig cc = s.controller;
    cc.horizon = H;
    controllers.emplace_back(i, s.plant, s.pred_specs, s.tracking, cc,
                             !graph.followers[i].empty());
    x.push_back(s.x0);
  }

  Registry registry;
  // newest visible message per (receiver, sender): message id or -1
  std::map<std::pair<int, int>, long> inbox;
  // in-flight promise per message id (effective, override applied)
  std::map<long, int> promised;
  std::vector<rpnc::Request> pending;
  std::vector<long> holding;  // arrived but not yet visible

  auto effective_promise = [&](long id, int net_promise) {
    const auto& rec = registry.entries[static_cast<size_t>(id)].record;
    if (const auto* ov =
            find_override(config, rec.sender, rec.receiver, rec.sent_step))
      return rec.sent_step + ov->age;
    return net_promise;
  };

  for (int k = 0; k < config.duration; ++k) {
    // 1. network scheduling, transport and promises
    rpnc::PolicyStepResult pol;
    try {
      pol = net.policy_step(pending, net_rng);
    } catch (const Error& e) {
      trace.fault = true;
      trace.fault_step = k;
      trace.fault_what = e.what();
      break;
    }
    pending.clear();
    for (const auto& ev : pol.events)
      if (ev.payload >= 0) {
        trace.events.push_back({k, ev.payload, ev.kind});
        if (ev.kind == "deactivated" || ev.kind == "released" ||
            ev.kind == "reset")
          registry.entries[static_cast<size_t>(ev.payload)]
              .record.ledger_active = false;
      }
    for (const auto& pr : pol.promises) {
      if (pr.payload < 0) continue;
      int eff = effective_promise(pr.payload, pr.promised_step);
      promised[pr.payload] = eff;
      registry.entries[static_cast<size_t>(pr.payload)].record.promised_step =
          eff;
    }
    for (size_t a = 0; a < pol.arrivals.size(); ++a) {
      long id = pol.arrival_payloads[a];
      if (id < 0) continue;
      auto& entry = registry.entries[static_cast<size_t>(id)];
      entry.record.network_arrival = k;
      holding.push_back(id);
    }
    // release messages that became visible (worst-case mode and pinned
    // windows hold deliveries back to the declared age)
    auto deliver = [&](long id) {
      auto& entry = registry.entries[static_cast<size_t>(id)];
      entry.record.visible_step = k;
      entry.delivered = true;
      promised.erase(id);
      auto key = std::make_pair(entry.record.receiver, entry.record.sender);
      auto it = inbox.find(key);
      // newer information may overtake; stale arrivals are discarded
      if (it == inbox.end() ||
          registry.entries[static_cast<size_t>(it->second)].record.sent_step <
              entry.record.sent_step)
        inbox[key] = id;
    };
    std::vector<long> still_holding;
    for (long id : holding) {
      auto& entry = registry.entries[static_cast<size_t>(id)];
      int visible_at = entry.record.network_arrival;
      // the baseline reads information at the declared worst-case age
      if (config.mode == Mode::WorstCase)
        visible_at = std::max(
            visible_at,
            entry.record.sent_step + pair_tau_bar(config, entry.record.receiver,
                                                  entry.record.sender));
      if (const auto* ov = find_override(config, entry.record.sender,
                                         entry.record.receiver,
                                         entry.record.sent_step))
        visible_at = std::max(visible_at, entry.record.sent_step + ov->age);
      if (visible_at > k) {
        still_holding.push_back(id);
        continue;
      }
      deliver(id);
    }
    holding.swap(still_holding);
    {
      // when arrivals gapped and a hold would leave a receiver staler than
      // the declared worst case, fall back to the oldest newer packet on
      // hand instead of starving past the horizon
      std::vector<long> keep;
      for (int i = 0; i < n_sub; ++i) {
        for (int j : graph.predecessors[i]) {
          int tolerated = pair_tau_bar(config, i, j);
          for (const auto& ov : config.delay_overrides)
            if (ov.sender == j && ov.receiver == i && ov.sent_from <= k &&
                k <= ov.sent_to + ov.age)
              tolerated = std::max(tolerated, ov.age);
          auto it = inbox.find({i, j});
          int newest_sent = it == inbox.end()
                                ? -1
                                : registry.entries[static_cast<size_t>(it->second)]
                                      .record.sent_step;
          if (it != inbox.end() && k - newest_sent <= tolerated) continue;
          // smallest freshness injection that heals the slot sequence
          long best = -1;
          int best_sent = std::numeric_limits<int>::max();
          for (long id : holding) {
            const auto& r = registry.entries[static_cast<size_t>(id)].record;
            if (r.receiver != i || r.sender != j) continue;
            if (r.sent_step > newest_sent && r.sent_step < best_sent) {
              best_sent = r.sent_step;
              best = id;
            }
          }
          if (best >= 0) deliver(best);
        }
      }
      for (long id : holding)
        if (!registry.entries[static_cast<size_t>(id)].delivered)
          keep.push_back(id);
      holding.swap(keep);
    }

    // a message that became someone's newest supersedes older undelivered
    // ones of the same pair; keeping those packets in the air would only
    // clog the network without ever being read
    for (const auto& [key, mid] : inbox) {
      const auto& newest = registry.entries[static_cast<size_t>(mid)].record;
      for (auto& entry : registry.entries) {
        auto& r = entry.record;
        if (r.sender != newest.sender || r.receiver != newest.receiver)
          continue;
        if (r.sent_step >= newest.sent_step || r.network_arrival >= 0)
          continue;
        if (net.cancel_by_payload(r.id)) {
          r.ledger_active = false;
          promised.erase(r.id);
          trace.events.push_back({k, r.id, "superseded"});
        }
      }
    }

    // 2. delay forecasts for this step (instantly available)
    forecast::WeightedDelayGraph delay_graph =
        forecast::build_delay_graph(config.topology, pol.profile);
    auto tau_for_send = [&](int sender, int receiver, int sent_step) {
      // a message handed over at the end of step s enters the queueing
      // network at s + 1; the graph delay from there equals its age when it
      // becomes visible
      if (config.mode == Mode::WorstCase)
        return pair_tau_bar(config, receiver, sender);
      if (const auto* ov = find_override(config, sender, receiver, sent_step))
        return ov->age;
      int k0 = sent_step + 1 - k;
      if (k0 < 0) k0 = 0;
      int tau = forecast::shortest_delay(delay_graph,
                                         config.subsystems[sender].node,
                                         config.subsystems[receiver].node, k0);
      return tau;
    };

    // 3. controllers in information order
    bool faulted = false;
    std::vector<Eigen::VectorXd> inputs(n_sub);
    std::vector<dmpc::PeerMessage> outgoing(n_sub);
    for (int i : order) {
      const auto& sub = config.subsystems[i];
      std::vector<dmpc::SubsystemController::PredecessorInput> pred_inputs;
      std::vector<int> rec_ages, rec_promises;
      for (size_t p = 0; p < sub.predecessors.size(); ++p) {
        int j = sub.predecessors[p];
        int tau_bar = sub.pred_specs[p].tau_bar;
        dmpc::SubsystemController::PredecessorInput in;
        auto it = inbox.find({i, j});
        if (it != inbox.end()) {
          const auto& entry = registry.entries[static_cast<size_t>(it->second)];
          in.newest = entry.payload;
          in.age = k - entry.record.sent_step;
        } else {
          // initial handshake: everyone knows everyone's initial state
          in.newest.sender = j;
          in.newest.step = 0;
          in.newest.state = config.subsystems[j].x0;
          in.newest.plan =
              Eigen::VectorXd::Zero(H * config.subsystems[j].plant.nu());
          in.newest.deviation_bound = Eigen::VectorXd::Constant(
              H * config.subsystems[j].plant.nu(),
              config.subsystems[j].controller.flexibility);
          in.age = k;
        }
        // predicted information ages over the horizon
        int next_promise = -1;
        in.predicted_ages.assign(H, 0);
        for (int l = 0; l < H; ++l) {
          int best = in.age + l;
          if (config.mode == Mode::WorstCase) {
            best = tau_bar;
          } else {
            for (const auto& [mid, pstep] : promised) {
              const auto& rec = registry.entries[static_cast<size_t>(mid)].record;
              if (rec.sender != j || rec.receiver != i) continue;
              if (l == 0 && (next_promise < 0 || pstep < next_promise))
                next_promise = pstep;
              if (pstep <= k + l) best = std::min(best, k + l - rec.sent_step);
            }
            for (int s = k; s <= k + l; ++s) {
              int tau = tau_for_send(j, i, s);
              if (forecast::is_unreachable(tau)) continue;
              if (s + tau <= k + l) best = std::min(best, k + l - s);
            }
            best = std::min(best, tau_bar);
          }
          in.predicted_ages[l] = std::max(0, best);
        }
        in.predicted_ages[0] = in.age;
        rec_ages.push_back(in.age);
        rec_promises.push_back(next_promise);
        pred_inputs.push_back(std::move(in));
      }
      int tau_out = 0;
      for (int f : graph.followers[i]) {
        int tau = config.mode == Mode::WorstCase ? pair_tau_bar(config, f, i)
                                                 : tau_for_send(i, f, k);
        if (!forecast::is_unreachable(tau)) tau_out = std::max(tau_out, tau);
      }

      auto res = controllers[i].step(k, x[i], pred_inputs, tau_out,
                                     config.mode == Mode::Predicted);
      if (!res.ok) {
        trace.fault = true;
        trace.fault_step = k;
        trace.fault_what = sub.name + ": " + res.fault;
        faulted = true;
        break;
      }
      inputs[i] = res.input;
      outgoing[i] = res.message;

      StepRecord rec;
      rec.step = k;
      rec.subsystem = i;
      rec.state = x[i];
      rec.input = res.input;
      rec.state_ref = controllers[i].reference_state(k);
      rec.input_ref = controllers[i].reference_input(k);
      rec.stage1_first = res.stage1_first;
      rec.pred_ages = rec_ages;
      rec.pred_promises = rec_promises;
      rec.stage1_objective = res.stage1_objective;
      rec.stage2_objective = res.stage2_objective;
      trace.records.push_back(std::move(rec));
    }
    if (faulted) break;

    // containment audit: each applied input against the newest tube every
    // receiver currently relies on
    for (const auto& [key, mid] : inbox) {
      const auto& entry = registry.entries[static_cast<size_t>(mid)];
      int sender = entry.record.sender;
      int idx = k - entry.record.sent_step;
      int nu = config.subsystems[sender].plant.nu();
      if (idx < 1 || idx > H - 1) continue;
      for (int m = 0; m < nu; ++m) {
        double dev = std::abs(inputs[sender](m) -
                              entry.payload.plan(idx * nu + m)) -
                     entry.payload.deviation_bound(idx * nu + m);
        trace.max_containment_violation =
            std::max(trace.max_containment_violation, dev);
        ++trace.containment_checks;
      }
    }

    // 4. outgoing plans become new communication requests; an older message
    // still waiting at its origin is obsolete the moment a newer one exists
    for (int i : order) {
      for (int f : graph.followers[i]) {
        int origin = config.subsystems[i].node;
        for (auto& entry : registry.entries) {
          auto& r = entry.record;
          if (r.sender != i || r.receiver != f) continue;
          if (r.network_arrival >= 0 || r.visible_step >= 0) continue;
          auto loc = net.location_by_payload(r.id);
          if (loc && *loc == origin && net.cancel_by_payload(r.id)) {
            r.ledger_active = false;
            promised.erase(r.id);
            trace.events.push_back({k, r.id, "superseded"});
          }
        }
        long id = registry.add(i, f, k, outgoing[i]);
        pending.push_back(
            {config.subsystems[i].node, config.subsystems[f].node, id});
      }
    }

    // 5. plants advance
    for (int i = 0; i < n_sub; ++i)
      x[i] = config.subsystems[i].plant.A * x[i] +
             config.subsystems[i].plant.B * inputs[i];
  }

  for (const auto& e : registry.entries) trace.messages.push_back(e.record);
  return trace;
}

MetricsReport metrics(const TraceLog& trace, const ScenarioConfig& config) {
  const int n_sub = static_cast<int>(config.subsystems.size());
  MetricsReport report;
  report.per_subsystem.assign(n_sub, 0.0);

  // realized states per (step, subsystem)
  std::map<std::pair<int, int>, const StepRecord*> at;
  for (const auto& r : trace.records) at[{r.step, r.subsystem}] = &r;

  for (const auto& r : trace.records) {
    const auto& sub = config.subsystems[r.subsystem];
    double cost = 0.0;
    if (sub.tracking.qx_self.size() > 0) {
      Eigen::VectorXd e = r.state - r.state_ref;
      for (int d = 0; d < e.size(); ++d)
        cost += sub.tracking.qx_self(d) * e(d) * e(d);
    }
    if (sub.tracking.qu_self.size() > 0) {
      Eigen::VectorXd e = r.input - r.input_ref;
      for (int d = 0; d < e.size(); ++d)
        cost += sub.tracking.qu_self(d) * e(d) * e(d);
    }
    for (size_t p = 0; p < sub.predecessors.size(); ++p) {
      if (p >= sub.tracking.qx_diff.size()) break;
      const auto& w = sub.tracking.qx_diff[p];
      if (w.size() == 0) continue;
      auto it = at.find({r.step, sub.predecessors[p]});
      if (it == at.end()) continue;
      Eigen::VectorXd diff = r.state - it->second->state;
      if (sub.pred_specs[p].offset.size() > 0) diff -= sub.pred_specs[p].offset;
      for (int d = 0; d < diff.size(); ++d)
        cost += w(d) * diff(d) * diff(d);
    }
    report.per_subsystem[r.subsystem] += cost;
  }
  for (double c : report.per_subsystem) report.total += c;
  return report;
}

}  // namespace cpn::cosim
