#include "cpn/scenario.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace cpn::cli {

namespace {

using nlohmann::json;

Eigen::VectorXd to_vector(const json& j, const std::string& field) {
  if (!j.is_array()) throw Error("scenario: " + field + " must be an array");
  Eigen::VectorXd v(static_cast<int>(j.size()));
  for (size_t i = 0; i < j.size(); ++i) v(static_cast<int>(i)) = j[i].get<double>();
  return v;
}

Eigen::MatrixXd to_matrix(const json& j, const std::string& field) {
  if (!j.is_array() || j.empty())
    throw Error("scenario: " + field + " must be a nonempty array of rows");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(j[r].size()) != cols)
      throw Error("scenario: ragged matrix in " + field);
    for (int c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

dmpc::ReferenceSignal to_reference(const json& j, const std::string& field) {
  dmpc::ReferenceSignal sig;
  for (const auto& seg : j) {
    dmpc::ReferenceSignal::Segment s;
    s.from = seg.at("from").get<int>();
    s.value = to_vector(seg.at("value"), field + ".value");
    s.announce = seg.value("announce", s.from);
    sig.segments.push_back(std::move(s));
  }
  return sig;
}

}  // namespace

LoadedScenario parse_scenario(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw Error(std::string("scenario: parse error: ") + e.what());
  }
  if (j.value("schema_version", 0) != 1)
    throw Error("scenario: unsupported schema_version (expected 1)");

  LoadedScenario out;
  auto& cfg = out.config;
  cfg.name = j.value("name", "scenario");
  cfg.seed = j.value("seed", 1ULL);
  cfg.duration = j.value("duration", 0);
  cfg.horizon = j.value("horizon", 5);
  cfg.phi = j.value("phi", 0.9);
  std::string mode = j.value("mode", "predicted");
  if (mode == "predicted") cfg.mode = cosim::Mode::Predicted;
  else if (mode == "worstcase") cfg.mode = cosim::Mode::WorstCase;
  else throw Error("scenario: mode must be predicted|worstcase");

  const auto& net = j.at("network");
  std::map<std::string, int> node_index;
  for (const auto& name : net.at("entities")) {
    node_index[name.get<std::string>()] =
        static_cast<int>(out.entity_names.size());
    out.entity_names.push_back(name.get<std::string>());
  }
  cfg.topology.entity_count = static_cast<int>(out.entity_names.size());
  auto node_of = [&](const json& v, const std::string& where) {
    auto it = node_index.find(v.get<std::string>());
    if (it == node_index.end())
      throw Error("scenario: unknown entity in " + where);
    return it->second;
  };
  for (const auto& link : net.at("links")) {
    int id = static_cast<int>(cfg.topology.links.size());
    int to = node_of(link.at("to"), "links");
    if (link.contains("from") && !link.at("from").is_null()) {
      cfg.topology.links.push_back(netmodel::LinkSpec::transfer(
          id, node_of(link.at("from"), "links"), to, cfg.topology.entity_count));
    } else {
      cfg.topology.links.push_back(
          netmodel::LinkSpec::injection(id, to, cfg.topology.entity_count));
    }
    netmodel::LinkStateChain chain;
    if (link.contains("chain")) {
      const auto& c = link.at("chain");
      chain.transition = to_matrix(c.at("transition"), "chain.transition");
      chain.success_prob = to_vector(c.at("success"), "chain.success");
      chain.current_state = c.value("initial", 0);
    } else {
      chain = netmodel::LinkStateChain::constant(1.0);
    }
    cfg.chains.push_back(std::move(chain));
    std::vector<int> reps;
    if (link.contains("repetitions"))
      for (const auto& r : link.at("repetitions")) reps.push_back(r.get<int>());
    out.link_repetitions.push_back(std::move(reps));
  }
  if (net.contains("constituency")) {
    auto m = to_matrix(net.at("constituency"), "constituency");
    cfg.topology.constituency = m.cast<int>();
  } else {
    cfg.topology.constituency = Eigen::MatrixXi::Identity(
        cfg.topology.num_links(), cfg.topology.num_links());
  }
  cfg.relax_processability = net.value("relax_processability", false);

  std::map<std::string, int> sub_index;
  if (j.contains("subsystems")) {
    for (const auto& s : j.at("subsystems"))
      sub_index[s.at("name").get<std::string>()] =
          static_cast<int>(sub_index.size());
    for (const auto& s : j.at("subsystems")) {
      cosim::SubsystemConfig sub;
      sub.name = s.at("name").get<std::string>();
      sub.node = node_of(s.at("node"), "subsystems.node");
      sub.plant.A = to_matrix(s.at("A"), "A");
      sub.plant.B = to_matrix(s.at("B"), "B");
      sub.plant.input_lower = to_vector(s.at("input_lower"), "input_lower");
      sub.plant.input_upper = to_vector(s.at("input_upper"), "input_upper");
      if (s.contains("state_rows")) {
        sub.plant.state_matrix = to_matrix(s.at("state_rows"), "state_rows");
        sub.plant.state_bound = to_vector(s.at("state_bound"), "state_bound");
      } else {
        sub.plant.state_matrix.resize(0, sub.plant.nx());
        sub.plant.state_bound.resize(0);
      }
      sub.x0 = s.contains("x0") ? to_vector(s.at("x0"), "x0")
                                : Eigen::VectorXd::Zero(sub.plant.nx());

      auto& tr = sub.tracking;
      if (s.contains("qx_self")) tr.qx_self = to_vector(s.at("qx_self"), "qx_self");
      if (s.contains("qt_self")) tr.qt_self = to_vector(s.at("qt_self"), "qt_self");
      if (s.contains("qu_self")) tr.qu_self = to_vector(s.at("qu_self"), "qu_self");
      tr.qu_match = s.value("qu_match", 0.0);
      if (s.contains("input_ref"))
        tr.input_ref = to_reference(s.at("input_ref"), "input_ref");
      if (s.contains("state_ref"))
        tr.state_ref = to_reference(s.at("state_ref"), "state_ref");
      tr.state_ref_from_input = s.value("state_ref_from_input", false);
      if (s.contains("x_ref0")) tr.x_ref0 = to_vector(s.at("x_ref0"), "x_ref0");

      auto& cc = sub.controller;
      cc.horizon = cfg.horizon;
      cc.flexibility = s.value("flexibility", 1.0);
      cc.balance_weight = s.value("balance_weight", 1.0);
      cc.tighten_weight = s.value("tighten_weight", 1.0);
      cc.tail_balance_weight = s.value("tail_balance_weight", 1.0);
      cc.eps_reg = s.value("eps_reg", 1e-8);
      cc.soft_state_weight = s.value("soft_state_weight", 0.0);

      if (s.contains("predecessors")) {
        for (const auto& p : s.at("predecessors")) {
          auto it = sub_index.find(p.at("name").get<std::string>());
          if (it == sub_index.end())
            throw Error("scenario: unknown predecessor of " + sub.name);
          sub.predecessors.push_back(it->second);
          dmpc::PredecessorSpec spec;
          spec.tau_bar = p.value("tau_bar", 1);
          if (p.contains("offset"))
            spec.offset = to_vector(p.at("offset"), "offset");
          if (p.contains("diff_lower")) {
            spec.diff_lower = to_vector(p.at("diff_lower"), "diff_lower");
            spec.diff_upper = to_vector(p.at("diff_upper"), "diff_upper");
          }
          sub.pred_specs.push_back(std::move(spec));
          tr.qx_diff.push_back(p.contains("qx_diff")
                                   ? to_vector(p.at("qx_diff"), "qx_diff")
                                   : Eigen::VectorXd());
          tr.qt_diff.push_back(p.contains("qt_diff")
                                   ? to_vector(p.at("qt_diff"), "qt_diff")
                                   : Eigen::VectorXd());
        }
      }
      cfg.subsystems.push_back(std::move(sub));
    }
    // predecessor dynamics come from the referenced subsystem's plant
    for (auto& sub : cfg.subsystems)
      for (size_t p = 0; p < sub.predecessors.size(); ++p) {
        sub.pred_specs[p].model = cfg.subsystems[sub.predecessors[p]].plant;
        if (sub.pred_specs[p].offset.size() == 0)
          sub.pred_specs[p].offset =
              Eigen::VectorXd::Zero(sub.pred_specs[p].model.nx());
      }
  }

  if (j.contains("delay_overrides")) {
    for (const auto& o : j.at("delay_overrides")) {
      cosim::DelayOverride ov;
      auto s = sub_index.find(o.at("sender").get<std::string>());
      auto r = sub_index.find(o.at("receiver").get<std::string>());
      if (s == sub_index.end() || r == sub_index.end())
        throw Error("scenario: delay override names unknown");
      ov.sender = s->second;
      ov.receiver = r->second;
      ov.sent_from = o.at("sent_from").get<int>();
      ov.sent_to = o.at("sent_to").get<int>();
      ov.age = o.at("age").get<int>();
      cfg.delay_overrides.push_back(ov);
    }
  }
  if (j.contains("forecast_pairs")) {
    for (const auto& p : j.at("forecast_pairs")) {
      if (!p.is_array() || p.size() != 2)
        throw Error("scenario: forecast_pairs entries must be [from, to]");
      cfg.forecast_pairs.emplace_back(node_of(p[0], "forecast_pairs"),
                                      node_of(p[1], "forecast_pairs"));
    }
  }
  cfg.validate();
  return out;
}

LoadedScenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("scenario: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

}  // namespace cpn::cli
