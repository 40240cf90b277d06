#include "nse/editor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace nse {
namespace {

struct FactState {
  const FactRecord* fact = nullptr;
  const ValueTarget* target = nullptr;
  double residual = 0.0;
};

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Matrix select_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace

std::string to_string(EditMode mode) {
  switch (mode) {
    case EditMode::kNse:
      return "NSE";
    case EditMode::kMemit:
      return "MEMIT-baseline";
    case EditMode::kSingleLayer:
      return "single-layer-baseline";
  }
  return "unknown";
}

EditMode parse_edit_mode(const std::string& s) {
  if (s == "NSE" || s == "nse") return EditMode::kNse;
  if (s == "MEMIT-baseline" || s == "memit") return EditMode::kMemit;
  if (s == "single-layer-baseline" || s == "single-layer") return EditMode::kSingleLayer;
  throw InputError("unknown edit mode '" + s + "'");
}

void EditConfig::validate() const {
  if (layers.empty()) throw InputError("edit config: no edit layers");
  for (std::size_t i = 1; i < layers.size(); ++i)
    if (layers[i] != layers[i - 1] + 1) throw InputError("edit config: layers must be ascending and contiguous");
  if (layers.front() < 0) throw InputError("edit config: negative layer index");
  if (!(p > 0.0 && p <= 1.0)) throw InputError("edit config: p must lie in (0, 1]");
  if (!(alpha_lower > 0.0 && alpha_lower < alpha_upper)) throw InputError("edit config: need 0 < alpha_lower < alpha_upper");
  if (max_iterations < 1) throw InputError("edit config: max_iterations must be >= 1");
}

std::vector<int> EditConfig::effective_layers() const {
  if (mode == EditMode::kSingleLayer) return {l0()};
  return layers;
}

void to_json(nlohmann::json& j, const EditConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"p", c.p},
                     {"alpha_lower", c.alpha_lower},
                     {"alpha_upper", c.alpha_upper},
                     {"max_iterations", c.max_iterations},
                     {"mode", to_string(c.mode)},
                     {"rewind", c.rewind},
                     {"absorb", c.absorb}};
}

void from_json(const nlohmann::json& j, EditConfig& c) {
  EditConfig d;
  c.layers = j.value("layers", d.layers);
  c.p = j.value("p", d.p);
  c.alpha_lower = j.value("alpha_lower", d.alpha_lower);
  c.alpha_upper = j.value("alpha_upper", d.alpha_upper);
  c.max_iterations = j.value("max_iterations", d.max_iterations);
  c.mode = parse_edit_mode(j.value("mode", to_string(d.mode)));
  c.rewind = j.value("rewind", d.rewind);
  c.absorb = j.value("absorb", d.absorb);
}

void to_json(nlohmann::json& j, const EditRoundReport& r) {
  nlohmann::json its = nlohmann::json::array();
  for (const auto& s : r.iterations)
    its.push_back({{"pending", s.pending},
                   {"mean_residual", s.mean_residual},
                   {"max_residual", s.max_residual},
                   {"pending_mean_before", s.pending_mean_before},
                   {"pending_mean_after", s.pending_mean_after}});
  auto keyed = [](const auto& m) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : m) o[std::to_string(k)] = v;
    return o;
  };
  j = nlohmann::json{{"round", r.round},
                     {"initial_mean_residual", r.initial_mean_residual},
                     {"iterations", its},
                     {"successful", r.successful},
                     {"skipped", r.skipped},
                     {"pending", r.pending},
                     {"delta_norms", keyed(r.delta_norms)},
                     {"neuron_counts", keyed(r.neuron_counts)},
                     {"aborted", r.aborted},
                     {"error", r.error}};
}

void from_json(const nlohmann::json& j, EditRoundReport& r) {
  r.round = j.at("round").get<int>();
  r.initial_mean_residual = j.value("initial_mean_residual", 0.0);
  r.iterations.clear();
  for (const auto& s : j.at("iterations"))
    r.iterations.push_back({s.at("pending").get<int>(), s.at("mean_residual").get<double>(),
                            s.at("max_residual").get<double>(), s.value("pending_mean_before", 0.0),
                            s.value("pending_mean_after", 0.0)});
  r.successful = j.at("successful").get<std::vector<std::string>>();
  r.skipped = j.at("skipped").get<std::vector<std::string>>();
  r.pending = j.at("pending").get<std::vector<std::string>>();
  for (const auto& [k, v] : j.at("delta_norms").items()) r.delta_norms[std::stoi(k)] = v.get<std::vector<double>>();
  for (const auto& [k, v] : j.at("neuron_counts").items()) r.neuron_counts[std::stoi(k)] = v.get<std::vector<int>>();
  r.aborted = j.value("aborted", false);
  r.error = j.value("error", "");
}

NeuronSelection select_neurons(std::span<const double> scores, double p, int layer) {
  if (!(p > 0.0 && p <= 1.0)) throw InputError("select_neurons: p must lie in (0, 1]");
  if (scores.empty()) throw InputError("select_neurons: empty score vector");
  for (double q : scores)
    if (!(q >= 0.0) || !std::isfinite(q)) throw InputError("select_neurons: scores must be finite and non-negative");

  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });

  NeuronSelection sel;
  sel.layer = layer;
  for (int i : order) sel.total += scores[static_cast<std::size_t>(i)];
  if (!(sel.total > 0.0)) throw InputError("select_neurons: all scores are zero");
  if (p == 1.0) {
    for (int i : order) {
      if (scores[static_cast<std::size_t>(i)] == 0.0) break;
      sel.indices.push_back(i);
    }
    sel.coverage = sel.total;
    return sel;
  }
  const double need = p * sel.total;
  for (int i : order) {
    sel.indices.push_back(i);
    sel.coverage += scores[static_cast<std::size_t>(i)];
    if (sel.coverage >= need) break;
  }
  return sel;
}

NeuronSelection select_neurons(const Vector& scores, double p, int layer) {
  return select_neurons(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), p, layer);
}

Vector batch_scores(const Matrix& keys) {
  if (keys.cols() < 1) throw InputError("batch_scores: need at least one key");
  return keys.cwiseAbs().rowwise().sum();
}

EditDelta solve_residual_delta(const Matrix& k1, const Matrix& residual, const Matrix& c0, std::vector<int> indices,
                               int layer) {
  if (residual.cols() != k1.cols() || c0.rows() != k1.rows() || c0.cols() != k1.rows())
    throw InputError("solve_residual_delta: inconsistent shapes");
  if (!indices.empty() && static_cast<Eigen::Index>(indices.size()) != k1.rows())
    throw InputError("solve_residual_delta: index set does not match the key slice");
  Matrix c = c0 + k1 * k1.transpose();
  // Delta C = R K1^T  <=>  C Delta^T = K1 R^T (C symmetric)
  Matrix rhs = k1 * residual.transpose();
  SpdSolveResult solved = spd_solve(c, rhs);
  EditDelta out;
  out.layer = layer;
  out.delta = solved.solution.transpose();
  if (indices.empty()) {
    indices.resize(static_cast<std::size_t>(k1.rows()));
    std::iota(indices.begin(), indices.end(), 0);
  }
  out.indices = std::move(indices);
  return out;
}

EditDelta solve_neuron_delta(const Matrix& w, const Matrix& k1, const Matrix& v1, const Matrix& c0,
                             std::vector<int> indices, int layer) {
  if (w.cols() != k1.rows() || v1.rows() != w.rows() || v1.cols() != k1.cols())
    throw InputError("solve_neuron_delta: inconsistent shapes");
  return solve_residual_delta(k1, v1 - w * k1, c0, std::move(indices), layer);
}

EditDelta solve_full_delta(const Matrix& w, const Matrix& k1, const Matrix& v1, const Matrix& c0, int layer) {
  return solve_neuron_delta(w, k1, v1, c0, {}, layer);
}

Vector spread_residual(const Vector& z, const Vector& h_l0, int layer, int l0) {
  if (layer > l0) throw InputError("spread_residual: layer above l0");
  return (z - h_l0) / static_cast<double>(l0 - layer + 1);
}

void apply_delta(ModelState& model, EditDelta& d) {
  Matrix& w = model.layers.at(static_cast<std::size_t>(d.layer)).w_out;
  if (d.delta.rows() != w.rows() || d.delta.cols() != static_cast<Eigen::Index>(d.indices.size()))
    throw InputError("apply_delta: shape mismatch");
  if (!d.delta.allFinite()) throw NumericError("apply_delta: non-finite update");
  d.before = select_rows(w.transpose(), d.indices).transpose();
  for (std::size_t i = 0; i < d.indices.size(); ++i) w.col(d.indices[i]) += d.delta.col(static_cast<Eigen::Index>(i));
  ++model.edit_generation;
}

void revert_delta(ModelState& model, const EditDelta& d) {
  Matrix& w = model.layers.at(static_cast<std::size_t>(d.layer)).w_out;
  if (d.before.cols() == static_cast<Eigen::Index>(d.indices.size()) && d.before.rows() == w.rows()) {
    for (std::size_t i = 0; i < d.indices.size(); ++i) w.col(d.indices[i]) = d.before.col(static_cast<Eigen::Index>(i));
    return;
  }
  for (std::size_t i = 0; i < d.indices.size(); ++i) w.col(d.indices[i]) -= d.delta.col(static_cast<Eigen::Index>(i));
}

double residual_sq(const ModelState& model, const FactRecord& fact, const ValueTarget& target, int l0) {
  Prompt p = fact.prompt();
  ForwardTrace tr = forward(model, p.tokens);
  return (target.z - tr.hidden(l0, p.subject_end)).squaredNorm();
}

EditRoundReport edit_round(ModelState& model, const std::vector<FactRecord>& facts,
                           const std::map<std::string, ValueTarget>& targets, CovarianceStore& store,
                           const EditConfig& config, int round, const DeltaObserver& observer) {
  config.validate();
  const int l0 = config.l0();
  if (l0 >= model.config.n_layers) throw InputError("edit_round: edit layer beyond the model");
  const std::vector<int> layers = config.effective_layers();
  for (int l : layers)
    if (!store.has_layer(l)) throw InputError("edit_round: covariance store lacks layer " + std::to_string(l));

  EditRoundReport report;
  report.round = round;

  std::vector<FactState> states;
  for (const auto& f : facts) {
    auto it = targets.find(f.id);
    if (it == targets.end()) throw InputError("edit_round: no target for " + f.id);
    if (it->second.layer != l0) throw InputError("edit_round: target for " + f.id + " was computed at another layer");
    states.push_back({&f, &it->second, 0.0});
  }

  // Classification on the residual at round start.
  std::vector<std::size_t> active, pending;
  std::vector<double> initial;
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto& s = states[i];
    s.residual = residual_sq(model, *s.fact, *s.target, l0);
    if (config.uses_thresholds() && s.residual > config.alpha_upper) {
      report.skipped.push_back(s.fact->id);
      continue;
    }
    active.push_back(i);
    initial.push_back(s.residual);
    if (config.uses_thresholds() && s.residual < config.alpha_lower)
      report.successful.push_back(s.fact->id);
    else
      pending.push_back(i);
  }
  report.initial_mean_residual = mean_of(initial);

  // Latest key per (layer, fact) used in a solve; absorbed at the end.
  std::map<int, std::map<std::size_t, Vector>> used_keys;
  const double p = config.effective_p();

  for (int it = 0; it < config.effective_iterations() && !pending.empty(); ++it) {
    IterationStats stats;
    stats.pending = static_cast<int>(pending.size());
    {
      std::vector<double> before;
      for (std::size_t i : pending) before.push_back(states[i].residual);
      stats.pending_mean_before = mean_of(before);
    }

    for (int l : layers) {
      std::vector<std::vector<int>> prompts;
      for (std::size_t i : pending) prompts.push_back(states[i].fact->prompt().tokens);
      ForwardTrace tr = forward_batch(model, prompts);
      const auto m = static_cast<Eigen::Index>(pending.size());
      Matrix k1(model.config.d_ffn, m);
      Matrix resid(model.config.d_model, m);
      for (Eigen::Index c = 0; c < m; ++c) {
        const auto& st = states[pending[static_cast<std::size_t>(c)]];
        int tok = st.fact->subject_end;
        k1.col(c) = key_at(tr, l, tok, static_cast<std::size_t>(c));
        resid.col(c) = spread_residual(st.target->z, tr.hidden(l0, tok, static_cast<std::size_t>(c)), l, l0);
      }

      std::vector<int> idx;
      if (config.mode == EditMode::kNse) {
        NeuronSelection sel = select_neurons(batch_scores(k1), p, l);
        idx = sel.indices;
        std::sort(idx.begin(), idx.end());
      } else {
        idx.resize(static_cast<std::size_t>(model.config.d_ffn));
        std::iota(idx.begin(), idx.end(), 0);
      }

      // The selected slice takes this layer's whole share of the residual;
      // unselected neurons keep their contribution.
      Matrix k_hat = select_rows(k1, idx);
      EditDelta delta;
      try {
        delta = solve_residual_delta(k_hat, resid, store.preservation(l, idx), idx, l);
      } catch (const Error& e) {
        report.aborted = true;
        std::ostringstream msg;
        msg << "round " << round << " iteration " << it << " layer " << l << ": " << e.what();
        report.error = msg.str();
        for (std::size_t i : pending) report.pending.push_back(states[i].fact->id);
        throw EditAborted(report.error, report);
      }
      apply_delta(model, delta);
      for (Eigen::Index c = 0; c < m; ++c) used_keys[l][pending[static_cast<std::size_t>(c)]] = k1.col(c);
      report.delta_norms[l].push_back(delta.delta.norm());
      report.neuron_counts[l].push_back(static_cast<int>(idx.size()));
      report.selections[l].push_back(idx);
      if (observer) observer(it, delta);
    }

    std::vector<double> all, after;
    for (std::size_t i : active) {
      states[i].residual = residual_sq(model, *states[i].fact, *states[i].target, l0);
      all.push_back(states[i].residual);
    }
    for (std::size_t i : pending) after.push_back(states[i].residual);
    stats.mean_residual = mean_of(all);
    stats.max_residual = all.empty() ? 0.0 : *std::max_element(all.begin(), all.end());
    stats.pending_mean_after = mean_of(after);
    report.iterations.push_back(stats);

    std::vector<std::size_t> still;
    for (std::size_t i : pending) {
      if (states[i].residual < config.alpha_lower)
        report.successful.push_back(states[i].fact->id);
      else
        still.push_back(i);
    }
    pending = std::move(still);
  }
  for (std::size_t i : pending) report.pending.push_back(states[i].fact->id);

  if (config.effective_absorb()) {
    for (const auto& [l, by_fact] : used_keys) {
      KeySet ks;
      ks.layer = l;
      ks.keys.resize(model.config.d_ffn, static_cast<Eigen::Index>(by_fact.size()));
      Eigen::Index c = 0;
      for (const auto& [i, k] : by_fact) {
        ks.keys.col(c++) = k;
        ks.fact_ids.push_back(states[i].fact->id);
      }
      absorb_new_knowledge(store, ks);
    }
  }
  return report;
}

std::vector<EditRoundReport> run_sequential(ModelState& model, const std::vector<std::vector<FactRecord>>& rounds,
                                            CovarianceStore& store, const EditConfig& config,
                                            const SequentialOptions& options, int first_round) {
  config.validate();
  const bool rewind = config.effective_rewind();
  if (rewind && !options.snapshot) throw StateError("run_sequential: rewinding requires a weight snapshot");
  std::vector<EditRoundReport> reports;
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    int round = first_round + static_cast<int>(r);
    std::map<std::string, ValueTarget> targets;
    for (const auto& f : rounds[r]) {
      if (rewind && options.targets) {
        auto it = options.targets->find(f.id);
        if (it != options.targets->end()) {
          targets[f.id] = it->second;
          continue;
        }
      }
      targets[f.id] = compute_z(model, rewind ? options.snapshot : nullptr, f, config.l0(), options.opt);
    }
    try {
      reports.push_back(edit_round(model, rounds[r], targets, store, config, round, options.observer));
    } catch (const EditAborted& e) {
      reports.push_back(e.report);
      if (options.after_round) options.after_round(round, reports.back(), targets);
      break;
    }
    if (options.after_round) options.after_round(round, reports.back(), targets);
  }
  return reports;
}

}  // namespace nse
