#include "nse/value_opt.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <utility>

namespace nse {
namespace {

// Swaps the snapshot's W_out matrices into the model and swaps them back on
// destruction.
class RewoundWeights {
 public:
  RewoundWeights(ModelState& model, const WeightSnapshot* snapshot) : model_(model) {
    if (!snapshot) return;
    for (const auto& [layer, w] : snapshot->w_out) {
      if (layer < 0 || layer >= model.config.n_layers) throw InputError("snapshot layer out of range");
      live_.emplace_back(layer, w);
      std::swap(live_.back().second, model.layers[static_cast<std::size_t>(layer)].w_out);
    }
  }
  ~RewoundWeights() {
    for (auto& [layer, w] : live_) std::swap(w, model_.layers[static_cast<std::size_t>(layer)].w_out);
  }
  RewoundWeights(const RewoundWeights&) = delete;
  RewoundWeights& operator=(const RewoundWeights&) = delete;

 private:
  ModelState& model_;
  std::vector<std::pair<int, Matrix>> live_;
};

ValueTarget optimize(const ModelState& model, const FactRecord& fact, int l0, const OptConfig& opt) {
  Prompt prompt = fact.prompt();
  if (fact.object.empty()) throw InputError("compute_z: fact has empty object");
  auto tf = teacher_forced(prompt.tokens, fact.object);
  if (static_cast<int>(tf.input.size()) > model.config.context_len) throw InputError("compute_z: prompt does not fit context");
  InjectionSite site{l0, prompt.subject_end};

  ValueTarget out;
  out.fact_id = fact.id;
  out.layer = l0;
  out.h_original = forward(model, prompt.tokens).hidden(l0, prompt.subject_end);
  const double h_norm = out.h_original.norm();
  const double max_norm = opt.clamp_factor * h_norm;

  Vector delta = Vector::Zero(model.config.d_model);
  InjectionGradient cur = grad_wrt_injection(model, tf.input, site, delta, tf.targets);
  if (!std::isfinite(cur.nll)) throw NumericError("compute_z: non-finite loss for " + fact.id);
  out.nll_trace.push_back(cur.nll);

  for (int step = 0; step < opt.steps && cur.nll > opt.nll_target; ++step) {
    double lr = opt.lr;
    bool accepted = false;
    for (int halving = 0; halving <= opt.max_halvings; ++halving, lr *= 0.5) {
      Vector cand = delta - lr * cur.grad;
      if (opt.clamp_norm && cand.norm() > max_norm) cand *= max_norm / cand.norm();
      InjectionGradient next = grad_wrt_injection(model, tf.input, site, cand, tf.targets);
      if (!std::isfinite(next.nll)) throw NumericError("compute_z: non-finite loss for " + fact.id);
      if (next.nll <= cur.nll) {
        delta = std::move(cand);
        cur = std::move(next);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    out.steps = step + 1;
    out.nll_trace.push_back(cur.nll);
  }
  out.final_nll = cur.nll;
  out.converged = cur.nll <= opt.nll_target;
  out.z = out.h_original + delta;
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const OptConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"lr", c.lr},
                     {"nll_target", c.nll_target},
                     {"clamp_norm", c.clamp_norm},
                     {"clamp_factor", c.clamp_factor},
                     {"max_halvings", c.max_halvings}};
}

void from_json(const nlohmann::json& j, OptConfig& c) {
  OptConfig d;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.nll_target = j.value("nll_target", d.nll_target);
  c.clamp_norm = j.value("clamp_norm", d.clamp_norm);
  c.clamp_factor = j.value("clamp_factor", d.clamp_factor);
  c.max_halvings = j.value("max_halvings", d.max_halvings);
}

std::uint64_t opt_config_hash(const OptConfig& c, int layer) {
  std::string s = nlohmann::json(c).dump() + "@" + std::to_string(layer);
  return hash_bytes(s.data(), s.size());
}

WeightSnapshot snapshot_weights(const ModelState& model, std::span<const int> layers) {
  if (model.edit_generation != 0) throw StateError("snapshot_weights: model has already been edited");
  WeightSnapshot snap;
  for (int l : layers) {
    if (l < 0 || l >= model.config.n_layers) throw InputError("snapshot_weights: layer out of range");
    snap.w_out[l] = model.layers[static_cast<std::size_t>(l)].w_out;
  }
  snap.pristine_hash = model_hash(model);
  return snap;
}

void restore_snapshot(ModelState& model, const WeightSnapshot& snapshot) {
  for (const auto& [l, w] : snapshot.w_out) model.layers[static_cast<std::size_t>(l)].w_out = w;
  model.edit_generation = 0;
}

ValueTarget compute_z(ModelState& model, const WeightSnapshot* snapshot, const FactRecord& fact, int l0,
                      const OptConfig& opt) {
  if (l0 < 0 || l0 >= model.config.n_layers) throw InputError("compute_z: layer out of range");
  if (opt.steps < 0 || !(opt.lr > 0.0)) throw InputError("compute_z: invalid opt config");
  std::vector<std::uint64_t> before;
  if (snapshot)
    for (const auto& [l, w] : snapshot->w_out) before.push_back(checksum(model.layers[static_cast<std::size_t>(l)].w_out));

  ValueTarget out;
  {
    RewoundWeights guard(model, snapshot);
    out = optimize(model, fact, l0, opt);
  }

  if (snapshot) {
    std::size_t i = 0;
    for (const auto& [l, w] : snapshot->w_out)
      if (checksum(model.layers[static_cast<std::size_t>(l)].w_out) != before[i++])
        throw InvariantViolation("compute_z: live weights changed across a rewound computation");
  }
  return out;
}

TargetCache::TargetCache(std::string dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  std::ifstream in(dir_ + "/index.jsonl");
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      index_[j.at("key").get<std::string>()] = j;
    } catch (const nlohmann::json::exception&) {
      // unreadable index lines are dropped; their entries get recomputed
    }
  }
}

std::optional<ValueTarget> TargetCache::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  const auto& j = it->second;
  Matrix blob;
  try {
    blob = load_matrix(dir_ + "/" + key + ".bin");
  } catch (const Error& e) {
    throw CacheError(std::string("target cache blob unreadable: ") + e.what());
  }
  if (blob.cols() != 2 || !blob.allFinite()) throw CacheError("target cache blob malformed for " + key);
  ValueTarget t;
  t.fact_id = j.at("fact_id").get<std::string>();
  t.layer = j.at("layer").get<int>();
  t.converged = j.at("converged").get<bool>();
  t.final_nll = j.at("final_nll").get<double>();
  t.steps = j.at("steps").get<int>();
  t.nll_trace = j.at("nll_trace").get<std::vector<double>>();
  t.z = blob.col(0);
  t.h_original = blob.col(1);
  return t;
}

void TargetCache::put(const std::string& key, const ValueTarget& t) {
  Matrix blob(t.z.size(), 2);
  blob.col(0) = t.z;
  blob.col(1) = t.h_original;
  save_matrix(dir_ + "/" + key + ".bin", blob);
  nlohmann::json j{{"key", key},           {"fact_id", t.fact_id},     {"layer", t.layer},
                   {"converged", t.converged}, {"final_nll", t.final_nll}, {"steps", t.steps},
                   {"nll_trace", t.nll_trace}};
  index_[key] = j;
  std::ofstream out(dir_ + "/index.jsonl", std::ios::app);
  if (!out) throw CacheError("cannot append to target cache index in " + dir_);
  out << j.dump() << "\n";
}

std::string target_cache_key(const std::string& fact_id, std::uint64_t pristine_hash, const OptConfig& opt, int l0) {
  std::string s = fact_id + "|" + hex64(pristine_hash) + "|" + hex64(opt_config_hash(opt, l0));
  return "z_" + hex64(hash_bytes(s.data(), s.size()));
}

std::map<std::string, ValueTarget> precompute_targets(ModelState& model, const WeightSnapshot& snapshot,
                                                      const std::vector<FactRecord>& facts, int l0,
                                                      const OptConfig& opt, TargetCache* cache,
                                                      PrecomputeStats* stats) {
  PrecomputeStats local;
  std::map<std::string, ValueTarget> out;
  for (const auto& f : facts) {
    std::string key = target_cache_key(f.id, snapshot.pristine_hash, opt, l0);
    if (cache) {
      try {
        if (auto hit = cache->get(key)) {
          out[f.id] = std::move(*hit);
          ++local.hits;
          continue;
        }
      } catch (const CacheError&) {
        ++local.corrupt;
      }
    }
    ValueTarget t = compute_z(model, &snapshot, f, l0, opt);
    ++local.computed;
    if (cache) cache->put(key, t);
    out[f.id] = std::move(t);
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace nse
