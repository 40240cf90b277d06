#include "nse/keyvalue.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace nse {
namespace {

constexpr std::size_t kChunk = 32;

void symmetrize(Matrix& m) { m = 0.5 * (m + m.transpose()).eval(); }

}  // namespace

const Matrix& CovarianceStore::moment(int layer) const {
  auto it = moments.find(layer);
  if (it == moments.end()) throw InputError("covariance store has no layer " + std::to_string(layer));
  return it->second;
}

Matrix CovarianceStore::preservation(int layer, std::span<const int> neurons) const {
  const Matrix& m = moment(layer);
  const auto n = static_cast<Eigen::Index>(neurons.size());
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = lambda * m(neurons[static_cast<std::size_t>(i)], neurons[static_cast<std::size_t>(j)]);
  return out;
}

Matrix CovarianceStore::preservation(int layer) const { return lambda * moment(layer); }

std::vector<int> CovarianceStore::layers() const {
  std::vector<int> out;
  for (const auto& [l, m] : moments) out.push_back(l);
  return out;
}

Vector extract_key(const ModelState& model, const Prompt& prompt, int layer) {
  if (prompt.subject_end < 0 || prompt.subject_end >= static_cast<int>(prompt.tokens.size()))
    throw InputError("extract_key: subject span outside the prompt");
  ForwardTrace tr = forward(model, prompt.tokens);
  return key_at(tr, layer, prompt.subject_end);
}

Vector extract_key(const ModelState& model, const FactRecord& fact, int layer) {
  return extract_key(model, fact.prompt(), layer);
}

CovarianceStore estimate_covariance(const ModelState& model, const std::vector<std::vector<int>>& prompts,
                                    std::span<const int> layers, std::size_t sample_cap, double lambda) {
  if (!(lambda > 0.0)) throw InputError("estimate_covariance: lambda must be positive");
  if (layers.empty()) throw InputError("estimate_covariance: no layers requested");
  std::vector<std::vector<int>> chosen;
  std::size_t n = 0;
  for (const auto& p : prompts) {
    if (p.empty()) continue;
    if (sample_cap && n >= sample_cap) break;
    std::size_t take = sample_cap ? std::min(p.size(), sample_cap - n) : p.size();
    chosen.emplace_back(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(take));
    n += take;
  }
  if (n == 0) throw InputError("estimate_covariance: zero samples");
  std::sort(chosen.begin(), chosen.end());

  CovarianceStore store;
  store.lambda = lambda;
  store.sample_count = n;
  for (int l : layers) {
    if (l < 0 || l >= model.config.n_layers) throw InputError("estimate_covariance: layer out of range");
    store.moments[l] = Matrix::Zero(model.config.d_ffn, model.config.d_ffn);
  }
  for (std::size_t start = 0; start < chosen.size(); start += kChunk) {
    std::vector<std::vector<int>> chunk(chosen.begin() + static_cast<std::ptrdiff_t>(start),
                                        chosen.begin() + static_cast<std::ptrdiff_t>(std::min(chosen.size(), start + kChunk)));
    ForwardTrace tr = forward_batch(model, chunk);
    for (int l : layers) {
      const Matrix& k = tr.layers[static_cast<std::size_t>(l)].key;
      store.moments[l].noalias() += k.transpose() * k;
    }
  }
  for (auto& [l, m] : store.moments) {
    m /= static_cast<double>(n);
    symmetrize(m);
  }
  return store;
}

void absorb_new_knowledge(CovarianceStore& store, const KeySet& keyset) {
  auto it = store.moments.find(keyset.layer);
  if (it == store.moments.end()) throw InputError("absorb_new_knowledge: layer not in store");
  if (keyset.keys.cols() == 0) return;
  if (keyset.keys.rows() != it->second.rows()) throw InputError("absorb_new_knowledge: key dimension mismatch");
  if (!keyset.keys.allFinite()) throw NumericError("absorb_new_knowledge: non-finite keys");
  it->second.noalias() += (keyset.keys * keyset.keys.transpose()) / store.lambda;
  symmetrize(it->second);
}

void save_covariance(const std::string& dir, const CovarianceStore& store, const std::string& corpus_hash,
                     const std::string& model_hash) {
  std::filesystem::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [l, m] : store.moments) {
    save_matrix(dir + "/cov_layer_" + std::to_string(l) + ".bin", m);
    layers.push_back(l);
  }
  nlohmann::json manifest{{"layers", layers},
                          {"sample_count", store.sample_count},
                          {"lambda", store.lambda},
                          {"corpus_hash", corpus_hash},
                          {"model_hash", model_hash}};
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw Error("cannot write covariance manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

CovarianceStore load_covariance(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw InputError("missing covariance manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(in);
  CovarianceStore store;
  store.sample_count = manifest.at("sample_count").get<std::size_t>();
  store.lambda = manifest.at("lambda").get<double>();
  for (int l : manifest.at("layers").get<std::vector<int>>())
    store.moments[l] = load_matrix(dir + "/cov_layer_" + std::to_string(l) + ".bin");
  return store;
}

}  // namespace nse
