#include "nse/run_config.hpp"

#include <fstream>

namespace nse {

void to_json(nlohmann::json& j, const ProtocolConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"n_rounds", c.n_rounds},
                     {"lambda", c.lambda},
                     {"cov_sample_cap", c.cov_sample_cap}};
}

void from_json(const nlohmann::json& j, ProtocolConfig& c) {
  ProtocolConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.n_rounds = j.value("n_rounds", d.n_rounds);
  c.lambda = j.value("lambda", d.lambda);
  c.cov_sample_cap = j.value("cov_sample_cap", d.cov_sample_cap);
}

void RunConfig::resolve() {
  corpus.seed = seed;
  train.seed = seed;
  if (corpus.context_len != model.context_len) corpus.context_len = model.context_len;
  validate();
}

void RunConfig::validate() const {
  if (schema_version != kRunConfigSchema)
    throw InputError("run config: unsupported schema_version " + std::to_string(schema_version));
  edit.validate();
  if (edit.l0() >= model.n_layers) throw InputError("run config: edit layer beyond the model depth");
  if (protocol.batch_size < 1 || protocol.n_rounds < 1) throw InputError("run config: batch_size and n_rounds must be >= 1");
  if (protocol.batch_size * protocol.n_rounds > corpus.n_edit)
    throw InputError("run config: protocol needs more edits than the corpus provides");
  if (!(protocol.lambda > 0.0)) throw InputError("run config: lambda must be positive");
  if (eval.gen_len < 10) throw InputError("run config: eval.gen_len must be at least 10");
  if (opt.steps < 0 || !(opt.lr > 0.0)) throw InputError("run config: invalid opt settings");
  if (train.max_steps < 1 || !(train.lr > 0.0) || train.batch_size < 1) throw InputError("run config: invalid train settings");
  if (out_dir.empty()) throw InputError("run config: empty out_dir");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json model = c.model;
  j = nlohmann::json{{"schema_version", c.schema_version},
                     {"preset", c.preset},
                     {"seed", c.seed},
                     {"model", model},
                     {"corpus", c.corpus},
                     {"train", c.train},
                     {"edit", c.edit},
                     {"opt", c.opt},
                     {"eval", c.eval},
                     {"protocol", c.protocol},
                     {"out_dir", c.out_dir}};
}

namespace {

template <class T>
T merged(const nlohmann::json& j, const char* key, const T& base) {
  if (!j.contains(key)) return base;
  nlohmann::json b = base;
  b.merge_patch(j.at(key));
  return b.get<T>();
}

}  // namespace

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig base = preset(j.value("preset", std::string("desk-default")));
  c.schema_version = j.value("schema_version", kRunConfigSchema);
  c.preset = base.preset;
  c.seed = j.value("seed", base.seed);
  c.model = merged(j, "model", base.model);
  c.corpus = merged(j, "corpus", base.corpus);
  c.train = merged(j, "train", base.train);
  c.edit = merged(j, "edit", base.edit);
  c.opt = merged(j, "opt", base.opt);
  c.eval = merged(j, "eval", base.eval);
  c.protocol = merged(j, "protocol", base.protocol);
  c.out_dir = j.value("out_dir", base.out_dir);
}

std::vector<std::string> preset_names() { return {"desk-default", "gpt2xl-analogue", "gptj-analogue", "llama3-analogue"}; }

RunConfig preset(const std::string& name) {
  RunConfig c;
  c.preset = name;
  c.model.vocab_size = 0;  // filled from the corpus vocabulary
  if (name == "desk-default") {
    c.out_dir = "runs/desk";
  } else if (name == "gpt2xl-analogue") {
    c.edit.layers = {1, 2, 3, 4, 5};
    c.opt.steps = 20;
    c.opt.lr = 0.5;
    c.out_dir = "runs/gpt2xl-analogue";
  } else if (name == "gptj-analogue") {
    c.edit.layers = {0, 1, 2, 3, 4, 5};
    c.opt.steps = 25;
    c.opt.lr = 0.5;
    c.out_dir = "runs/gptj-analogue";
  } else if (name == "llama3-analogue") {
    c.edit.layers = {1, 2, 3, 4, 5};
    c.opt.steps = 25;
    c.opt.lr = 0.1;
    c.out_dir = "runs/llama3-analogue";
  } else {
    throw InputError("unknown preset '" + name + "'");
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("config " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("config " + path + ": " + e.what());
  }
  c.resolve();
  return c;
}

void save_run_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << nlohmann::json(c).dump(2) << "\n";
}

}  // namespace nse
