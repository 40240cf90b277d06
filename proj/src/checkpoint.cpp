#include <cstring>
#include <fstream>
#include <map>

#include "nse/model.hpp"

namespace nse {
namespace {

constexpr char kCheckpointMagic[8] = {'N', 'S', 'E', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    int c = in.get();
    if (c == EOF) throw InputError("checkpoint truncated");
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& state) {
  state.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  std::uint32_t count = 0;
  for_each_parameter(state, [&](const std::string&, const auto&) { ++count; });
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, count);
  put_u32(out, 0);
  for_each_parameter(state, [&](const std::string& name, const auto& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_matrix(out, Matrix(m));
  });
  if (!out) throw Error("write failure on " + path);

  std::ofstream side(path + ".json");
  if (!side) throw Error("cannot open " + path + ".json for writing");
  side << nlohmann::json{{"format", "nse-checkpoint"}, {"version", 1}, {"config", state.config}, {"edit_generation", state.edit_generation}}.dump(2) << "\n";
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw InputError("missing checkpoint sidecar " + path + ".json");
  nlohmann::json meta = nlohmann::json::parse(side);
  ModelConfig config = meta.at("config").get<ModelConfig>();

  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw InputError("bad checkpoint magic in " + path);
  std::uint32_t count = get_u32(in);
  get_u32(in);
  std::map<std::string, Matrix> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = get_u32(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    table[name] = read_matrix(in);
  }

  ModelState state = ModelState::zeros(config);
  for_each_parameter(state, [&](const std::string& name, auto& m) {
    auto it = table.find(name);
    if (it == table.end()) throw InputError("checkpoint missing parameter " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw InputError("checkpoint parameter " + name + " has wrong shape");
    m = it->second;
  });
  state.edit_generation = meta.value("edit_generation", 0);
  state.validate();
  return state;
}

}  // namespace nse
