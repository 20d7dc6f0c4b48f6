#include "sbsg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "sbsg/errors.hpp"

namespace sbsg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void write_raw(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::filesystem::path& path) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw IoError("truncated checkpoint '" + path.string() + "'");
  }
  return value;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::size_t parse_size(const std::map<std::string, std::string>& kv, const std::string& key,
                       const std::filesystem::path& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IoError("checkpoint '" + path.string() + "' lacks header key '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw IoError("checkpoint '" + path.string() + "': bad value for '" + key + "'");
  }
}

double parse_double(const std::map<std::string, std::string>& kv, const std::string& key,
                    const std::filesystem::path& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IoError("checkpoint '" + path.string() + "' lacks header key '" + key + "'");
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw IoError("checkpoint '" + path.string() + "': bad value for '" + key + "'");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const Params& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  const auto named = params.named();
  os << kCheckpointMagic << '\n'
     << "layers=" << config.layers << '\n'
     << "d_model=" << config.d_model << '\n'
     << "heads=" << config.heads << '\n'
     << "d_ff=" << config.d_ff << '\n'
     << "vocab_size=" << config.vocab_size << '\n'
     << "lambda=" << format_double(config.lambda) << '\n'
     << "dropout=" << format_double(config.dropout) << '\n'
     << "max_positions=" << config.max_positions << '\n'
     << "mode=" << to_string(config.mode) << '\n'
     << "tensors=" << named.size() << '\n'
     << "end\n";
  for (const auto& [name, t] : named) {
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_raw<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) {
    throw IoError("'" + path.string() + "' is not an " + kCheckpointMagic + " checkpoint");
  }
  std::map<std::string, std::string> kv;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("checkpoint '" + path.string() + "': malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!ended) throw IoError("checkpoint '" + path.string() + "': header not terminated");

  Checkpoint ck;
  ck.config.layers = parse_size(kv, "layers", path);
  ck.config.d_model = parse_size(kv, "d_model", path);
  ck.config.heads = parse_size(kv, "heads", path);
  ck.config.d_ff = parse_size(kv, "d_ff", path);
  ck.config.vocab_size = parse_size(kv, "vocab_size", path);
  ck.config.lambda = parse_double(kv, "lambda", path);
  ck.config.dropout = parse_double(kv, "dropout", path);
  ck.config.max_positions = parse_size(kv, "max_positions", path);
  if (!kv.count("mode")) throw IoError("checkpoint '" + path.string() + "' lacks header key 'mode'");
  ck.config.mode = parse_decoder_mode(kv["mode"]);
  const std::size_t count = parse_size(kv, "tensors", path);

  std::vector<std::pair<std::string, Tensor>> named;
  for (std::size_t i = 0; i < count; ++i) {
    const auto name_len = read_raw<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw IoError("truncated checkpoint '" + path.string() + "'");
    const auto rank = read_raw<std::uint32_t>(is, path);
    if (rank == 0 || rank > 8) throw IoError("checkpoint '" + path.string() + "': bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_raw<std::uint64_t>(is, path));
    std::vector<double> values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw IoError("truncated checkpoint '" + path.string() + "'");
    }
    named.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  ck.params = params_from_named(ck.config, named);
  return ck;
}

}  // namespace sbsg
