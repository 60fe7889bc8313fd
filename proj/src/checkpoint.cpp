#include "maple/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace maple::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'C', 'K', 'P'};

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

std::string config_hash(const nlohmann::json& config) {
  const std::string s = config.dump();
  return hex(fnv1a(s.data(), s.size()));
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return hex(h);
}

const ParamStore& Checkpoint::store(const std::string& name) const {
  auto it = stores.find(name);
  if (it == stores.end()) throw std::runtime_error("checkpoint has no store '" + name + "'");
  return it->second;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const std::vector<NamedStore>& stores, const nlohmann::json& metadata) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["config"] = config;
  header["config_hash"] = config_hash(config);
  header["metadata"] = metadata;
  auto tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [store_name, store] : stores) {
    for (const auto& [name, p] : *store) {
      tensors.push_back({{"store", store_name},
                         {"name", name},
                         {"shape", {p.value.rows(), p.value.cols()}},
                         {"dtype", "float32"},
                         {"offset", offset}});
      offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(float);
    }
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<float> buf;
  for (const auto& [store_name, store] : stores) {
    for (const auto& [name, p] : *store) {
      buf.resize(static_cast<std::size_t>(p.value.size()));
      for (Eigen::Index i = 0; i < p.value.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(p.value.data()[i]);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<nlohmann::json>& expected_config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kFormatVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(in);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ck;
  ck.config = header.at("config");
  ck.config_hash = header.at("config_hash").get<std::string>();
  ck.metadata = header.value("metadata", nlohmann::json::object());
  if (config_hash(ck.config) != ck.config_hash) throw std::runtime_error("checkpoint: config hash mismatch (corrupt header)");
  if (expected_config && config_hash(*expected_config) != ck.config_hash)
    throw std::runtime_error("checkpoint: config hash mismatch (expected " + config_hash(*expected_config) + ", found " +
                             ck.config_hash + ")");

  std::vector<float> buf;
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "float32") throw std::runtime_error("checkpoint: unsupported dtype");
    const auto rows = t.at("shape")[0].get<Eigen::Index>();
    const auto cols = t.at("shape")[1].get<Eigen::Index>();
    buf.resize(static_cast<std::size_t>(rows * cols));
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw std::runtime_error("checkpoint: truncated payload");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = buf[static_cast<std::size_t>(i)];
    ck.stores[t.at("store").get<std::string>()].add(t.at("name").get<std::string>(), std::move(m));
  }
  return ck;
}

void restore(const ParamStore& from, ParamStore& to) {
  for (auto& [name, p] : to) {
    if (!from.contains(name)) throw std::runtime_error("restore: missing tensor " + name);
    const Matrix& v = from.at(name).value;
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
      throw std::runtime_error("restore: shape mismatch for " + name);
    p.value = v;
  }
}

}  // namespace maple::checkpoint
