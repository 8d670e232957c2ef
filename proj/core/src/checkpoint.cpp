#include "star4d/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace star4d {

namespace {

constexpr char kMagic[8] = {'S', '4', 'D', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <class T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<uint32_t>();
    if (n > (1u << 28)) fail("string length out of range");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    check();
    return s;
  }
  void floats(std::vector<float>& v) {
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    check();
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("checkpoint " + path_ + ": " + what);
  }

 private:
  void check() const {
    if (!in_) fail("truncated file");
  }
  std::ifstream& in_;
  std::string path_;
};

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, a] : arrays) {
    if (n == name) return &a;
  }
  return nullptr;
}

void Checkpoint::add(const std::string& name, const Tensor& tensor) {
  arrays.push_back({name, {tensor.shape(), tensor.to_vector()}});
}

void Checkpoint::add_all(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  for (const auto& [name, t] : tensors) add(name, t);
}

void Checkpoint::restore(std::vector<std::pair<std::string, Tensor>>& tensors) const {
  for (auto& [name, t] : tensors) {
    const NamedArray* a = find(name);
    if (a == nullptr) throw std::invalid_argument("checkpoint is missing array '" + name + "'");
    if (a->shape != t.shape()) {
      throw std::invalid_argument("checkpoint array '" + name + "' has shape " + shape_str(a->shape) +
                                  ", model expects " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(a->values.begin(), a->values.end(), dst.begin());
  }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    Writer w(out);
    out.write(kMagic, sizeof kMagic);
    w.pod(kCheckpointVersion);
    w.str(checkpoint.kind);
    w.str(checkpoint.config.to_text());
    w.pod(static_cast<uint32_t>(checkpoint.metadata.size()));
    for (const auto& [k, v] : checkpoint.metadata) {
      w.str(k);
      w.str(v);
    }
    w.pod(static_cast<uint32_t>(checkpoint.arrays.size()));
    for (const auto& [name, a] : checkpoint.arrays) {
      w.str(name);
      w.pod(static_cast<uint32_t>(a.shape.size()));
      for (int64_t d : a.shape) w.pod(d);
      out.write(reinterpret_cast<const char*>(a.values.data()),
                static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("not a star4d checkpoint");
  const auto version = r.pod<uint32_t>();
  if (version != kCheckpointVersion) {
    r.fail("format_version " + std::to_string(version) + " unsupported (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.kind = r.str();
  c.config = Config::parse(r.str(), path.string() + " (config echo)");
  const auto meta = r.pod<uint32_t>();
  for (uint32_t i = 0; i < meta; ++i) {
    std::string k = r.str();
    c.metadata[k] = r.str();
  }
  const auto count = r.pod<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    NamedArray a;
    const auto rank = r.pod<uint32_t>();
    if (rank > 8) r.fail("array '" + name + "' has rank " + std::to_string(rank));
    for (uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.pod<int64_t>();
      if (dim < 0 || dim > (int64_t{1} << 32)) r.fail("array '" + name + "' has a bad dimension");
      a.shape.push_back(dim);
    }
    a.values.resize(static_cast<size_t>(shape_numel(a.shape)));
    r.floats(a.values);
    c.arrays.emplace_back(std::move(name), std::move(a));
  }
  return c;
}

void require_matching_config(const Checkpoint& checkpoint, const std::string& kind, const Config& expected,
                             const std::string& prefix) {
  if (checkpoint.kind != kind) {
    throw std::invalid_argument("checkpoint holds a '" + checkpoint.kind + "' model, expected '" + kind + "'");
  }
  const std::string diff = config_mismatch(expected, checkpoint.config, prefix);
  if (!diff.empty()) throw std::invalid_argument("checkpoint config mismatch: " + diff);
}

}  // namespace star4d
