#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "aslip/error.hpp"
#include "aslip/simulator.hpp"
#include "aslip/training.hpp"

namespace aslip::train {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'S', 'L', 'P'};
enum DType : std::uint8_t { kF32 = 0, kF64 = 1 };

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void text(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void tensor(const std::string& name, const std::vector<std::uint64_t>& dims, const T* data, std::size_t count) {
    text(name);
    pod(static_cast<std::uint8_t>(sizeof(T) == 4 ? kF32 : kF64));
    pod(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) pod(d);
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  template <typename T>
  T pod(const std::string& what) {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) throw FormatError("checkpoint truncated while reading " + what);
    return v;
  }
  std::string text(const std::string& what) {
    const auto n = pod<std::uint32_t>(what);
    if (n > (1u << 26)) throw FormatError("checkpoint field too long: " + what);
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw FormatError("checkpoint truncated while reading " + what);
    return s;
  }
  void bytes(char* dst, std::size_t n, const std::string& what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (!in_) throw FormatError("checkpoint truncated in tensor '" + what + "'");
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
};

struct RawTensor {
  std::uint8_t dtype = kF32;
  std::vector<std::uint64_t> dims;
  std::vector<char> bytes;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

std::string provenance_text(const std::map<std::string, std::string>& p) {
  std::string s;
  for (const auto& [k, v] : p) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw UsageError("provenance keys/values must not contain '=' or newlines: " + k);
    s += k + "=" + v + "\n";
  }
  return s;
}

std::map<std::string, std::string> parse_provenance(const std::string& text) {
  std::map<std::string, std::string> p;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("bad provenance line in checkpoint: " + line);
    p[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return p;
}

template <typename T>
void take(const std::string& name, std::map<std::string, RawTensor>& tensors, const std::vector<std::uint64_t>& dims,
          T* dst) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
  const RawTensor& t = it->second;
  if (t.dtype != (sizeof(T) == 4 ? kF32 : kF64)) throw FormatError("tensor '" + name + "' has the wrong dtype");
  if (t.dims != dims) throw FormatError("tensor '" + name + "' has a shape that does not match the model config");
  std::memcpy(dst, t.bytes.data(), t.bytes.size());
  tensors.erase(it);
}

std::vector<std::uint64_t> dims_of(const ag::Shape& s) { return {s.begin(), s.end()}; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Net& model,
                     const std::map<std::string, std::string>& provenance, const ag::AdamState<float>* optimizer) {
  std::ostringstream buf(std::ios::binary);
  Writer w(buf);
  buf.write(kMagic, 4);
  w.pod(kCheckpointVersion);
  w.text(model.config().to_text());
  w.text(provenance_text(provenance));

  std::uint32_t count = 0;
  std::ostringstream body(std::ios::binary);
  Writer tw(body);
  for (const auto* p : model.parameters()) {
    tw.tensor(p->name, dims_of(p->value.shape), p->value.values.data(), static_cast<std::size_t>(p->value.size()));
    ++count;
  }
  for (const auto& [name, st] : model.batchnorm_states()) {
    const auto n = static_cast<std::uint64_t>(st->running_mean.size());
    tw.tensor(name + ".running_mean", {n}, st->running_mean.data(), n);
    tw.tensor(name + ".running_var", {n}, st->running_var.data(), n);
    const float init = st->initialized ? 1.0f : 0.0f;
    tw.tensor(name + ".initialized", {1}, &init, 1);
    count += 3;
  }
  const auto& ns = model.norm_stats;
  const std::vector<std::uint64_t> nd{static_cast<std::uint64_t>(ns.mean.rows()),
                                      static_cast<std::uint64_t>(ns.mean.cols())};
  // Row-major copies so the on-disk layout matches the declared [channels, bins].
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mean = ns.mean, var = ns.variance;
  tw.tensor("norm.mean", nd, mean.data(), static_cast<std::size_t>(mean.size()));
  tw.tensor("norm.variance", nd, var.data(), static_cast<std::size_t>(var.size()));
  count += 2;
  if (optimizer != nullptr) {
    const double step = static_cast<double>(optimizer->step);
    tw.tensor("adam.step", {1}, &step, 1);
    ++count;
    for (const auto& [name, m] : optimizer->first_moment) {
      tw.tensor("adam.m." + name, {static_cast<std::uint64_t>(m.size())}, m.data(), static_cast<std::size_t>(m.size()));
      ++count;
    }
    for (const auto& [name, v] : optimizer->second_moment) {
      tw.tensor("adam.v." + name, {static_cast<std::uint64_t>(v.size())}, v.data(), static_cast<std::size_t>(v.size()));
      ++count;
    }
  }
  w.pod(count);
  buf << body.str();

  if (!path.parent_path().empty()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw EnvironmentError("cannot write checkpoint " + path.string());
  const std::string bytes = buf.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw EnvironmentError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  Reader r(in);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto config = model::ModelConfig::from_text(r.text("model config"));
  const auto provenance = parse_provenance(r.text("provenance"));
  const auto count = r.pod<std::uint32_t>("tensor count");

  std::map<std::string, RawTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.text("tensor name #" + std::to_string(i));
    RawTensor t;
    t.dtype = r.pod<std::uint8_t>("dtype of '" + name + "'");
    if (t.dtype != kF32 && t.dtype != kF64) throw FormatError("tensor '" + name + "' has unknown dtype");
    const auto rank = r.pod<std::uint32_t>("rank of '" + name + "'");
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) t.dims.push_back(r.pod<std::uint64_t>("shape of '" + name + "'"));
    const std::size_t n = t.count();
    if (n > (1ull << 30)) throw FormatError("tensor '" + name + "' is implausibly large");
    t.bytes.resize(n * (t.dtype == kF32 ? 4 : 8));
    r.bytes(t.bytes.data(), t.bytes.size(), name);
    tensors.emplace(name, std::move(t));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after the last checkpoint tensor");

  Checkpoint ck;
  ck.model = Net(config, 0);
  ck.provenance = provenance;
  for (auto* p : ck.model.parameters()) take(p->name, tensors, dims_of(p->value.shape), p->value.values.data());
  for (auto& [name, st] : ck.model.batchnorm_states()) {
    const auto n = static_cast<std::uint64_t>(st->running_mean.size());
    take(name + ".running_mean", tensors, {n}, st->running_mean.data());
    take(name + ".running_var", tensors, {n}, st->running_var.data());
    float init = 0.0f;
    take(name + ".initialized", tensors, {1}, &init);
    st->initialized = init != 0.0f;
  }
  const std::vector<std::uint64_t> nd{static_cast<std::uint64_t>(config.channel_count),
                                      static_cast<std::uint64_t>(config.mel_bins)};
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mean(config.channel_count, config.mel_bins),
      var(config.channel_count, config.mel_bins);
  take("norm.mean", tensors, nd, mean.data());
  take("norm.variance", tensors, nd, var.data());
  ck.model.norm_stats.mean = mean;
  ck.model.norm_stats.variance = var;

  if (tensors.count("adam.step")) {
    ag::AdamState<float> st;
    double step = 0.0;
    take("adam.step", tensors, {1}, &step);
    st.step = static_cast<std::int64_t>(step);
    for (auto it = tensors.begin(); it != tensors.end();) {
      const bool first = it->first.rfind("adam.m.", 0) == 0, second = it->first.rfind("adam.v.", 0) == 0;
      if (!first && !second) {
        ++it;
        continue;
      }
      if (it->second.dtype != kF32 || it->second.dims.size() != 1)
        throw FormatError("optimizer tensor '" + it->first + "' is malformed");
      Eigen::VectorXf v(static_cast<Eigen::Index>(it->second.dims[0]));
      std::memcpy(v.data(), it->second.bytes.data(), it->second.bytes.size());
      (first ? st.first_moment : st.second_moment)[it->first.substr(7)] = std::move(v);
      it = tensors.erase(it);
    }
    ck.optimizer = std::move(st);
  }
  if (!tensors.empty()) throw FormatError("checkpoint has unexpected tensor '" + tensors.begin()->first + "'");
  return ck;
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sim::fnv1a(bytes.data(), bytes.size());
}

}  // namespace aslip::train
