#include "diat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace diat {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'I', 'A', 'T', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <class T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void tensor(const NamedTensor& t) {
    str(t.name);
    pod<std::uint8_t>(static_cast<std::uint8_t>(t.value.dtype()));
    const auto& dims = t.value.shape().dims();
    pod<std::uint8_t>(static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) pod<std::uint64_t>(static_cast<std::uint64_t>(d));
    dispatch(t.value.dtype(), [&]<class T>() {
      auto d = t.value.data<T>();
      raw(d.data(), d.size_bytes());
    });
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  NamedTensor tensor() {
    NamedTensor t;
    t.name = str();
    const auto dt = pod<std::uint8_t>();
    if (dt > 1) throw CheckpointError("unknown dtype tag in tensor " + t.name);
    const auto rank = pod<std::uint8_t>();
    if (rank > 4) throw CheckpointError("rank out of range in tensor " + t.name);
    std::vector<std::int64_t> dims;
    for (int i = 0; i < rank; ++i) {
      const auto d = pod<std::uint64_t>();
      if (d == 0 || d > (1ULL << 40)) throw CheckpointError("bad extent in tensor " + t.name);
      dims.push_back(static_cast<std::int64_t>(d));
    }
    const Shape shape(dims);
    const auto n = static_cast<std::size_t>(shape.numel());
    if (dt == 0) {
      need(n * sizeof(float));
      std::vector<float> v(n);
      std::memcpy(v.data(), s_.data() + pos_, n * sizeof(float));
      pos_ += n * sizeof(float);
      t.value = Tensor(shape, std::move(v));
    } else {
      need(n * sizeof(double));
      std::vector<double> v(n);
      std::memcpy(v.data(), s_.data() + pos_, n * sizeof(double));
      pos_ += n * sizeof(double);
      t.value = Tensor(shape, std::move(v));
    }
    return t;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kVersion);
  w.pod<std::uint64_t>(spec_hash);
  w.str(network_id);
  w.pod<std::uint64_t>(step);
  w.str(rng_state);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) w.tensor(p);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(optimizer.size()));
  for (const auto& p : optimizer) w.tensor(p);
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  Reader r(bytes);
  r.need(sizeof(kMagic));
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw CheckpointError("not a checkpoint file");
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.pod<char>();
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.spec_hash = r.pod<std::uint64_t>();
  c.network_id = r.str();
  c.step = r.pod<std::uint64_t>();
  c.rng_state = r.str();
  const auto n_meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    c.meta[k] = r.str();
  }
  const auto n_params = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) c.params.push_back(r.tensor());
  const auto n_opt = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_opt; ++i) c.optimizer.push_back(r.tensor());
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

Checkpoint make_checkpoint(const nn::Network& net, std::uint64_t step) {
  Checkpoint c;
  c.network_id = net.name();
  c.spec_hash = net.spec().hash();
  c.step = step;
  for (const auto& p : net.params()) c.params.push_back(NamedTensor{p.name, p.value.clone()});
  return c;
}

void restore_params(const Checkpoint& ckpt, nn::Network& net) {
  if (ckpt.spec_hash != net.spec().hash())
    throw CheckpointError("checkpoint for '" + ckpt.network_id + "' does not match the architecture of '" +
                          net.name() + "' (spec hash differs)");
  auto& params = net.params();
  if (ckpt.params.size() != params.size())
    throw CheckpointError("checkpoint parameter count differs from network " + net.name());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ckpt.params[i];
    auto& dst = params[i].value;
    if (src.name != params[i].name || src.value.shape() != dst.shape())
      throw CheckpointError("checkpoint parameter " + src.name + " does not match " + params[i].name);
    dispatch(dst.dtype(), [&]<class T>() {
      auto out = dst.mutable_data<T>();
      dispatch(src.value.dtype(), [&]<class U>() {
        auto in = src.value.data<U>();
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(in[j]);
      });
    });
  }
}

void save_checkpoint(const nn::Network& net, const std::filesystem::path& path, std::uint64_t step) {
  make_checkpoint(net, step).save(path);
}

void load_checkpoint(const std::filesystem::path& path, nn::Network& net) {
  restore_params(Checkpoint::load(path), net);
}

}  // namespace diat
