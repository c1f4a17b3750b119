#include "melt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace melt::checkpoint {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

std::string to_string(Kind k) { return k == Kind::looplm ? "looplm" : "melt"; }

namespace {

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return buf_.size(); }
  const std::uint8_t* at(std::size_t off) const { return buf_.data() + off; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint: truncated header");
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> write(Kind kind, const ModelConfig& cfg, const MeltOptions& mo,
                                const std::vector<NamedTensor>& params) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(mo.variant));
  w.put<std::uint32_t>(0);  // reserved
  w.put<double>(mo.ema_decay);
  for (std::uint64_t v : {cfg.n_layers, cfg.hidden_dim, cfg.n_heads, cfg.loops, cfg.vocab_size,
                          cfg.max_seq_len, cfg.ffn_dim}) {
    w.put<std::uint64_t>(v);
  }
  w.put<double>(cfg.norm_eps);
  w.put<double>(cfg.rope_base);
  w.put<std::uint64_t>(params.size());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(offset);
    offset += t.size();
  }
  w.put<std::uint64_t>(offset);
  for (const auto& [name, t] : params) w.bytes(t.data().data(), t.size() * sizeof(double));
  return std::move(w.buffer());
}

struct Entry {
  Shape shape;
  std::uint64_t offset;
};

void fill(const std::vector<NamedTensor>& dest, const std::map<std::string, Entry>& dir,
          const Reader& r, std::size_t data_start) {
  if (dest.size() != dir.size()) {
    throw CheckpointError("checkpoint: expected " + std::to_string(dest.size()) +
                          " parameters, file has " + std::to_string(dir.size()));
  }
  for (const auto& [name, t] : dest) {
    const auto it = dir.find(name);
    if (it == dir.end()) throw CheckpointError("checkpoint: missing parameter '" + name + "'");
    if (it->second.shape != t.shape()) {
      throw CheckpointError("checkpoint: '" + name + "' has shape " +
                            melt::to_string(it->second.shape) + ", model expects " +
                            melt::to_string(t.shape()));
    }
    const std::size_t begin = data_start + it->second.offset * sizeof(double);
    const std::size_t bytes = t.size() * sizeof(double);
    if (begin + bytes > r.size()) throw CheckpointError("checkpoint: truncated data for '" + name + "'");
    Tensor handle = t;
    std::memcpy(handle.mutable_data().data(), r.at(begin), bytes);
    handle.set_requires_grad(true);
  }
}

}  // namespace

std::vector<std::uint8_t> serialize(const LoopLM& model) {
  return write(Kind::looplm, model.config(), {}, model.named_parameters());
}

std::vector<std::uint8_t> serialize(const MeltModel& model) {
  return write(Kind::melt, model.config(), model.options(), model.named_parameters());
}

const LoopLM& Loaded::base() const { return looplm ? *looplm : melt->base(); }

Loaded deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
    throw CheckpointError("checkpoint: bad magic (not a MELT checkpoint)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto kind_raw = r.get<std::uint32_t>();
  if (kind_raw != 1 && kind_raw != 2) {
    throw CheckpointError("checkpoint: unknown model kind " + std::to_string(kind_raw));
  }
  const Kind kind = static_cast<Kind>(kind_raw);
  const auto variant_raw = r.get<std::uint32_t>();
  if (variant_raw > static_cast<std::uint32_t>(GateVariant::single_gated)) {
    throw CheckpointError("checkpoint: unknown gate variant " + std::to_string(variant_raw));
  }
  r.get<std::uint32_t>();
  MeltOptions mo;
  mo.variant = static_cast<GateVariant>(variant_raw);
  mo.ema_decay = r.get<double>();

  ModelConfig cfg;
  cfg.n_layers = r.get<std::uint64_t>();
  cfg.hidden_dim = r.get<std::uint64_t>();
  cfg.n_heads = r.get<std::uint64_t>();
  cfg.loops = r.get<std::uint64_t>();
  cfg.vocab_size = r.get<std::uint64_t>();
  cfg.max_seq_len = r.get<std::uint64_t>();
  cfg.ffn_dim = r.get<std::uint64_t>();
  cfg.norm_eps = r.get<double>();
  cfg.rope_base = r.get<double>();
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: invalid config: ") + e.what());
  }

  const auto count = r.get<std::uint64_t>();
  std::map<std::string, Entry> dir;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.str(len);
    const auto nd = r.get<std::uint32_t>();
    Entry e;
    for (std::uint32_t d = 0; d < nd; ++d) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    if (!dir.emplace(name, std::move(e)).second) {
      throw CheckpointError("checkpoint: duplicate parameter '" + name + "'");
    }
  }
  const auto total = r.get<std::uint64_t>();
  const std::size_t data_start = r.pos();
  if (data_start + total * sizeof(double) != bytes.size()) {
    throw CheckpointError("checkpoint: data section is " +
                          std::to_string(bytes.size() - data_start) + " bytes, header says " +
                          std::to_string(total * sizeof(double)));
  }

  Loaded out;
  out.kind = kind;
  LoopLM base(cfg, zero_looplm_params(cfg));
  if (kind == Kind::looplm) {
    fill(base.named_parameters(), dir, r, data_start);
    out.looplm.emplace(std::move(base));
  } else {
    std::vector<GateParams> gates;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::size_t d = cfg.hidden_dim;
      gates.push_back({Tensor(Shape{d, d}), Tensor(Shape{d, d}), Tensor(Shape{d})});
    }
    MeltModel m(std::move(base), std::move(gates), mo);
    fill(m.named_parameters(), dir, r, data_start);
    out.melt.emplace(std::move(m));
  }
  return out;
}

namespace {

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("checkpoint: cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("checkpoint: write failed for " + path.string());
}

}  // namespace

void save(const std::filesystem::path& path, const LoopLM& model) {
  write_file(path, serialize(model));
}

void save(const std::filesystem::path& path, const MeltModel& model) {
  write_file(path, serialize(model));
}

Loaded load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace melt::checkpoint
