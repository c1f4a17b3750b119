#include "melt/memory_model.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace melt::memory {

CacheMode parse_cache_mode(const std::string& s) {
  if (s == "per_loop") return CacheMode::per_loop;
  if (s == "shared") return CacheMode::shared;
  if (s == "standard") return CacheMode::standard;
  throw std::invalid_argument("unknown cache mode '" + s + "'");
}

std::string to_string(CacheMode m) {
  switch (m) {
    case CacheMode::per_loop: return "per_loop";
    case CacheMode::shared: return "shared";
    case CacheMode::standard: return "standard";
  }
  return "?";
}

std::uint64_t MemorySpec::loop_multiplier() const {
  return cache_mode == CacheMode::per_loop ? loops : 1;
}

void MemorySpec::validate() const {
  if (n_layers == 0 || n_kv_heads == 0 || head_dim == 0 || bytes_per_elem == 0 || loops == 0) {
    throw std::invalid_argument("MemorySpec '" + name + "': all fields must be positive");
  }
}

std::uint64_t kv_bytes_per_token(const MemorySpec& spec) {
  spec.validate();
  return spec.n_layers * 2 * spec.n_kv_heads * spec.head_dim * spec.bytes_per_elem *
         spec.loop_multiplier();
}

std::uint64_t latent_bytes_per_token(const MemorySpec& spec) {
  spec.validate();
  if (spec.cache_mode != CacheMode::shared) return 0;
  return spec.n_layers * spec.n_kv_heads * spec.head_dim * spec.bytes_per_elem;
}

std::uint64_t model_bytes(std::uint64_t n_params) { return 2 * n_params; }

double MemoryReport::kv_mb_per_token() const {
  return static_cast<double>(kv_bytes_per_token + latent_bytes_per_token) / 1e6;
}
double MemoryReport::model_gb() const { return static_cast<double>(model_bytes) / 1e9; }
double MemoryReport::kv_gib() const {
  return static_cast<double>(kv_bytes_at_length) / (1024.0 * 1024.0 * 1024.0);
}
double MemoryReport::kv_table_gb() const {
  return static_cast<double>(kv_bytes_at_length) / 1e6 / 1024.0;
}
double MemoryReport::total_table_gb() const { return model_gb() + kv_table_gb(); }

MemoryReport generation_report(const MemorySpec& spec, std::uint64_t n_params,
                               std::uint64_t length, bool include_latent) {
  MemoryReport r;
  r.name = spec.name;
  r.kv_bytes_per_token = kv_bytes_per_token(spec);
  r.latent_bytes_per_token = include_latent ? latent_bytes_per_token(spec) : 0;
  r.model_bytes = model_bytes(n_params);
  r.length = length;
  r.kv_bytes_at_length = length * (r.kv_bytes_per_token + r.latent_bytes_per_token);
  r.total_bytes_at_length = r.model_bytes + r.kv_bytes_at_length;
  return r;
}

std::optional<Preset> find_preset(const std::string& name) {
  // Hidden size 2048 = 16 heads x 128 for both looped models; the GQA model
  // keeps 8 KV heads of 128.
  if (name == "melt16") {
    return Preset{{"MELT-1.6B", 24, 16, 128, 2, 4, CacheMode::shared}, 1'636'000'000ULL};
  }
  if (name == "ouro14") {
    return Preset{{"Ouro-1.4B-Thinking", 24, 16, 128, 2, 4, CacheMode::per_loop},
                  1'434'500'000ULL};
  }
  if (name == "qwen17") {
    return Preset{{"Qwen3-1.7B", 28, 8, 128, 2, 1, CacheMode::standard}, 1'721'000'000ULL};
  }
  return std::nullopt;
}

std::vector<std::string> preset_names() { return {"melt16", "ouro14", "qwen17"}; }

std::string csv_header() { return "model,mb_per_token,model_gb,kv32k_gib,total"; }

std::string csv_row(const MemoryReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%.6f,%.3f,%.2f,%.2f", r.name.c_str(), r.kv_mb_per_token(),
                r.model_gb(), r.kv_table_gb(), r.total_table_gb());
  return buf;
}

std::string render_table(const std::vector<MemoryReport>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %14s %12s %16s %14s %12s\n", "Model", "KV (MB/token)",
                "Model (GB)", "KV for L (GB)*", "Total (GB)*", "KV (GiB)");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-20s %14.6f %12.3f %16.2f %14.2f %12.3f\n", r.name.c_str(),
                  r.kv_mb_per_token(), r.model_gb(), r.kv_table_gb(), r.total_table_gb(),
                  r.kv_gib());
    os << buf;
  }
  if (!rows.empty()) {
    os << "L = " << rows.front().length
       << " tokens. * (MB/token x L) / 1024, the convention of the published table;"
          " KV (GiB) is bytes / 2^30.\n";
  }
  return os.str();
}

}  // namespace melt::memory
