#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace melt::memory {

enum class CacheMode { per_loop, shared, standard };

CacheMode parse_cache_mode(const std::string& s);
std::string to_string(CacheMode m);

struct MemorySpec {
  std::string name;
  std::uint64_t n_layers = 0;
  std::uint64_t n_kv_heads = 0;
  std::uint64_t head_dim = 0;
  std::uint64_t bytes_per_elem = 2;
  std::uint64_t loops = 1;
  CacheMode cache_mode = CacheMode::standard;

  /// T for per_loop caches, 1 otherwise.
  std::uint64_t loop_multiplier() const;
  void validate() const;
};

/// n_layers * 2 (K and V) * n_kv_heads * head_dim * bytes * loop multiplier
std::uint64_t kv_bytes_per_token(const MemorySpec& spec);

/// Per-token bytes of the MELT latent H (one d-row per layer); not part of
/// the K/V figure.
std::uint64_t latent_bytes_per_token(const MemorySpec& spec);

/// 2 bytes per parameter.
std::uint64_t model_bytes(std::uint64_t n_params);

struct MemoryReport {
  std::string name;
  std::uint64_t kv_bytes_per_token = 0;
  std::uint64_t latent_bytes_per_token = 0;  // 0 unless requested
  std::uint64_t model_bytes = 0;
  std::uint64_t length = 0;
  std::uint64_t kv_bytes_at_length = 0;
  std::uint64_t total_bytes_at_length = 0;

  // Render-time unit conversions.
  double kv_mb_per_token() const;     // decimal MB
  double model_gb() const;            // decimal GB
  double kv_gib() const;              // binary GiB
  /// The convention of the published table: (MB/token x L) / 1024.
  double kv_table_gb() const;
  double total_table_gb() const;      // model_gb + kv_table_gb
};

MemoryReport generation_report(const MemorySpec& spec, std::uint64_t n_params,
                               std::uint64_t length = 32768, bool include_latent = false);

struct Preset {
  MemorySpec spec;
  std::uint64_t n_params;
};

/// melt16, ouro14, qwen17
std::optional<Preset> find_preset(const std::string& name);
std::vector<std::string> preset_names();

std::string csv_header();
std::string csv_row(const MemoryReport& r);
std::string render_table(const std::vector<MemoryReport>& rows);

}  // namespace melt::memory
