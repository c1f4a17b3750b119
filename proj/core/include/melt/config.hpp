#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "melt/train.hpp"

namespace melt::config {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Flat `key = value` text, one pair per line; `#` starts a comment. Keys not
/// present keep their value from `base`. Unknown keys, malformed values and
/// duplicates raise ConfigError naming the key.
///
/// Keys: n_layers hidden_dim n_heads loops vocab_size ffn_dim max_seq_len
/// norm_eps rope_base | task digits alphabet modulus train_size eval_size |
/// chunk_size interp_steps phase1_steps phase2_steps beta learning_rate
/// gate_learning_rate adam_beta1 adam_beta2 weight_decay grad_clip
/// warmup_steps min_lr_ratio batch_size ce_weight align_token_mean
/// teacher_steps teacher_learning_rate seed | variant ema_decay
train::PipelineOptions parse_config(std::string_view text, const train::PipelineOptions& base = {});
train::PipelineOptions load_config(const std::filesystem::path& path,
                                   const train::PipelineOptions& base = {});

/// Canonical text of every key, parseable by parse_config.
std::string to_config_text(const train::PipelineOptions& opts);

/// Rejects combinations no single field check catches (vocabulary too small
/// for the task, sequences longer than max_seq_len).
void validate(const train::PipelineOptions& opts);

}  // namespace melt::config
