#include "melt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace melt::config {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key, "config: '" + key + "' expects a non-negative integer, got '" +
                               std::string(v) + "'");
  }
  return out;
}

double to_double(const std::string& key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key, "config: '" + key + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

bool to_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "config: '" + key + "' expects true or false, got '" + std::string(v) + "'");
}

using Setter = std::function<void(train::PipelineOptions&, const std::string&, std::string_view)>;

const std::map<std::string, Setter>& setters() {
  using O = train::PipelineOptions;
  using K = const std::string&;
  using V = std::string_view;
  static const std::map<std::string, Setter> table = {
      {"n_layers", [](O& o, K k, V v) { o.model.n_layers = to_size(k, v); }},
      {"hidden_dim", [](O& o, K k, V v) { o.model.hidden_dim = to_size(k, v); }},
      {"n_heads", [](O& o, K k, V v) { o.model.n_heads = to_size(k, v); }},
      {"loops", [](O& o, K k, V v) { o.model.loops = to_size(k, v); }},
      {"vocab_size", [](O& o, K k, V v) { o.model.vocab_size = to_size(k, v); }},
      {"ffn_dim", [](O& o, K k, V v) { o.model.ffn_dim = to_size(k, v); }},
      {"max_seq_len", [](O& o, K k, V v) { o.model.max_seq_len = to_size(k, v); }},
      {"norm_eps", [](O& o, K k, V v) { o.model.norm_eps = to_double(k, v); }},
      {"rope_base", [](O& o, K k, V v) { o.model.rope_base = to_double(k, v); }},
      {"task",
       [](O& o, K k, V v) {
         try {
           o.task.task = data::parse_task(std::string(v));
         } catch (const std::invalid_argument& e) {
           throw ConfigError(k, std::string("config: 'task': ") + e.what());
         }
       }},
      {"digits", [](O& o, K k, V v) { o.task.digits = to_size(k, v); }},
      {"alphabet", [](O& o, K k, V v) { o.task.alphabet = to_size(k, v); }},
      {"modulus", [](O& o, K k, V v) { o.task.modulus = to_size(k, v); }},
      {"train_size", [](O& o, K k, V v) { o.train_size = to_size(k, v); }},
      {"eval_size", [](O& o, K k, V v) { o.eval_size = to_size(k, v); }},
      {"chunk_size", [](O& o, K k, V v) { o.schedule.chunk_size = to_size(k, v); }},
      {"interp_steps", [](O& o, K k, V v) { o.schedule.interp_steps = to_size(k, v); }},
      {"phase1_steps", [](O& o, K k, V v) { o.schedule.phase1_steps = to_size(k, v); }},
      {"phase2_steps", [](O& o, K k, V v) { o.schedule.phase2_steps = to_size(k, v); }},
      {"beta", [](O& o, K k, V v) { o.schedule.beta = to_double(k, v); }},
      {"learning_rate", [](O& o, K k, V v) { o.schedule.learning_rate = to_double(k, v); }},
      {"gate_learning_rate",
       [](O& o, K k, V v) { o.schedule.gate_learning_rate = to_double(k, v); }},
      {"adam_beta1", [](O& o, K k, V v) { o.schedule.adam_beta1 = to_double(k, v); }},
      {"adam_beta2", [](O& o, K k, V v) { o.schedule.adam_beta2 = to_double(k, v); }},
      {"weight_decay", [](O& o, K k, V v) { o.schedule.weight_decay = to_double(k, v); }},
      {"grad_clip", [](O& o, K k, V v) { o.schedule.grad_clip = to_double(k, v); }},
      {"warmup_steps", [](O& o, K k, V v) { o.schedule.warmup_steps = to_size(k, v); }},
      {"min_lr_ratio", [](O& o, K k, V v) { o.schedule.min_lr_ratio = to_double(k, v); }},
      {"batch_size", [](O& o, K k, V v) { o.schedule.batch_size = to_size(k, v); }},
      {"ce_weight", [](O& o, K k, V v) { o.schedule.ce_weight = to_double(k, v); }},
      {"align_token_mean", [](O& o, K k, V v) { o.schedule.align_token_mean = to_bool(k, v); }},
      {"teacher_steps", [](O& o, K k, V v) { o.schedule.teacher_steps = to_size(k, v); }},
      {"teacher_learning_rate",
       [](O& o, K k, V v) { o.schedule.teacher_learning_rate = to_double(k, v); }},
      {"seed", [](O& o, K k, V v) { o.schedule.seed = to_size(k, v); }},
      {"variant",
       [](O& o, K k, V v) {
         try {
           o.melt.variant = parse_gate_variant(std::string(v));
         } catch (const std::invalid_argument& e) {
           throw ConfigError(k, std::string("config: 'variant': ") + e.what());
         }
       }},
      {"ema_decay", [](O& o, K k, V v) { o.melt.ema_decay = to_double(k, v); }},
  };
  return table;
}

}  // namespace

train::PipelineOptions parse_config(std::string_view text, const train::PipelineOptions& base) {
  train::PipelineOptions out = base;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      const std::string key(trim(line));
      throw ConfigError(key, "config line " + std::to_string(lineno) + ": '" + key +
                                 "' is not a key = value pair");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) {
      throw ConfigError(key, "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw ConfigError(key, "config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    if (value.empty()) throw ConfigError(key, "config: '" + key + "' has no value");
    it->second(out, key, value);
  }
  return out;
}

train::PipelineOptions load_config(const std::filesystem::path& path,
                                   const train::PipelineOptions& base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("", "config: cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), base);
}

namespace {

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string to_config_text(const train::PipelineOptions& o) {
  std::ostringstream os;
  const auto& m = o.model;
  const auto& s = o.schedule;
  os << "n_layers = " << m.n_layers << "\nhidden_dim = " << m.hidden_dim
     << "\nn_heads = " << m.n_heads << "\nloops = " << m.loops << "\nvocab_size = " << m.vocab_size
     << "\nffn_dim = " << m.ffn_dim << "\nmax_seq_len = " << m.max_seq_len
     << "\nnorm_eps = " << num(m.norm_eps) << "\nrope_base = " << num(m.rope_base);
  os << "\ntask = " << data::to_string(o.task.task) << "\ndigits = " << o.task.digits
     << "\nalphabet = " << o.task.alphabet << "\nmodulus = " << o.task.modulus
     << "\ntrain_size = " << o.train_size << "\neval_size = " << o.eval_size;
  os << "\nchunk_size = " << s.chunk_size << "\ninterp_steps = " << s.interp_steps
     << "\nphase1_steps = " << s.phase1_steps << "\nphase2_steps = " << s.phase2_steps
     << "\nbeta = " << num(s.beta) << "\nlearning_rate = " << num(s.learning_rate)
     << "\ngate_learning_rate = " << num(s.gate_learning_rate) << "\nadam_beta1 = " << num(s.adam_beta1)
     << "\nadam_beta2 = " << num(s.adam_beta2) << "\nweight_decay = " << num(s.weight_decay)
     << "\ngrad_clip = " << num(s.grad_clip) << "\nwarmup_steps = " << s.warmup_steps
     << "\nmin_lr_ratio = " << num(s.min_lr_ratio) << "\nbatch_size = " << s.batch_size
     << "\nce_weight = " << num(s.ce_weight)
     << "\nalign_token_mean = " << (s.align_token_mean ? "true" : "false")
     << "\nteacher_steps = " << s.teacher_steps
     << "\nteacher_learning_rate = " << num(s.teacher_learning_rate) << "\nseed = " << s.seed;
  os << "\nvariant = " << to_string(o.melt.variant) << "\nema_decay = " << num(o.melt.ema_decay) << "\n";
  return os.str();
}

void validate(const train::PipelineOptions& o) {
  try {
    o.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", std::string("config: ") + e.what());
  }
  try {
    o.task.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("task", std::string("config: ") + e.what());
  }
  try {
    o.schedule.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("schedule", std::string("config: ") + e.what());
  }
  if (o.task.min_vocab() > o.model.vocab_size) {
    throw ConfigError("vocab_size", "config: task needs vocab_size >= " +
                                        std::to_string(o.task.min_vocab()));
  }
  if (o.task.sequence_length() > o.model.max_seq_len) {
    throw ConfigError("max_seq_len", "config: sequences of " +
                                         std::to_string(o.task.sequence_length()) +
                                         " tokens exceed max_seq_len");
  }
  if (o.train_size == 0 || o.eval_size == 0) {
    throw ConfigError(o.train_size == 0 ? "train_size" : "eval_size",
                      "config: corpus sizes must be >= 1");
  }
}

}  // namespace melt::config
