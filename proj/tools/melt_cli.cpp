// melt: command-line entry point.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config/checkpoint
// error, 3 numeric abort.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "melt/checkpoint.hpp"
#include "melt/config.hpp"
#include "melt/memory_model.hpp"
#include "melt/train.hpp"
#include "melt/verify.hpp"
#include "svg_plot.hpp"

#ifndef MELT_GIT_DESCRIBE
#define MELT_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path output_dir(const std::string& out, const std::string& command) {
  if (!out.empty()) return out;
  const char* root = std::getenv("MELT_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "melt_out") / command;
}

/// One per artifact-producing command, written when the command finishes.
class Manifest {
 public:
  Manifest(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)) {
    started_ = utc_now();
    fs::create_directories(dir_);
  }
  const fs::path& dir() const { return dir_; }
  json& extra() { return extra_; }
  void set_config(std::string text, std::uint64_t seed) {
    config_ = std::move(text);
    seed_ = seed;
  }
  void write(int exit_code) {
    json j;
    j["command"] = command_;
    j["config"] = config_;
    j["seed"] = seed_;
    j["git_describe"] = MELT_GIT_DESCRIBE;
    j["started_at"] = started_;
    j["finished_at"] = utc_now();
    j["output_dir"] = dir_.string();
    j["exit_code"] = exit_code;
    if (!extra_.is_null()) j["artifacts"] = extra_;
    std::ofstream(dir_ / "manifest.json") << j.dump(2) << "\n";
  }

 private:
  std::string command_;
  fs::path dir_;
  std::string started_;
  std::string config_;
  std::uint64_t seed_ = 0;
  json extra_;
};

melt::train::PipelineOptions read_config(const std::string& path) {
  melt::train::PipelineOptions o;
  if (!path.empty()) o = melt::config::load_config(path);
  return o;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path) : out_(path) {
    if (!out_) throw UsageError("cannot write " + path.string());
  }
  void operator()(const melt::train::StepMetrics& m) { out_ << melt::train::to_json_line(m) << "\n"; }

 private:
  std::ofstream out_;
};

melt::checkpoint::Loaded load_checkpoint(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what + " checkpoint");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " checkpoint not found: " + path);
  return melt::checkpoint::load(path);
}

std::vector<melt::TokenId> parse_tokens(const std::string& s) {
  std::vector<melt::TokenId> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size()) throw UsageError("prompt: '" + tok + "' is not a token id");
    out.push_back(v);
  }
  return out;
}

std::string join(const std::vector<melt::TokenId>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

json eval_json(const melt::train::EvalResult& r) {
  return {{"token_accuracy", r.token_accuracy},
          {"sequence_accuracy", r.sequence_accuracy},
          {"tokens", r.tokens}};
}

// ---- teacher -------------------------------------------------------------

struct TeacherArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_teacher(const TeacherArgs& a) {
  auto opts = read_config(a.config);
  if (a.seed) opts.schedule.seed = *a.seed;
  melt::config::validate(opts);
  Manifest man("teacher", output_dir(a.out, "teacher"));
  man.set_config(melt::config::to_config_text(opts), opts.schedule.seed);
  const auto seeds = melt::train::derive_seeds(opts.schedule.seed);
  const auto corpus = melt::data::make_corpus(opts.task, opts.train_size, seeds.train_corpus);
  const auto held = melt::data::make_corpus(opts.task, opts.eval_size, seeds.eval_corpus);
  MetricsWriter metrics(man.dir() / "metrics.jsonl");
  const melt::LoopLM model = melt::train::train_teacher(opts, corpus, std::ref(metrics));
  melt::checkpoint::save(man.dir() / "teacher.ckpt", model);
  const auto ev = melt::train::evaluate(model, held);
  json out = {{"model", "looplm"}, {"eval", eval_json(ev)}};
  std::cout << out.dump() << "\n";
  man.extra() = {{"checkpoint", "teacher.ckpt"}, {"metrics", "metrics.jsonl"}, {"eval", eval_json(ev)}};
  man.write(kOk);
  return kOk;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config, out, phase = "all", variant, ablate = "none", teacher, student;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  auto opts = read_config(a.config);
  if (a.seed) opts.schedule.seed = *a.seed;
  if (!a.variant.empty()) opts.melt.variant = melt::parse_gate_variant(a.variant);
  opts.ablation = melt::train::parse_ablation(a.ablate);
  melt::config::validate(opts);
  const bool p1 = a.phase == "1" || a.phase == "all";
  const bool p2 = a.phase == "2" || a.phase == "all";

  const auto teacher_ckpt = load_checkpoint(a.teacher, "teacher");
  if (teacher_ckpt.kind != melt::checkpoint::Kind::looplm) {
    throw UsageError("--teacher must be a LoopLM checkpoint");
  }
  const melt::LoopLM& teacher_model = *teacher_ckpt.looplm;
  if (!(teacher_model.config() == opts.model)) {
    throw UsageError("teacher checkpoint model shape differs from the config");
  }
  const melt::train::TeacherHandle teacher(teacher_model.clone());
  const auto seeds = melt::train::derive_seeds(opts.schedule.seed);

  std::optional<melt::MeltModel> student;
  if (p1) {
    student.emplace(melt::MeltModel::from_looplm(teacher.model(), seeds.gates, opts.melt));
  } else {
    auto s = load_checkpoint(a.student, "student");
    if (s.kind != melt::checkpoint::Kind::melt) throw UsageError("--student must be a MELT checkpoint");
    student.emplace(std::move(*s.melt));
  }

  Manifest man("train", output_dir(a.out, "train"));
  man.set_config(melt::config::to_config_text(opts), opts.schedule.seed);
  const auto corpus = melt::data::make_corpus(opts.task, opts.train_size, seeds.train_corpus);
  const auto held = melt::data::make_corpus(opts.task, opts.eval_size, seeds.eval_corpus);
  const std::uint64_t before = teacher.checksum();
  {
    MetricsWriter metrics(man.dir() / "metrics.jsonl");
    melt::train::train_melt(*student, teacher, opts, corpus, p1, p2, std::ref(metrics));
  }
  if (teacher.checksum() != before) throw std::logic_error("teacher parameters changed during training");
  melt::checkpoint::save(man.dir() / "melt.ckpt", *student);
  const auto ev = melt::train::evaluate(*student, held);
  json out = {{"model", "melt"}, {"phase", a.phase}, {"ablate", a.ablate}, {"eval", eval_json(ev)}};
  std::cout << out.dump() << "\n";
  man.extra() = {{"checkpoint", "melt.ckpt"}, {"metrics", "metrics.jsonl"}, {"eval", eval_json(ev)},
                 {"phase", a.phase}, {"ablate", a.ablate}};
  man.write(kOk);
  return kOk;
}

// ---- recipe: teacher + both phases + evaluation in one go ---------------

int cmd_recipe(const TrainArgs& a) {
  auto opts = read_config(a.config);
  if (a.seed) opts.schedule.seed = *a.seed;
  if (!a.variant.empty()) opts.melt.variant = melt::parse_gate_variant(a.variant);
  opts.ablation = melt::train::parse_ablation(a.ablate);
  melt::config::validate(opts);
  Manifest man("recipe", output_dir(a.out, "recipe"));
  man.set_config(melt::config::to_config_text(opts), opts.schedule.seed);
  melt::train::PipelineResult r = [&] {
    MetricsWriter metrics(man.dir() / "metrics.jsonl");
    return melt::train::run_pipeline(opts, std::ref(metrics));
  }();
  melt::checkpoint::save(man.dir() / "teacher.ckpt", r.teacher);
  melt::checkpoint::save(man.dir() / "melt.ckpt", r.student);
  json out = {{"teacher", eval_json(r.teacher_eval)}, {"melt", eval_json(r.melt_eval)},
              {"ablate", a.ablate}};
  std::cout << out.dump() << "\n";
  man.extra() = {{"checkpoints", {"teacher.ckpt", "melt.ckpt"}}, {"metrics", "metrics.jsonl"},
                 {"eval", out}};
  man.write(kOk);
  return kOk;
}

// ---- generate ------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, prompt, strategy = "none";
  bool keep_prompt_cache = false;
  bool sample = false;
  double temperature = 1.0, top_p = 0.7;
  std::size_t max_new = 16;
  std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint, "model");
  const auto prompt = parse_tokens(a.prompt);
  if (prompt.empty()) throw UsageError("--prompt needs at least one token id");
  const auto& cfg = ck.base().config();
  for (auto t : prompt) {
    if (t >= cfg.vocab_size) throw UsageError("prompt token " + std::to_string(t) + " >= vocab_size");
  }
  if (prompt.size() + a.max_new > cfg.max_seq_len) throw UsageError("prompt + max-new exceeds max_seq_len");
  melt::SamplingOptions sampling{!a.sample, a.temperature, a.top_p};
  const melt::ShareStrategy strategy{melt::parse_share_kind(a.strategy), a.keep_prompt_cache};

  melt::GenerateResult g;
  std::size_t analytic = 0;
  const std::size_t d2 = 2 * cfg.hidden_dim, n = cfg.n_layers;
  if (ck.kind == melt::checkpoint::Kind::melt) {
    if (strategy.kind != melt::ShareKind::none) {
      throw UsageError("--strategy applies to LoopLM checkpoints; MELT keeps one latent row per token");
    }
    g = melt::generate(*ck.melt, prompt, a.max_new, sampling, a.seed);
    analytic = n * (prompt.size() + g.tokens.size()) * d2;
  } else {
    g = melt::generate(*ck.looplm, prompt, a.max_new, strategy, sampling, a.seed);
    const std::size_t total = prompt.size() + g.tokens.size();
    if (strategy.kind == melt::ShareKind::none) {
      analytic = n * total * cfg.loops * d2;
    } else {
      const std::size_t exact = strategy.keep_prompt_cache ? prompt.size() : 0;
      analytic = n * exact * cfg.loops * d2 + n * (total - exact) * d2;
    }
  }
  std::cout << join(g.tokens) << "\n";
  std::cout << "kv_elements measured=" << g.kv_elements << " analytic=" << analytic
            << " bytes@2=" << 2 * g.kv_elements << (g.kv_elements == analytic ? " match" : " MISMATCH")
            << "\n";
  return g.kv_elements == analytic ? kOk : kVerifyFailed;
}

// ---- profile -------------------------------------------------------------

struct ProfileArgs {
  std::vector<std::string> presets;
  std::string name = "custom", cache_mode = "standard", out;
  std::uint64_t layers = 0, kv_heads = 0, head_dim = 0, bytes = 2, loops = 1, params = 0;
  std::uint64_t length = 32768;
  bool include_latent = false, csv = false;
};

int cmd_profile(const ProfileArgs& a) {
  namespace mm = melt::memory;
  std::vector<mm::MemoryReport> rows;
  if (a.layers > 0) {
    mm::MemorySpec spec{a.name, a.layers, a.kv_heads, a.head_dim, a.bytes, a.loops,
                        mm::parse_cache_mode(a.cache_mode)};
    spec.validate();
    rows.push_back(mm::generation_report(spec, a.params, a.length, a.include_latent));
  }
  auto names = a.presets;
  if (names.empty() && rows.empty()) names = mm::preset_names();
  for (const auto& p : names) {
    const auto preset = mm::find_preset(p);
    if (!preset) throw UsageError("unknown preset '" + p + "' (melt16, ouro14, qwen17)");
    rows.push_back(mm::generation_report(preset->spec, preset->n_params, a.length, a.include_latent));
  }
  std::string csv = mm::csv_header() + "\n";
  for (const auto& r : rows) csv += mm::csv_row(r) + "\n";
  std::cout << (a.csv ? csv : mm::render_table(rows));
  if (!a.out.empty()) {
    Manifest man("profile", a.out);
    std::ofstream(man.dir() / "memory.csv") << csv;
    man.extra() = {{"csv", "memory.csv"}, {"length", a.length}};
    man.write(kOk);
  }
  return kOk;
}

// ---- verify --------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all", report, checkpoint, inject_fault = "none", out;
  std::uint64_t seed = 7;
};

int cmd_verify(const VerifyArgs& a) {
  namespace v = melt::verify;
  if (a.suite != "all" && a.suite != "jacobian" && a.suite != "superhighway" && a.suite != "equivalence") {
    throw UsageError("unknown suite '" + a.suite + "'");
  }
  melt::GateFault fault = melt::GateFault::none;
  if (a.inject_fault == "swapped") {
    fault = melt::GateFault::swapped;
  } else if (a.inject_fault != "none") {
    throw UsageError("unknown fault '" + a.inject_fault + "' (none or swapped)");
  }
  std::optional<melt::checkpoint::Loaded> trained;
  if (!a.checkpoint.empty()) {
    trained = load_checkpoint(a.checkpoint, "model");
    if (trained->kind != melt::checkpoint::Kind::melt) throw UsageError("--checkpoint must be a MELT model");
  }
  std::vector<v::CheckResult> results;
  auto append = [&](std::vector<v::CheckResult> r) { results.insert(results.end(), r.begin(), r.end()); };
  if (a.suite == "all" || a.suite == "jacobian") append(v::jacobian_suite(a.seed + 4));
  if (a.suite == "all" || a.suite == "superhighway") append(v::superhighway_suite(a.seed + 6));
  if (a.suite == "all" || a.suite == "equivalence") {
    v::EquivalenceOptions eo;
    eo.seed = a.seed;
    eo.fault = fault;
    if (trained) eo.trained = &*trained->melt;
    append(v::equivalence_suite(eo));
  }
  std::string lines;
  bool ok = true;
  for (const auto& r : results) {
    lines += v::to_json_line(r) + "\n";
    ok = ok && r.ok();
  }
  std::cout << lines;
  for (const auto& r : results) {
    if (!r.ok()) std::cerr << "FAILED " << r.name << ": metric " << r.metric << " vs tolerance " << r.tolerance << "\n";
  }
  const int code = ok ? kOk : kVerifyFailed;
  if (!a.report.empty()) std::ofstream(a.report) << lines;
  if (!a.out.empty() || a.report.empty()) {
    Manifest man("verify", output_dir(a.out, "verify"));
    std::ofstream(man.dir() / "verify.jsonl") << lines;
    man.extra() = {{"report", "verify.jsonl"}, {"suite", a.suite}, {"fault", a.inject_fault}};
    man.write(code);
  }
  return code;
}

// ---- evaluate ------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint, config;
  std::optional<std::uint64_t> seed;
};

int cmd_evaluate(const EvaluateArgs& a) {
  auto opts = read_config(a.config);
  if (a.seed) opts.schedule.seed = *a.seed;
  melt::config::validate(opts);
  const auto ck = load_checkpoint(a.checkpoint, "model");
  if (!(ck.base().config() == opts.model)) throw UsageError("checkpoint model shape differs from the config");
  const auto held =
      melt::data::make_corpus(opts.task, opts.eval_size, melt::train::derive_seeds(opts.schedule.seed).eval_corpus);
  const auto ev = ck.melt ? melt::train::evaluate(*ck.melt, held) : melt::train::evaluate(*ck.looplm, held);
  json out = {{"model", melt::checkpoint::to_string(ck.kind)},
              {"task", melt::data::to_string(opts.task.task)},
              {"eval", eval_json(ev)}};
  std::cout << out.dump() << "\n";
  return kOk;
}

// ---- plot ----------------------------------------------------------------

struct PlotArgs {
  std::vector<std::string> metrics;
  std::string out;
  std::uint64_t max_loops = 8;
};

int cmd_plot(const PlotArgs& a) {
  Manifest man("plot", output_dir(a.out, "plot"));
  json artifacts = json::array();
  if (!a.metrics.empty()) {
    std::vector<melt::tools::Series> series;
    for (const auto& path : a.metrics) {
      std::ifstream in(path);
      if (!in) throw UsageError("cannot read metrics file " + path);
      std::map<std::string, melt::tools::Series> by_phase;
      std::map<std::string, std::size_t> offset;
      std::size_t global = 0;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw UsageError("malformed metrics line in " + path);
        const std::string phase = j.value("phase", "?");
        auto& s = by_phase[phase];
        s.label = fs::path(path).parent_path().filename().string() + ":" + phase;
        s.points.emplace_back(static_cast<double>(global++), j.value("loss", 0.0));
      }
      for (auto& [p, s] : by_phase) series.push_back(std::move(s));
    }
    std::ofstream(man.dir() / "loss.svg")
        << melt::tools::render_svg({"Training loss", "step (all phases)", "loss", true}, series);
    artifacts.push_back("loss.svg");
  }
  // KV bytes per token against the loop count for the two looped presets.
  namespace mm = melt::memory;
  std::vector<melt::tools::Series> mem;
  for (const char* name : {"melt16", "ouro14"}) {
    auto preset = *mm::find_preset(name);
    melt::tools::Series s{preset.spec.name, {}};
    for (std::uint64_t t = 1; t <= a.max_loops; ++t) {
      preset.spec.loops = t;
      s.points.emplace_back(static_cast<double>(t),
                            static_cast<double>(mm::kv_bytes_per_token(preset.spec)) / 1e6);
    }
    mem.push_back(std::move(s));
  }
  std::ofstream(man.dir() / "memory_vs_loops.svg")
      << melt::tools::render_svg({"KV cache per token", "loops T", "MB / token", false}, mem);
  artifacts.push_back("memory_vs_loops.svg");
  man.extra() = {{"plots", artifacts}};
  man.write(kOk);
  std::cout << "wrote " << artifacts.size() << " plot(s) to " << man.dir().string() << "\n";
  return kOk;
}

// ---- config: canonical text of a built-in recipe ------------------------

int cmd_config(const std::string& recipe) {
  const auto opts = recipe.empty() ? melt::train::PipelineOptions{}
                                   : melt::train::desk_recipe(melt::data::parse_task(recipe));
  std::cout << melt::config::to_config_text(opts);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"melt: looped LM with a constant-size latent KV cache"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("melt ") + MELT_GIT_DESCRIBE);

  TeacherArgs ta;
  auto* teacher = app.add_subcommand("teacher", "train the LoopLM teacher from scratch");
  teacher->add_option("--config", ta.config, "key=value config file");
  teacher->add_option("--out", ta.out, "output directory");
  teacher->add_option("--seed", ta.seed, "override the config seed");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "MELT fine-tuning: phase 1, phase 2 or both");
  train->add_option("--config", tr.config, "key=value config file");
  train->add_option("--phase", tr.phase, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  train->add_option("--variant", tr.variant, "gated, mean, ema, last, single_gated");
  train->add_option("--ablate", tr.ablate, "none, no_align, no_interp, no_kd, no_chunk (cumulative)");
  train->add_option("--teacher", tr.teacher, "LoopLM teacher checkpoint");
  train->add_option("--student", tr.student, "phase-1 MELT checkpoint (for --phase 2)");
  train->add_option("--out", tr.out, "output directory");
  train->add_option("--seed", tr.seed, "override the config seed");

  TrainArgs rc;
  auto* recipe = app.add_subcommand("recipe", "teacher, phase 1, phase 2 and held-out evaluation");
  recipe->add_option("--config", rc.config, "key=value config file");
  recipe->add_option("--variant", rc.variant, "gate variant");
  recipe->add_option("--ablate", rc.ablate, "ablation level");
  recipe->add_option("--out", rc.out, "output directory");
  recipe->add_option("--seed", rc.seed, "override the config seed");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "decode from a checkpoint and report KV memory");
  gen->add_option("--checkpoint", ga.checkpoint, "model checkpoint")->required();
  gen->add_option("--prompt", ga.prompt, "space-separated token ids")->required();
  gen->add_option("--strategy", ga.strategy, "none, first_loop, last_loop (LoopLM only)");
  gen->add_flag("--keep-prompt-cache", ga.keep_prompt_cache, "keep exact per-loop KV for the prompt");
  gen->add_option("--max-new", ga.max_new, "tokens to generate");
  gen->add_option("--seed", ga.seed, "sampling seed");
  gen->add_flag("--sample", ga.sample, "temperature / top-p sampling instead of greedy");
  gen->add_option("--temperature", ga.temperature);
  gen->add_option("--top-p", ga.top_p);

  ProfileArgs pa;
  auto* prof = app.add_subcommand("profile", "KV-cache and weight memory accounting");
  prof->add_option("--preset", pa.presets, "melt16, ouro14, qwen17 (repeatable; default all)");
  prof->add_option("--name", pa.name);
  prof->add_option("--layers", pa.layers);
  prof->add_option("--kv-heads", pa.kv_heads);
  prof->add_option("--head-dim", pa.head_dim);
  prof->add_option("--bytes", pa.bytes);
  prof->add_option("--loops", pa.loops);
  prof->add_option("--cache-mode", pa.cache_mode, "per_loop, shared, standard");
  prof->add_option("--params", pa.params, "parameter count");
  prof->add_option("--length", pa.length, "generation length L");
  prof->add_flag("--include-latent", pa.include_latent, "add the MELT latent H to the per-token figure");
  prof->add_flag("--csv", pa.csv, "print CSV rows instead of the table");
  prof->add_option("--out", pa.out, "also write memory.csv and a manifest here");

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "run the verification suites");
  ver->add_option("--suite", va.suite, "jacobian, superhighway, equivalence, all");
  ver->add_option("--report", va.report, "write the JSON lines report here");
  ver->add_option("--checkpoint", va.checkpoint, "trained MELT checkpoint for the equivalence suite");
  ver->add_option("--inject-fault", va.inject_fault, "none or swapped (negative control)");
  ver->add_option("--seed", va.seed);
  ver->add_option("--out", va.out, "output directory");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "held-out greedy accuracy of a checkpoint");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--config", ea.config);
  ev->add_option("--seed", ea.seed);

  PlotArgs pl;
  auto* plot = app.add_subcommand("plot", "SVG loss curves and memory-vs-loops");
  plot->add_option("--metrics", pl.metrics, "metrics.jsonl files");
  plot->add_option("--out", pl.out, "output directory");
  plot->add_option("--max-loops", pl.max_loops);

  std::string recipe_name;
  auto* cfg = app.add_subcommand("config", "print a complete config file");
  cfg->add_option("--recipe", recipe_name, "copy or modular_add (default: library defaults)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*teacher) return cmd_teacher(ta);
    if (*train) return cmd_train(tr);
    if (*recipe) return cmd_recipe(rc);
    if (*gen) return cmd_generate(ga);
    if (*prof) return cmd_profile(pa);
    if (*ver) return cmd_verify(va);
    if (*ev) return cmd_evaluate(ea);
    if (*plot) return cmd_plot(pl);
    if (*cfg) return cmd_config(recipe_name);
  } catch (const melt::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const melt::config::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const melt::checkpoint::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
