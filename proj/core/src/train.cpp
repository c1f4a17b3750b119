#include "melt/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace melt::train {

void TrainSchedule::validate() const {
  if (chunk_size < 1) throw std::invalid_argument("chunk_size must be >= 1");
  if (interp_steps < 1) throw std::invalid_argument("interp_steps must be >= 1");
  if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (grad_clip <= 0.0) throw std::invalid_argument("grad_clip must be > 0");
  if (learning_rate < 0.0 || gate_learning_rate < 0.0 || teacher_learning_rate < 0.0) {
    throw std::invalid_argument("learning rates must be >= 0");
  }
  if (ce_weight < 0.0) throw std::invalid_argument("ce_weight must be >= 0");
  if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0) {
    throw std::invalid_argument("min_lr_ratio must lie in [0, 1]");
  }
}

Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "no_align") return Ablation::no_align;
  if (s == "no_interp") return Ablation::no_interp;
  if (s == "no_kd") return Ablation::no_kd;
  if (s == "no_chunk") return Ablation::no_chunk;
  throw std::invalid_argument("unknown ablation '" + s +
                              "' (expected none, no_align, no_interp, no_kd or no_chunk)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_align: return "no_align";
    case Ablation::no_interp: return "no_interp";
    case Ablation::no_kd: return "no_kd";
    case Ablation::no_chunk: return "no_chunk";
  }
  return "?";
}

AblationEffects effects(Ablation a) {
  const int level = static_cast<int>(a);
  return {level < 1, level < 2, level < 3, level < 4};
}

double alpha_schedule(std::size_t step, std::size_t interp_steps) {
  if (interp_steps == 0) throw std::invalid_argument("alpha_schedule: interp_steps must be > 0");
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(interp_steps));
}

TeacherOutputs TeacherHandle::run(std::span<const TokenId> tokens) const {
  NoGradScope no_grad;
  LoopForward f = model_.forward(tokens);
  return {std::move(f.logits), std::move(f.post_attn)};
}

std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

std::uint64_t TeacherHandle::checksum() const {
  return parameter_checksum(model_.named_parameters());
}

namespace {

Tensor constant_copy(const Tensor& t) {
  return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

void check_loss(double v, const std::string& what, const std::string& phase, std::size_t step) {
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << phase << " step " << step << ": non-finite " << what << " (" << v << ")";
    throw NumericError(os.str());
  }
}

}  // namespace

KDTerms kd_all_loops_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                          std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                          const LossWeights& w) {
  if (student.size() != teacher.size()) {
    throw DimensionError("kd_all_loops_loss: student has " + std::to_string(student.size()) +
                         " loops, teacher " + std::to_string(teacher.size()));
  }
  if (student.empty()) throw DimensionError("kd_all_loops_loss: no loops");
  const std::size_t n = student[0].rows(), v = student[0].cols();
  if (targets.size() != n || (!mask.empty() && mask.size() != n)) {
    throw DimensionError("kd_all_loops_loss: targets/mask length does not match " +
                         std::to_string(n) + " positions");
  }
  std::size_t selected = 0;
  for (std::size_t i = 0; i < n; ++i) selected += mask.empty() || mask[i] ? 1 : 0;
  if (selected == 0) throw std::invalid_argument("kd_all_loops_loss: mask selects no position");
  const double norm = 1.0 / (static_cast<double>(selected) * static_cast<double>(student.size()));

  KDTerms out;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t t = 0; t < student.size(); ++t) {
    if (student[t].shape() != teacher[t].shape()) {
      throw DimensionError("kd_all_loops_loss: loop " + std::to_string(t) + " student " +
                           melt::to_string(student[t].shape()) + " vs teacher " +
                           melt::to_string(teacher[t].shape()));
    }
    const Tensor logp = log_softmax_rows(student[t]);
    // Teacher probabilities are constants; the entropy term needs no graph.
    Tensor tlogp;
    {
      NoGradScope ng;
      tlogp = log_softmax_rows(teacher[t]);
    }
    Tensor kd_w(Shape{n, v}), ce_w(Shape{n, v});
    double neg_entropy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(mask.empty() || mask[i])) continue;
      if (targets[i] >= v) throw std::out_of_range("kd_all_loops_loss: target out of range");
      for (std::size_t j = 0; j < v; ++j) {
        const double lp = tlogp.at(i, j);
        const double p = std::exp(lp);
        kd_w.mutable_data()[i * v + j] = p * norm;
        if (p > 0.0) neg_entropy += p * lp * norm;
      }
      ce_w.mutable_data()[i * v + targets[i]] = norm;
    }
    // KL = sum p_t log p_t - sum p_t log p_s
    const Tensor kl = affine(scale(sum(mul(logp, kd_w)), -1.0), 1.0, neg_entropy);
    const Tensor ce = scale(sum(mul(logp, ce_w)), -1.0);
    out.kd += kl.item();
    out.ce += ce.item();
    total = add(total, add(scale(kl, w.kd), scale(ce, w.ce)));
  }
  out.total = total;
  return out;
}

Tensor attention_align_loss(const std::vector<std::vector<Tensor>>& student,
                            const std::vector<std::vector<Tensor>>& teacher, double beta,
                            bool token_mean) {
  if (student.size() != teacher.size() || student.empty()) {
    throw DimensionError("attention_align_loss: layer count mismatch (" +
                         std::to_string(student.size()) + " vs " + std::to_string(teacher.size()) +
                         ")");
  }
  const std::size_t loops = student[0].size();
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < student.size(); ++l) {
    if (student[l].size() != loops || teacher[l].size() != loops || loops == 0) {
      throw DimensionError("attention_align_loss: loop count mismatch at layer " +
                           std::to_string(l));
    }
    for (std::size_t t = 0; t < loops; ++t) {
      if (student[l][t].shape() != teacher[l][t].shape()) {
        throw DimensionError("attention_align_loss: shape mismatch at layer " +
                             std::to_string(l) + ", loop " + std::to_string(t));
      }
      const Tensor diff = sub(student[l][t], constant_copy(teacher[l][t]));
      Tensor sq = sum(mul(diff, diff));
      if (token_mean) sq = scale(sq, 1.0 / static_cast<double>(student[l][t].rows()));
      total = add(total, sq);
    }
  }
  return scale(total, beta / static_cast<double>(student.size() * loops));
}

std::string to_json_line(const StepMetrics& m, bool include_wall) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["phase"] = m.phase;
  j["alpha"] = m.alpha;
  j["loss"] = m.loss;
  j["kd"] = m.kd;
  j["ce"] = m.ce;
  j["align"] = m.align;
  j["grad_norm"] = m.grad_norm;
  j["grad_norm_raw"] = m.grad_norm_raw;
  j["lr"] = m.lr;
  if (include_wall) j["wall_ms"] = m.wall_ms;
  return j.dump();
}

optim::AdamW make_student_optimizer(const MeltModel& student, const TrainSchedule& s) {
  optim::AdamW opt({s.adam_beta1, s.adam_beta2, 1e-8, s.weight_decay});
  std::vector<Tensor> base, gates;
  for (const auto& [name, t] : student.base().named_parameters()) base.push_back(t);
  for (const auto& [name, t] : student.gate_parameters()) gates.push_back(t);
  opt.add_group(std::move(base), s.learning_rate);
  opt.add_group(std::move(gates), s.gate_learning_rate);
  return opt;
}

optim::AdamW make_teacher_optimizer(const LoopLM& model, const TrainSchedule& s) {
  optim::AdamW opt({s.adam_beta1, s.adam_beta2, 1e-8, s.weight_decay});
  std::vector<Tensor> params;
  for (const auto& [name, t] : model.named_parameters()) params.push_back(t);
  opt.add_group(std::move(params), s.teacher_learning_rate);
  return opt;
}

namespace {

using Clock = std::chrono::steady_clock;

struct MeltStepSetup {
  std::string phase;
  double alpha;
  double beta;  // 0 disables the align term
  LossWeights weights;
  bool chunked;
  std::size_t total_steps;
};

StepMetrics melt_step(const data::Batch& batch, MeltModel& student, const TeacherHandle& teacher,
                      optim::AdamW& opt, const TrainSchedule& s, std::size_t step,
                      const MeltStepSetup& setup) {
  const auto t0 = Clock::now();
  if (batch.examples.empty()) throw std::invalid_argument(setup.phase + ": empty batch");
  StepMetrics m;
  m.step = step;
  m.phase = setup.phase;
  m.alpha = setup.alpha;
  const double inv_b = 1.0 / static_cast<double>(batch.examples.size());
  opt.zero_grad();
  for (const auto& ex : batch.examples) {
    const auto inputs = ex.inputs();
    const auto targets = ex.targets();
    const auto mask = ex.loss_mask();
    const TeacherOutputs tout = teacher.run(inputs);

    Tape tape;
    TapeScope scope(tape);
    const std::size_t chunk = setup.chunked ? s.chunk_size : inputs.size();
    const MeltForward f = student.forward_chunked(inputs, chunk, setup.alpha);
    KDTerms kd = kd_all_loops_loss(f.logits, tout.logits, targets, mask, setup.weights);
    Tensor loss = kd.total;
    double align = 0.0;
    if (setup.beta > 0.0) {
      const Tensor a = attention_align_loss(f.post_attn, tout.post_attn, setup.beta, s.align_token_mean);
      align = a.item();
      loss = add(loss, a);
    }
    check_loss(loss.item(), "loss", setup.phase, step);
    m.loss += loss.item() * inv_b;
    m.kd += kd.kd * inv_b;
    m.ce += kd.ce * inv_b;
    m.align += align * inv_b;
    tape.backward(scale(loss, inv_b));
  }
  auto params = opt.parameters();
  m.grad_norm_raw = optim::clip_grad_norm(params, s.grad_clip);
  check_loss(m.grad_norm_raw, "gradient norm", setup.phase, step);
  m.grad_norm = optim::global_grad_norm(params);
  const double mult = optim::warmup_cosine(step, s.warmup_steps, setup.total_steps, s.min_lr_ratio);
  m.lr = s.learning_rate * mult;
  opt.step(mult);
  opt.zero_grad();
  m.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  return m;
}

LossWeights loss_weights(const TrainSchedule& s, const AblationEffects& fx) {
  return fx.kd ? LossWeights{1.0, s.ce_weight} : LossWeights{0.0, 1.0};
}

}  // namespace

StepMetrics phase1_step(const data::Batch& batch, MeltModel& student, const TeacherHandle& teacher,
                        optim::AdamW& opt, const TrainSchedule& s, std::size_t step,
                        Ablation ablation) {
  const AblationEffects fx = effects(ablation);
  const double alpha = fx.interp ? alpha_schedule(step, s.interp_steps) : 1.0;
  return melt_step(batch, student, teacher, opt, s, step,
                   {"phase1", alpha, 0.0, loss_weights(s, fx), fx.chunk, s.phase1_steps});
}

StepMetrics phase2_step(const data::Batch& batch, MeltModel& student, const TeacherHandle& teacher,
                        optim::AdamW& opt, const TrainSchedule& s, std::size_t step,
                        Ablation ablation) {
  const AblationEffects fx = effects(ablation);
  return melt_step(batch, student, teacher, opt, s, step,
                   {"phase2", 1.0, fx.align ? s.beta : 0.0, loss_weights(s, fx), fx.chunk,
                    s.phase2_steps});
}

StepMetrics teacher_step(const data::Batch& batch, LoopLM& model, optim::AdamW& opt,
                         const TrainSchedule& s, std::size_t step) {
  const auto t0 = Clock::now();
  StepMetrics m;
  m.step = step;
  m.phase = "teacher";
  const double inv_b = 1.0 / static_cast<double>(batch.examples.size());
  opt.zero_grad();
  for (const auto& ex : batch.examples) {
    const auto inputs = ex.inputs();
    const auto targets = ex.targets();
    const auto mask = ex.loss_mask();
    Tape tape;
    TapeScope scope(tape);
    const LoopForward f = model.forward(inputs);
    // Teacher logits equal to the student's make the KL term vanish.
    std::vector<Tensor> same;
    for (const auto& l : f.logits) same.push_back(constant_copy(l));
    const KDTerms k = kd_all_loops_loss(f.logits, same, targets, mask, {0.0, 1.0});
    check_loss(k.ce, "loss", m.phase, step);
    m.loss += k.ce * inv_b;
    m.ce += k.ce * inv_b;
    tape.backward(scale(k.total, inv_b));
  }
  auto params = opt.parameters();
  m.grad_norm_raw = optim::clip_grad_norm(params, s.grad_clip);
  check_loss(m.grad_norm_raw, "gradient norm", m.phase, step);
  m.grad_norm = optim::global_grad_norm(params);
  const double mult = optim::warmup_cosine(step, s.warmup_steps, s.teacher_steps, s.min_lr_ratio);
  m.lr = s.teacher_learning_rate * mult;
  opt.step(mult);
  opt.zero_grad();
  m.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  return m;
}

namespace {

template <class Model>
EvalResult evaluate_impl(const Model& model, const std::vector<data::Example>& examples) {
  EvalResult r;
  std::size_t correct = 0, exact = 0;
  for (const auto& ex : examples) {
    const auto prompt = ex.prompt();
    const auto answer = ex.answer();
    const GenerateResult g = [&] {
      if constexpr (std::is_same_v<Model, LoopLM>) {
        return generate(model, prompt, answer.size(), ShareStrategy{}, SamplingOptions{}, 0);
      } else {
        return generate(model, prompt, answer.size(), SamplingOptions{}, 0);
      }
    }();
    bool all = true;
    for (std::size_t i = 0; i < answer.size(); ++i) {
      const bool ok = i < g.tokens.size() && g.tokens[i] == answer[i];
      correct += ok ? 1 : 0;
      all = all && ok;
    }
    exact += all ? 1 : 0;
    r.tokens += answer.size();
  }
  if (r.tokens > 0) r.token_accuracy = static_cast<double>(correct) / static_cast<double>(r.tokens);
  if (!examples.empty()) {
    r.sequence_accuracy = static_cast<double>(exact) / static_cast<double>(examples.size());
  }
  return r;
}

}  // namespace

EvalResult evaluate(const MeltModel& model, const std::vector<data::Example>& examples) {
  return evaluate_impl(model, examples);
}

EvalResult evaluate(const LoopLM& model, const std::vector<data::Example>& examples) {
  return evaluate_impl(model, examples);
}

PipelineOptions desk_recipe(data::Task task) {
  PipelineOptions o;
  o.task.task = task;
  auto& s = o.schedule;
  // Chunks of 4 put the second operand of modular_add in its own chunk, so
  // it reads the first operand's final latents as it does at inference.
  s.chunk_size = 4;
  s.interp_steps = 100;
  s.phase1_steps = 400;
  s.phase2_steps = 100;
  if (task == data::Task::copy) {
    o.task.digits = 8;
    s.batch_size = 8;
    s.teacher_steps = 300;
  } else {
    o.task.digits = 4;
    s.batch_size = 16;
    s.teacher_steps = 1500;
  }
  return o;
}

Seeds derive_seeds(std::uint64_t seed) {
  Rng rng(seed ^ 0x6d656c74ULL);
  Seeds s{};
  s.train_corpus = rng();
  s.eval_corpus = rng();
  s.teacher_init = rng();
  s.gates = rng();
  s.teacher_batches = rng();
  s.phase1_batches = rng();
  s.phase2_batches = rng();
  return s;
}

LoopLM train_teacher(const PipelineOptions& opts, const std::vector<data::Example>& corpus,
                     const MetricsSink& sink) {
  const TrainSchedule& s = opts.schedule;
  s.validate();
  const Seeds seeds = derive_seeds(s.seed);
  LoopLM model = LoopLM::random(opts.model, seeds.teacher_init);
  optim::AdamW opt = make_teacher_optimizer(model, s);
  data::BatchQueue queue(corpus, opts.task.task, s.batch_size, s.teacher_steps,
                         seeds.teacher_batches);
  for (std::size_t step = 0; step < s.teacher_steps; ++step) {
    const auto batch = queue.pop();
    const StepMetrics m = teacher_step(*batch, model, opt, s, step);
    if (sink) sink(m);
  }
  return model;
}

void train_melt(MeltModel& student, const TeacherHandle& teacher, const PipelineOptions& opts,
                const std::vector<data::Example>& corpus, bool run_phase1, bool run_phase2,
                const MetricsSink& sink) {
  const TrainSchedule& s = opts.schedule;
  s.validate();
  const Seeds seeds = derive_seeds(s.seed);
  const AblationEffects fx = effects(opts.ablation);
  if (run_phase1) {
    optim::AdamW opt = make_student_optimizer(student, s);
    data::BatchQueue queue(corpus, opts.task.task, s.batch_size, s.phase1_steps,
                           seeds.phase1_batches);
    for (std::size_t step = 0; step < s.phase1_steps; ++step) {
      const auto batch = queue.pop();
      const StepMetrics m = phase1_step(*batch, student, teacher, opt, s, step, opts.ablation);
      if (sink) sink(m);
    }
  }
  // Without alignment the recipe stops after phase 1.
  if (run_phase2 && fx.align) {
    optim::AdamW opt = make_student_optimizer(student, s);
    data::BatchQueue queue(corpus, opts.task.task, s.batch_size, s.phase2_steps,
                           seeds.phase2_batches);
    for (std::size_t step = 0; step < s.phase2_steps; ++step) {
      const auto batch = queue.pop();
      const StepMetrics m = phase2_step(*batch, student, teacher, opt, s, step, opts.ablation);
      if (sink) sink(m);
    }
  }
}

PipelineResult run_pipeline(const PipelineOptions& opts, const MetricsSink& sink) {
  opts.model.validate();
  opts.task.validate();
  if (opts.task.min_vocab() > opts.model.vocab_size) {
    throw std::invalid_argument("task needs vocab_size >= " + std::to_string(opts.task.min_vocab()));
  }
  const Seeds seeds = derive_seeds(opts.schedule.seed);
  const auto train = data::make_corpus(opts.task, opts.train_size, seeds.train_corpus);
  const auto held_out = data::make_corpus(opts.task, opts.eval_size, seeds.eval_corpus);

  LoopLM teacher_model = train_teacher(opts, train, sink);
  const TeacherHandle teacher(teacher_model.clone());
  MeltModel student = MeltModel::from_looplm(teacher.model(), seeds.gates, opts.melt);
  train_melt(student, teacher, opts, train, true, true, sink);

  PipelineResult r{std::move(teacher_model), std::move(student), {}, {}};
  r.teacher_eval = evaluate(r.teacher, held_out);
  r.melt_eval = evaluate(r.student, held_out);
  return r;
}

}  // namespace melt::train
