#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "melt/data.hpp"
#include "melt/looplm.hpp"
#include "melt/melt.hpp"
#include "melt/optim.hpp"

namespace melt::train {

struct TrainSchedule {
  std::size_t chunk_size = 8;
  std::size_t interp_steps = 200;  // alpha reaches 1
  std::size_t phase1_steps = 400;
  std::size_t phase2_steps = 200;
  double beta = 0.1;
  double learning_rate = 1e-3;
  double gate_learning_rate = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  std::size_t warmup_steps = 20;
  double min_lr_ratio = 0.1;
  std::size_t batch_size = 8;
  double ce_weight = 0.5;
  /// Align loss: mean of the squared norm over tokens (true) or plain sum.
  bool align_token_mean = true;
  std::size_t teacher_steps = 600;
  double teacher_learning_rate = 3e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Cumulative, in the order of the component-removal study: each level also
/// removes everything before it.
///   no_align   phase 1 only
///   no_interp  + alpha pinned to 1 from step 0
///   no_kd      + cross-entropy to targets only
///   no_chunk   + one chunk per sequence (fully parallel training)
enum class Ablation { none, no_align, no_interp, no_kd, no_chunk };

Ablation parse_ablation(const std::string& s);
std::string to_string(Ablation a);

struct AblationEffects {
  bool align = true;
  bool interp = true;
  bool kd = true;
  bool chunk = true;
};
AblationEffects effects(Ablation a);

/// min(step / interp_steps, 1)
double alpha_schedule(std::size_t step, std::size_t interp_steps);

struct TeacherOutputs {
  std::vector<Tensor> logits;                  // [loop] -> [L x vocab]
  std::vector<std::vector<Tensor>> post_attn;  // [layer][loop] -> [L x d]
};

/// A frozen LoopLM. Its forwards never record on a tape, so its parameters
/// can not receive gradients.
class TeacherHandle {
 public:
  explicit TeacherHandle(LoopLM model) : model_(std::move(model)) {}

  const LoopLM& model() const { return model_; }
  TeacherOutputs run(std::span<const TokenId> tokens) const;
  /// FNV-1a over the raw parameter bytes.
  std::uint64_t checksum() const;

 private:
  LoopLM model_;
};

std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params);

struct LossWeights {
  double kd = 1.0;
  double ce = 0.5;
};

struct KDTerms {
  Tensor total;  // kd_weight * kd + ce_weight * ce, on the tape
  double kd = 0.0;
  double ce = 0.0;
};

/// Mean over loops and selected positions of KL(teacher || student) at
/// temperature 1, plus cross-entropy of every loop to the targets. An empty
/// mask selects every position.
KDTerms kd_all_loops_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                          std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                          const LossWeights& w);

/// beta / (N T) * sum_l sum_t ||o_student - sg(o_teacher)||^2, the squared
/// norm averaged over tokens when token_mean is set.
Tensor attention_align_loss(const std::vector<std::vector<Tensor>>& student,
                            const std::vector<std::vector<Tensor>>& teacher, double beta,
                            bool token_mean = true);

struct StepMetrics {
  std::size_t step = 0;
  std::string phase;  // teacher | phase1 | phase2
  double alpha = 1.0;
  double loss = 0.0;
  double kd = 0.0;
  double ce = 0.0;
  double align = 0.0;
  double grad_norm = 0.0;      // after clipping
  double grad_norm_raw = 0.0;  // before clipping
  double lr = 0.0;
  double wall_ms = 0.0;
};

/// One JSON object; wall_ms is omitted when include_wall is false.
std::string to_json_line(const StepMetrics& m, bool include_wall = true);

using MetricsSink = std::function<void(const StepMetrics&)>;

/// Optimizer over a MELT student: base parameters at learning_rate, gate
/// parameters at gate_learning_rate.
optim::AdamW make_student_optimizer(const MeltModel& student, const TrainSchedule& s);
optim::AdamW make_teacher_optimizer(const LoopLM& model, const TrainSchedule& s);

/// Phase 1: chunk-wise forward at alpha(step), loss = KD on all loops.
StepMetrics phase1_step(const data::Batch& batch, MeltModel& student, const TeacherHandle& teacher,
                        optim::AdamW& opt, const TrainSchedule& s, std::size_t step,
                        Ablation ablation = Ablation::none);

/// Phase 2: alpha = 1, loss = KD on all loops + attention alignment.
StepMetrics phase2_step(const data::Batch& batch, MeltModel& student, const TeacherHandle& teacher,
                        optim::AdamW& opt, const TrainSchedule& s, std::size_t step,
                        Ablation ablation = Ablation::none);

/// Cross-entropy on all loops for training a LoopLM from scratch.
StepMetrics teacher_step(const data::Batch& batch, LoopLM& model, optim::AdamW& opt,
                         const TrainSchedule& s, std::size_t step);

struct EvalResult {
  double token_accuracy = 0.0;
  double sequence_accuracy = 0.0;
  std::size_t tokens = 0;
};

/// Greedy autoregressive decoding of every answer from its prompt, scored
/// on the final loop's choice.
EvalResult evaluate(const MeltModel& model, const std::vector<data::Example>& examples);
EvalResult evaluate(const LoopLM& model, const std::vector<data::Example>& examples);

struct PipelineOptions {
  ModelConfig model{};
  data::TaskOptions task{};
  TrainSchedule schedule{};
  MeltOptions melt{};
  Ablation ablation = Ablation::none;
  std::size_t train_size = 4000;
  std::size_t eval_size = 200;
};

/// Schedules sized for one core:
///   copy         k=8 symbols, batch 8, 300 teacher steps
///   modular_add  k=4 digits mod 7, batch 16, 1500 teacher steps
/// Both use chunks of 4 and 400 + 100 student steps.
PipelineOptions desk_recipe(data::Task task);

struct Seeds {
  std::uint64_t train_corpus, eval_corpus, teacher_init, gates, teacher_batches, phase1_batches,
      phase2_batches;
};
Seeds derive_seeds(std::uint64_t seed);

LoopLM train_teacher(const PipelineOptions& opts, const std::vector<data::Example>& corpus,
                     const MetricsSink& sink);

/// Phases 1 and/or 2 starting from `student` (which phase 1 expects to be a
/// fresh from_looplm copy of the teacher).
void train_melt(MeltModel& student, const TeacherHandle& teacher, const PipelineOptions& opts,
                const std::vector<data::Example>& corpus, bool run_phase1, bool run_phase2,
                const MetricsSink& sink);

struct PipelineResult {
  LoopLM teacher;
  MeltModel student;
  EvalResult teacher_eval;
  EvalResult melt_eval;
};

/// Teacher from scratch, then MELT phases 1 and 2, then held-out evaluation.
PipelineResult run_pipeline(const PipelineOptions& opts, const MetricsSink& sink);

}  // namespace melt::train
