#include <benchmark/benchmark.h>

#include "melt/melt.hpp"
#include "melt/optim.hpp"
#include "melt/train.hpp"

namespace melt {
namespace {

Tensor random_tensor(Shape s, Rng& rng) {
  Tensor t(std::move(s));
  for (auto& v : t.mutable_data()) v = uniform(rng, -1, 1);
  return t;
}

ModelConfig bench_config(std::size_t loops) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 64;
  c.n_heads = 4;
  c.loops = loops;
  c.vocab_size = 32;
  c.ffn_dim = 128;
  return c;
}

std::vector<TokenId> tokens(std::size_t n) {
  std::vector<TokenId> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = (i * 7 + 3) % 32;
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    TapeScope s(tape);
    tape.backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Tensor q = random_tensor({n, 64}, rng), k = random_tensor({n, 64}, rng),
               v = random_tensor({n, 64}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v, 4, 0));
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(64)->Arg(256);

void BM_LoopLMForward(benchmark::State& state) {
  const LoopLM m = LoopLM::random(bench_config(static_cast<std::size_t>(state.range(0))), 4);
  const auto toks = tokens(32);
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(toks));
}
BENCHMARK(BM_LoopLMForward)->Arg(1)->Arg(3)->Arg(6);

void BM_MeltChunkedForward(benchmark::State& state) {
  const MeltModel m = MeltModel::from_looplm(LoopLM::random(bench_config(3), 5), 6);
  const auto toks = tokens(32);
  const auto chunk = static_cast<std::size_t>(state.range(0));
  NoGradScope ng;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward_chunked(toks, chunk));
}
BENCHMARK(BM_MeltChunkedForward)->Arg(1)->Arg(4)->Arg(8)->Arg(32);

void BM_MeltChunkedForwardBackward(benchmark::State& state) {
  MeltModel m = MeltModel::from_looplm(LoopLM::random(bench_config(3), 7), 8);
  const auto toks = tokens(32);
  const auto chunk = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    Tape tape;
    TapeScope s(tape);
    const auto f = m.forward_chunked(toks, chunk, 0.5);
    tape.backward(mean(log_softmax_rows(f.logits.back())));
  }
}
BENCHMARK(BM_MeltChunkedForwardBackward)->Arg(4)->Arg(32);

void BM_MeltDecodeStep(benchmark::State& state) {
  const MeltModel m = MeltModel::from_looplm(LoopLM::random(bench_config(3), 9), 10);
  const auto prefix = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    state.PauseTiming();
    MeltSession s(m);
    for (std::size_t i = 0; i < prefix; ++i) s.step(i % 32);
    state.ResumeTiming();
    benchmark::DoNotOptimize(s.step(1));
  }
}
BENCHMARK(BM_MeltDecodeStep)->Arg(16)->Arg(64);

void BM_Phase1Step(benchmark::State& state) {
  const train::TeacherHandle teacher(LoopLM::random(bench_config(3), 11));
  MeltModel student = MeltModel::from_looplm(teacher.model(), 12);
  train::TrainSchedule s;
  s.chunk_size = 4;
  auto opt = train::make_student_optimizer(student, s);
  data::TaskOptions task;
  task.digits = 8;
  const data::Batch batch{data::Task::copy, data::make_corpus(task, 8, 1)};
  std::size_t step = 0;
  for (auto _ : state) benchmark::DoNotOptimize(train::phase1_step(batch, student, teacher, opt, s, step++));
}
BENCHMARK(BM_Phase1Step)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace melt

BENCHMARK_MAIN();
