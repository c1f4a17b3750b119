#include "melt/data.hpp"

#include <stdexcept>

#include "melt/model.hpp"

namespace melt::data {

Task parse_task(const std::string& s) {
  if (s == "copy") return Task::copy;
  if (s == "modular_add") return Task::modular_add;
  throw std::invalid_argument("unknown task '" + s + "' (expected copy or modular_add)");
}

std::string to_string(Task t) { return t == Task::copy ? "copy" : "modular_add"; }

TokenId TaskOptions::sep() const {
  return task == Task::copy ? alphabet : modulus;
}

std::size_t TaskOptions::sequence_length() const {
  return task == Task::copy ? 2 * digits + 1 : 3 * digits + 1;
}

std::size_t TaskOptions::prompt_length() const {
  return task == Task::copy ? digits + 1 : 2 * digits + 1;
}

std::size_t TaskOptions::min_vocab() const { return sep() + 1; }

void TaskOptions::validate() const {
  if (digits == 0) throw std::invalid_argument("task: digits must be >= 1");
  if (task == Task::copy && alphabet < 2) throw std::invalid_argument("task: alphabet must be >= 2");
  if (task == Task::modular_add && modulus < 2) {
    throw std::invalid_argument("task: modulus must be >= 2");
  }
}

std::vector<TokenId> Example::inputs() const {
  return {sequence.begin(), sequence.end() - 1};
}

std::vector<TokenId> Example::targets() const {
  return {sequence.begin() + 1, sequence.end()};
}

std::vector<std::uint8_t> Example::loss_mask() const {
  std::vector<std::uint8_t> m(sequence.size() - 1, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = i + 1 >= prompt_len ? 1 : 0;
  return m;
}

std::vector<TokenId> Example::prompt() const {
  return {sequence.begin(), sequence.begin() + static_cast<std::ptrdiff_t>(prompt_len)};
}

std::vector<TokenId> Example::answer() const {
  return {sequence.begin() + static_cast<std::ptrdiff_t>(prompt_len), sequence.end()};
}

namespace {

Example draw(const TaskOptions& opts, Rng& rng) {
  Example ex;
  ex.prompt_len = opts.prompt_length();
  auto& s = ex.sequence;
  const std::size_t k = opts.digits;
  if (opts.task == Task::copy) {
    std::vector<TokenId> x(k);
    for (auto& v : x) v = rng() % opts.alphabet;
    s.insert(s.end(), x.begin(), x.end());
    s.push_back(opts.sep());
    s.insert(s.end(), x.begin(), x.end());
  } else {
    std::vector<TokenId> a(k), b(k);
    for (auto& v : a) v = rng() % opts.modulus;
    for (auto& v : b) v = rng() % opts.modulus;
    s.insert(s.end(), a.begin(), a.end());
    s.insert(s.end(), b.begin(), b.end());
    s.push_back(opts.sep());
    for (std::size_t i = 0; i < k; ++i) s.push_back((a[i] + b[i]) % opts.modulus);
  }
  return ex;
}

}  // namespace

std::vector<Example> make_corpus(const TaskOptions& opts, std::size_t size, std::uint64_t seed) {
  opts.validate();
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(draw(opts, rng));
  return out;
}

BatchQueue::BatchQueue(const std::vector<Example>& corpus, Task task, std::size_t batch_size,
                       std::size_t n_batches, std::uint64_t seed, std::size_t capacity)
    : corpus_(corpus),
      task_(task),
      batch_size_(batch_size),
      n_batches_(n_batches),
      seed_(seed),
      capacity_(capacity == 0 ? 1 : capacity) {
  if (corpus_.empty() || batch_size_ == 0) {
    throw std::invalid_argument("BatchQueue: empty corpus or zero batch size");
  }
  producer_ = std::thread([this] { produce(); });
}

BatchQueue::~BatchQueue() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  not_full_.notify_all();
  producer_.join();
}

void BatchQueue::produce() {
  Rng rng(seed_);
  for (std::size_t b = 0; b < n_batches_; ++b) {
    Batch batch{task_, {}};
    batch.examples.reserve(batch_size_);
    for (std::size_t i = 0; i < batch_size_; ++i) {
      batch.examples.push_back(corpus_[rng() % corpus_.size()]);
    }
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
    if (stop_) return;
    queue_.push_back(std::move(batch));
    not_empty_.notify_one();
  }
  std::lock_guard lock(mu_);
  done_ = true;
  not_empty_.notify_all();
}

std::optional<Batch> BatchQueue::pop() {
  std::unique_lock lock(mu_);
  not_empty_.wait(lock, [this] { return done_ || !queue_.empty(); });
  if (queue_.empty()) return std::nullopt;
  Batch b = std::move(queue_.front());
  queue_.pop_front();
  not_full_.notify_one();
  return b;
}

}  // namespace melt::data
