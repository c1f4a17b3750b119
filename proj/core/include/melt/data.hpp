#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "melt/ops.hpp"

namespace melt::data {

enum class Task { copy, modular_add };

Task parse_task(const std::string& s);
std::string to_string(Task t);

/// Token layout: symbols 0..alphabet-1, then the separator.
///   copy         x_1..x_k SEP x_1..x_k              (x_i < alphabet)
///   modular_add  a_1..a_k b_1..b_k SEP c_1..c_k     (c_i = (a_i + b_i) mod p)
struct TaskOptions {
  Task task = Task::copy;
  std::size_t digits = 4;     // k
  std::size_t alphabet = 10;  // copy symbols
  std::size_t modulus = 7;    // p

  TokenId sep() const;
  std::size_t sequence_length() const;
  std::size_t prompt_length() const;  // up to and including SEP
  /// Smallest vocabulary that holds every token.
  std::size_t min_vocab() const;
  void validate() const;
};

struct Example {
  std::vector<TokenId> sequence;
  std::size_t prompt_len = 0;

  /// Teacher forcing: inputs are sequence[0..n-2], targets sequence[1..n-1].
  std::vector<TokenId> inputs() const;
  std::vector<TokenId> targets() const;
  /// 1 where the target belongs to the answer.
  std::vector<std::uint8_t> loss_mask() const;
  std::vector<TokenId> prompt() const;
  std::vector<TokenId> answer() const;
};

struct Batch {
  Task task = Task::copy;
  std::vector<Example> examples;
};

/// Deterministic per (options, seed).
std::vector<Example> make_corpus(const TaskOptions& opts, std::size_t size, std::uint64_t seed);

/// Bounded FIFO fed by one producer thread that samples batches from a corpus
/// in a fixed order. pop() blocks while the queue is empty; the producer
/// blocks while it is full.
class BatchQueue {
 public:
  BatchQueue(const std::vector<Example>& corpus, Task task, std::size_t batch_size,
             std::size_t n_batches, std::uint64_t seed, std::size_t capacity = 4);
  ~BatchQueue();
  BatchQueue(const BatchQueue&) = delete;
  BatchQueue& operator=(const BatchQueue&) = delete;

  /// nullopt once all n_batches have been handed out.
  std::optional<Batch> pop();

 private:
  void produce();

  const std::vector<Example>& corpus_;
  Task task_;
  std::size_t batch_size_;
  std::size_t n_batches_;
  std::uint64_t seed_;
  std::size_t capacity_;

  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::deque<Batch> queue_;
  bool done_ = false;
  bool stop_ = false;
  std::thread producer_;
};

}  // namespace melt::data
