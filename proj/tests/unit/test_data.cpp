#include <gtest/gtest.h>

#include "melt/data.hpp"

namespace melt::data {
namespace {

TEST(Corpus, SameSeedSameBytes) {
  for (Task t : {Task::copy, Task::modular_add}) {
    TaskOptions o;
    o.task = t;
    const auto a = make_corpus(o, 50, 9), b = make_corpus(o, 50, 9), c = make_corpus(o, 50, 10);
    ASSERT_EQ(a.size(), 50u);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].sequence, b[i].sequence);
      differs = differs || a[i].sequence != c[i].sequence;
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Corpus, CopyLayout) {
  TaskOptions o;
  o.digits = 3;
  const Example e{{3, 1, 4, o.sep(), 3, 1, 4}, o.prompt_length()};
  EXPECT_EQ(e.prompt(), (std::vector<TokenId>{3, 1, 4, 10}));
  EXPECT_EQ(e.answer(), (std::vector<TokenId>{3, 1, 4}));
  for (const auto& ex : make_corpus(o, 100, 1)) {
    ASSERT_EQ(ex.sequence.size(), o.sequence_length());
    for (std::size_t i = 0; i < 3; ++i) ASSERT_EQ(ex.sequence[i], ex.sequence[4 + i]);
    ASSERT_EQ(ex.sequence[3], o.sep());
  }
}

TEST(Corpus, ModularAddLayout) {
  TaskOptions o;
  o.task = Task::modular_add;
  o.digits = 1;
  o.modulus = 7;
  EXPECT_EQ(o.sep(), 7u);
  for (const auto& ex : make_corpus(o, 200, 2)) {
    ASSERT_EQ(ex.sequence.size(), 4u);
    ASSERT_EQ(ex.sequence[3], (ex.sequence[0] + ex.sequence[1]) % 7);
    if (ex.sequence[0] == 5 && ex.sequence[1] == 4) {
      EXPECT_EQ(ex.sequence[3], 2u);
    }
  }
  const Example e{{5, 4, 7, 2}, 3};
  EXPECT_EQ(e.answer(), (std::vector<TokenId>{2}));
}

TEST(Corpus, TeacherForcingViews) {
  const Example e{{1, 2, 9, 1, 2}, 3};
  EXPECT_EQ(e.inputs(), (std::vector<TokenId>{1, 2, 9, 1}));
  EXPECT_EQ(e.targets(), (std::vector<TokenId>{2, 9, 1, 2}));
  EXPECT_EQ(e.loss_mask(), (std::vector<std::uint8_t>{0, 0, 1, 1}));
}

TEST(Corpus, InvalidOptions) {
  TaskOptions o;
  o.digits = 0;
  EXPECT_THROW(o.validate(), std::invalid_argument);
  EXPECT_THROW((void)parse_task("sort"), std::invalid_argument);
}

TEST(BatchQueue, DeliversEveryBatchInOrder) {
  TaskOptions o;
  const auto corpus = make_corpus(o, 30, 3);
  std::vector<std::vector<TokenId>> first, second;
  for (auto* out : {&first, &second}) {
    BatchQueue q(corpus, Task::copy, 4, 25, 77, 2);
    std::size_t n = 0;
    while (auto b = q.pop()) {
      ASSERT_EQ(b->examples.size(), 4u);
      for (const auto& e : b->examples) out->push_back(e.sequence);
      ++n;
    }
    EXPECT_EQ(n, 25u);
  }
  EXPECT_EQ(first, second);
}

TEST(BatchQueue, EarlyDestructionJoinsProducer) {
  TaskOptions o;
  const auto corpus = make_corpus(o, 10, 4);
  for (int i = 0; i < 20; ++i) {
    BatchQueue q(corpus, Task::copy, 2, 1000, i, 1);
    (void)q.pop();
  }
  SUCCEED();
}

}  // namespace
}  // namespace melt::data
