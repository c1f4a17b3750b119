#include <gtest/gtest.h>

#include <filesystem>

#include "melt/checkpoint.hpp"
#include "melt/config.hpp"

namespace melt {
namespace {

TEST(Config, ParsesOverridesAndKeepsDefaults) {
  const auto o = config::parse_config("# comment\nloops = 5\ntask = modular_add\n\nbeta=0.25\n");
  EXPECT_EQ(o.model.loops, 5u);
  EXPECT_EQ(o.task.task, data::Task::modular_add);
  EXPECT_EQ(o.schedule.beta, 0.25);
  EXPECT_EQ(o.model.hidden_dim, ModelConfig{}.hidden_dim);
}

TEST(Config, ErrorsNameTheKey) {
  const std::pair<const char*, const char*> bad[] = {
      {"loopz = 3\n", "loopz"},
      {"loops = three\n", "loops"},
      {"beta = 0.1\nbeta = 0.2\n", "beta"},
      {"seed =\n", "seed"},
      {"align_token_mean = maybe\n", "align_token_mean"},
  };
  for (auto [text, key] : bad) {
    try {
      (void)config::parse_config(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const config::ConfigError& e) {
      EXPECT_EQ(e.key(), key);
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
}

TEST(Config, CanonicalTextRoundTrips) {
  auto o = train::desk_recipe(data::Task::modular_add);
  o.schedule.learning_rate = 1.0 / 3.0;
  o.melt.variant = GateVariant::ema;
  const auto back = config::parse_config(config::to_config_text(o));
  EXPECT_EQ(config::to_config_text(back), config::to_config_text(o));
  EXPECT_EQ(back.schedule.learning_rate, o.schedule.learning_rate);
}

TEST(Config, ValidateCatchesSmallVocabulary) {
  auto o = config::parse_config("vocab_size = 5\n");
  EXPECT_THROW(config::validate(o), config::ConfigError);
}

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.loops = 2;
  c.vocab_size = 7;
  c.ffn_dim = 12;
  return c;
}

bool same_params(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
    for (std::size_t j = 0; j < a[i].second.size(); ++j) {
      if (a[i].second.at(j) != b[i].second.at(j)) return false;
    }
  }
  return true;
}

TEST(Checkpoint, RoundTripsBothKinds) {
  const LoopLM base = LoopLM::random(tiny(), 1);
  const MeltModel melt = MeltModel::from_looplm(base, 2, {GateVariant::ema, 0.3, GateFault::none});
  const auto a = checkpoint::deserialize(checkpoint::serialize(base));
  ASSERT_EQ(a.kind, checkpoint::Kind::looplm);
  EXPECT_TRUE(a.looplm->config() == base.config());
  EXPECT_TRUE(same_params(a.looplm->named_parameters(), base.named_parameters()));
  const auto b = checkpoint::deserialize(checkpoint::serialize(melt));
  ASSERT_EQ(b.kind, checkpoint::Kind::melt);
  EXPECT_EQ(b.melt->options().variant, GateVariant::ema);
  EXPECT_EQ(b.melt->options().ema_decay, 0.3);
  EXPECT_TRUE(same_params(b.melt->named_parameters(), melt.named_parameters()));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "melt_test_ckpt.bin";
  const LoopLM base = LoopLM::random(tiny(), 3);
  checkpoint::save(path, base);
  const auto back = checkpoint::load(path);
  EXPECT_TRUE(same_params(back.base().named_parameters(), base.named_parameters()));
  std::filesystem::remove(path);
  EXPECT_THROW((void)checkpoint::load(path), checkpoint::CheckpointError);
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto bytes = checkpoint::serialize(LoopLM::random(tiny(), 4));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)checkpoint::deserialize(bad_magic), checkpoint::CheckpointError);
  auto bad_version = bytes;
  bad_version[8] = 99;
  EXPECT_THROW((void)checkpoint::deserialize(bad_version), checkpoint::CheckpointError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 8);
  EXPECT_THROW((void)checkpoint::deserialize(truncated), checkpoint::CheckpointError);
  EXPECT_THROW((void)checkpoint::deserialize({}), checkpoint::CheckpointError);
}

}  // namespace
}  // namespace melt
