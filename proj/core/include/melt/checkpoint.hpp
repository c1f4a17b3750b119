#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "melt/looplm.hpp"
#include "melt/melt.hpp"

namespace melt::checkpoint {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kMagic[8] = {'M', 'E', 'L', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

enum class Kind : std::uint32_t { looplm = 1, melt = 2 };

std::string to_string(Kind k);

/// Byte layout in docs/checkpoint_format.md. Everything little-endian.
std::vector<std::uint8_t> serialize(const LoopLM& model);
std::vector<std::uint8_t> serialize(const MeltModel& model);

struct Loaded {
  Kind kind = Kind::looplm;
  std::optional<LoopLM> looplm;
  std::optional<MeltModel> melt;

  /// The LoopLM itself, or a MELT model's base.
  const LoopLM& base() const;
};

Loaded deserialize(const std::vector<std::uint8_t>& bytes);

void save(const std::filesystem::path& path, const LoopLM& model);
void save(const std::filesystem::path& path, const MeltModel& model);
Loaded load(const std::filesystem::path& path);

}  // namespace melt::checkpoint
