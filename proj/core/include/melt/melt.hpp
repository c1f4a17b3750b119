#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "melt/looplm.hpp"
#include "melt/model.hpp"

namespace melt {

/// Per-layer parameters of the gated latent update.
struct GateParams {
  Tensor w_z;  // [d x d], reads the layer input x
  Tensor u_z;  // [d x d], reads the previous latent h
  Tensor b_z;  // [d]
};

/// Small uniform W_z/U_z in +-0.02 and b_z = +1 (initial gate ~0.73, biased
/// toward keeping the loop-1 state).
GateParams init_gate_params(std::size_t dim, Rng& rng, double weight_bound = 0.02,
                            double bias = 1.0);

enum class GateVariant { gated, mean, ema, last, single_gated };

GateVariant parse_gate_variant(const std::string& s);
std::string to_string(GateVariant v);

/// Deliberate miswiring used as a negative control by the verification suite:
/// `swapped` exchanges the roles of z and 1-z in the gated update.
enum class GateFault { none, swapped };

struct GateOutput {
  Tensor h;
  Tensor z;
};

/// z = sigmoid(x W_z + h_prev U_z + b_z);  h = z * h_prev + (1 - z) * x.
/// Works on single rows ([d]) and on row blocks ([n x d]).
GateOutput gated_update(const Tensor& x, const Tensor& h_prev, const GateParams& gp);

/// The same update with a constant gate value in every component.
Tensor fixed_gate_update(const Tensor& x, const Tensor& h_prev, double z);

struct VariantOptions {
  double ema_decay = 0.2;
  GateFault fault = GateFault::none;
};

/// Latent update at loop `loop` (1-based, >= 2; loop 1 always sets h = x).
///   gated        element-wise learned gate
///   mean         running mean of the loop inputs 1..loop
///   ema          h = decay * h_prev + (1 - decay) * x
///   last         h = x
///   single_gated scalar gate per row: sigmoid of the mean pre-activation
Tensor variant_update(GateVariant variant, const Tensor& x, const Tensor& h_prev,
                      std::size_t loop, const GateParams& gp, const VariantOptions& opts = {});

/// alpha * kv_melt + (1 - alpha) * kv_base; alpha must lie in [0, 1].
Tensor interpolate_kv(const Tensor& kv_melt, const Tensor& kv_base, double alpha);

/// Per-layer latent matrix H (one row per token) and the K/V rows derived
/// from it. Committed rows are final: every loop has run for those tokens.
/// New tokens enter as a pending block that loops rewrite until commit().
///
/// Outside chunk mode the pending block is exactly one token, and writes
/// aimed at any other position are rejected.
class LatentKVState {
 public:
  LatentKVState() = default;
  LatentKVState(std::size_t n_layers, std::size_t dim, std::size_t loops, bool chunk_mode);

  std::size_t n_layers() const { return layers_.size(); }
  std::size_t loops() const { return loops_; }
  bool chunk_mode() const { return chunk_mode_; }
  /// Committed tokens.
  std::size_t tokens() const { return committed_; }
  std::size_t pending_rows() const { return pending_rows_; }

  const Tensor& H(std::size_t layer) const { return layers_.at(layer).h; }
  const Tensor& K(std::size_t layer) const { return layers_.at(layer).k; }
  const Tensor& V(std::size_t layer) const { return layers_.at(layer).v; }
  const Tensor& pending_H(std::size_t layer) const { return layers_.at(layer).ph; }
  const Tensor& pending_K(std::size_t layer) const { return layers_.at(layer).pk; }
  const Tensor& pending_V(std::size_t layer) const { return layers_.at(layer).pv; }
  std::span<const std::uint32_t> loops_done(std::size_t layer) const {
    return layers_.at(layer).loops_done;
  }

  /// Committed K/V elements, plus the latent H when `include_latent`.
  std::size_t element_count(bool include_latent = false) const;

  void open(std::size_t rows);
  /// Rows for positions first_pos.. of the pending block after loop `loop`.
  void write(std::size_t layer, std::size_t first_pos, Tensor h, Tensor k, Tensor v,
             std::uint32_t loop);
  void commit();

  /// Record a read of the committed rows of `layer`; rows that have not
  /// finished all loops are counted as violations.
  void note_committed_read(std::size_t layer);
  std::size_t committed_reads() const { return committed_reads_; }
  std::size_t nonfinal_reads() const { return nonfinal_reads_; }

 private:
  struct Layer {
    Tensor h, k, v;     // committed
    Tensor ph, pk, pv;  // pending
    std::vector<std::uint32_t> loops_done;
    std::uint32_t pending_loop = 0;
  };
  std::vector<Layer> layers_;
  std::size_t dim_ = 0;
  std::size_t loops_ = 0;
  bool chunk_mode_ = false;
  std::size_t committed_ = 0;
  std::size_t pending_rows_ = 0;
  std::size_t committed_reads_ = 0;
  std::size_t nonfinal_reads_ = 0;
};

struct MeltOptions {
  GateVariant variant = GateVariant::gated;
  double ema_decay = 0.2;
  GateFault fault = GateFault::none;
};

struct MeltForward {
  std::vector<Tensor> logits;                  // [loop] -> [L x vocab]
  std::vector<std::vector<Tensor>> post_attn;  // [layer][loop] -> [L x d]
  LatentKVState state;
  std::size_t chunks = 0;
};

class MeltModel {
 public:
  MeltModel(LoopLM base, std::vector<GateParams> gates, MeltOptions opts = {});
  /// Fine-tuning start: a deep copy of `base` plus freshly initialized gates.
  static MeltModel from_looplm(const LoopLM& base, std::uint64_t gate_seed, MeltOptions opts = {});

  const ModelConfig& config() const { return base_.config(); }
  const LoopLM& base() const { return base_; }
  LoopLM& base() { return base_; }
  const std::vector<GateParams>& gates() const { return gates_; }
  std::vector<GateParams>& gates() { return gates_; }
  const MeltOptions& options() const { return opts_; }
  MeltOptions& options() { return opts_; }

  /// Base parameters followed by "gate.<l>.w_z|u_z|b_z".
  std::vector<NamedTensor> named_parameters() const;
  std::vector<NamedTensor> gate_parameters() const;
  MeltModel clone() const;

  /// Chunk-wise forward. Chunks run sequentially; within a chunk all tokens
  /// advance loop by loop in parallel, attending to the final K/V of earlier
  /// chunks and to their own chunk's current-loop K/V. With alpha < 1 every
  /// K/V row is blended with the per-loop LoopLM K/V of the same hidden state.
  MeltForward forward_chunked(std::span<const TokenId> tokens, std::size_t chunk_size,
                              double alpha = 1.0) const;

 private:
  Tensor update_latent(std::size_t layer, const Tensor& x, const Tensor& h_prev,
                       std::size_t loop) const;

  LoopLM base_;
  std::vector<GateParams> gates_;
  MeltOptions opts_;

  friend class MeltSession;
};

/// Token-by-token MELT inference with a constant-per-token latent KV state.
class MeltSession {
 public:
  explicit MeltSession(const MeltModel& model);

  /// Runs all loops for the next token. Returns per-loop logits [1 x vocab].
  std::vector<Tensor> step(TokenId token);

  const LatentKVState& state() const { return state_; }
  std::size_t position() const { return state_.tokens(); }

 private:
  const MeltModel* model_;
  LatentKVState state_;
};

GenerateResult generate(const MeltModel& model, std::span<const TokenId> prompt,
                        std::size_t max_new, const SamplingOptions& sampling, std::uint64_t seed);

}  // namespace melt
