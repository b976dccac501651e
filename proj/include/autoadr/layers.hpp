#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "autoadr/graph.hpp"
#include "autoadr/ops.hpp"
#include "autoadr/random.hpp"

namespace autoadr {

// The eight candidate operations of one encoder layer.
enum class OpKind : int {
  kConv1 = 0,
  kConv3,
  kConv5,
  kConv7,
  kMaxPool3,
  kAvgPool3,
  kBiGru,
  kSelfAttention,
};

inline constexpr int kNumOps = 8;
inline constexpr std::size_t kAttentionHeads = 8;
inline constexpr std::array<OpKind, kNumOps> kAllOps = {
    OpKind::kConv1,    OpKind::kConv3,    OpKind::kConv5, OpKind::kConv7,
    OpKind::kMaxPool3, OpKind::kAvgPool3, OpKind::kBiGru, OpKind::kSelfAttention};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);
// Kernel width for convolutions, 0 otherwise.
std::size_t conv_kernel(OpKind kind);
bool is_conv(OpKind kind);

struct LayerSpec {
  OpKind kind = OpKind::kConv1;
  std::size_t hidden = 0;
  std::size_t length = 0;
};

struct LayerCost {
  std::int64_t param_count = 0;
  double time_units = 0.0;
};

// Closed-form parameter count and multiply-accumulate count for one sequence
// of `length` positions:
//   conv k    params k*h*h + h        time L*k*h*h
//   pooling   params 0                time 3*L*h (window reads)
//   bigru     params 6*(2*h*h + h)    time 12*L*h*h
//   attention params 4*h*h + 4*h      time 4*L*h*h + 2*L*L*h
LayerCost layer_cost(const LayerSpec& spec);

// Values [B, L, h] plus a [B, L] 0/1 validity mask. Layers keep masked
// positions at exactly zero.
struct SequenceBatch {
  Var values;
  Tensor mask;

  std::size_t batch() const { return mask.dim(0); }
  std::size_t length() const { return mask.dim(1); }
  std::size_t width() const { return values.shape().back(); }
};

// Parameters and batchnorm statistics for one candidate operation. Layout of
// `params` by kind:
//   conv:      kernel [k, h, h], shift [h]
//   pooling:   (none)
//   bigru:     fwd w_in [h, 3h], fwd w_rec [h, 3h], fwd bias [3h], then bwd
//   attention: wq [h, h], bq [h], wk, bk, wv, bv, wo, bo
struct OpSlot {
  OpKind kind = OpKind::kConv1;
  std::size_t hidden = 0;
  std::vector<Parameter> params;
  BatchNormStats bn;

  static OpSlot create(OpKind kind, std::size_t hidden, Rng& rng, const std::string& prefix);
  std::int64_t param_count() const;
};

struct LayerContext {
  bool training = true;
  bool batch_norm = true;
};

SequenceBatch conv_block(Graph& g, const SequenceBatch& x, Var kernel, Var shift,
                         BatchNormStats& stats, const LayerContext& ctx);
SequenceBatch pool(const SequenceBatch& x, PoolMode mode);

struct GruDirection {
  Var w_in;
  Var w_rec;
  Var bias;
};
SequenceBatch bigru(Graph& g, const SequenceBatch& x, const GruDirection& forward,
                    const GruDirection& backward);

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};
SequenceBatch self_attention(const SequenceBatch& x, const AttentionWeights& w);

// Runs the slot's operation on x; shape and mask are preserved.
SequenceBatch apply_op(Graph& g, OpSlot& slot, const SequenceBatch& x, const LayerContext& ctx);

// Inverted dropout with keep probability `keep_prob`; identity when not
// training or keep_prob == 1.
Var dropout(Var x, double keep_prob, Rng& rng, bool training);

// U(-a, a) with a = sqrt(3 / fan_in).
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor uniform_tensor(Shape shape, double bound, Rng& rng);

}  // namespace autoadr
