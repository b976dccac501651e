#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "autoadr/graph.hpp"

namespace autoadr {

// Elementwise, equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Multiply by a fixed tensor of the same shape (masks, dropout keep masks).
Var mul_const(Var a, const Tensor& c);
Var scale(Var a, double s);
Var one_minus(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var abs(Var a);

// x[..., n] + b[n]
Var add_bias(Var x, Var b);
// x[..., in] * w[in, out] (+ b[out]); leading dims are flattened.
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);
Var matmul(Var a, Var b);

Var concat_last(std::span<const Var> parts);
Var slice_last(Var x, std::size_t start, std::size_t length);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var mean(Var x);
// Mean of several same-shaped values.
Var average(std::span<const Var> parts);

// x[B, L, h] -> x[:, t, :]
Var time_step(Var x, std::size_t t);
// steps of shape [B, h] -> [B, L, h]
Var stack_time(std::span<const Var> steps);
// Row b of the result is fresh[b] where keep[b] != 0, otherwise previous[b].
Var select_rows(const std::vector<double>& keep, Var fresh, Var previous);

// 1-D convolution over axis 1 of x[B, L, Cin] with w[K, Cin, Cout], odd K,
// zero ("SAME") padding. Positions with mask 0 are read as zero and produce
// zero output.
Var conv1d_same(Var x, Var w, const Tensor& mask);

// Running statistics owned by one batchnorm instance.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.9;
  double eps = 1e-5;
};

// Per-channel normalisation over valid (b, t) positions followed by a
// learnable shift. In training mode batch statistics are used and the
// running statistics are updated; in eval mode the running ones are used.
Var batch_norm(Var x, Var shift, const Tensor& mask, BatchNormStats& stats,
               const BatchNormOptions& options);

enum class PoolMode { kMax, kAverage };
// Window-3, stride-1 pooling over valid neighbours only.
Var pool3(Var x, const Tensor& mask, PoolMode mode);

// Scaled dot-product attention over q/k/v[B, L, heads*dk]. Masked keys are
// excluded from every softmax; masked query rows produce zero.
Var multi_head_attention(Var q, Var k, Var v, const Tensor& mask, std::size_t heads);

// Softmax weights used by multi_head_attention, laid out [B, heads, L, L].
std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k, const Tensor& mask,
                                            std::size_t heads);

// ids[b * L + t] lists the table rows summed at position (b, t).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::vector<int>> ids;
};
// table[V, E] -> [B, L, E]
Var embedding_bag(Var table, const TokenBatch& tokens);
// x[B, L, E] + table[rows[b*L+t], :] at every position.
Var add_rows(Var x, Var table, const std::vector<int>& rows);

// Zeroes every position (b, t) of x[B, L, ...] whose mask entry is 0.
Var mask_rows(Var x, const Tensor& mask);

// Mean over valid positions: [B, L, h] -> [B, h]; all-masked rows give zero.
Var masked_mean_time(Var x, const Tensor& mask);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

enum class Reduction { kMean, kSum };
struct ClampCounter {
  std::size_t clamped = 0;
};
// Binary cross-entropy of predictions p (any shape, N elements) against
// targets y. p is clamped to [1e-7, 1 - 1e-7]; each clamp bumps the counter.
Var kd_loss(Var p, const std::vector<double>& targets, Reduction reduction,
            ClampCounter* counter = nullptr);

}  // namespace autoadr
