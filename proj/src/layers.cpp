#include "autoadr/layers.hpp"

#include <cmath>

#include "autoadr/errors.hpp"

namespace autoadr {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConv1: return "conv1";
    case OpKind::kConv3: return "conv3";
    case OpKind::kConv5: return "conv5";
    case OpKind::kConv7: return "conv7";
    case OpKind::kMaxPool3: return "maxpool3";
    case OpKind::kAvgPool3: return "avgpool3";
    case OpKind::kBiGru: return "bigru";
    case OpKind::kSelfAttention: return "self_attention";
  }
  return "unknown";
}

std::optional<OpKind> op_from_name(std::string_view name) {
  for (OpKind kind : kAllOps)
    if (op_name(kind) == name) return kind;
  return std::nullopt;
}

std::size_t conv_kernel(OpKind kind) {
  switch (kind) {
    case OpKind::kConv1: return 1;
    case OpKind::kConv3: return 3;
    case OpKind::kConv5: return 5;
    case OpKind::kConv7: return 7;
    default: return 0;
  }
}

bool is_conv(OpKind kind) { return conv_kernel(kind) != 0; }

LayerCost layer_cost(const LayerSpec& spec) {
  require(spec.hidden > 0 && spec.length > 0, "layer_cost: hidden size and length must be positive");
  if (spec.kind == OpKind::kSelfAttention) {
    require(spec.hidden % kAttentionHeads == 0, "layer_cost: attention hidden size must be divisible by 8");
  }
  const auto h = static_cast<std::int64_t>(spec.hidden);
  const auto len = static_cast<double>(spec.length);
  const auto hd = static_cast<double>(spec.hidden);
  LayerCost cost;
  switch (spec.kind) {
    case OpKind::kConv1:
    case OpKind::kConv3:
    case OpKind::kConv5:
    case OpKind::kConv7: {
      const auto k = static_cast<std::int64_t>(conv_kernel(spec.kind));
      cost.param_count = k * h * h + h;
      cost.time_units = len * static_cast<double>(k) * hd * hd;
      break;
    }
    case OpKind::kMaxPool3:
    case OpKind::kAvgPool3:
      cost.param_count = 0;
      cost.time_units = 3.0 * len * hd;
      break;
    case OpKind::kBiGru:
      cost.param_count = 6 * (2 * h * h + h);
      cost.time_units = 12.0 * len * hd * hd;
      break;
    case OpKind::kSelfAttention:
      cost.param_count = 4 * h * h + 4 * h;
      cost.time_units = 4.0 * len * hd * hd + 2.0 * len * len * hd;
      break;
  }
  return cost;
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor(std::move(shape), std::sqrt(3.0 / static_cast<double>(fan_in)), rng);
}

OpSlot OpSlot::create(OpKind kind, std::size_t hidden, Rng& rng, const std::string& prefix) {
  require(hidden > 0, "OpSlot: hidden size must be positive");
  OpSlot slot;
  slot.kind = kind;
  slot.hidden = hidden;
  slot.bn = BatchNormStats(hidden);
  const std::size_t h = hidden;
  const std::string base = prefix + std::string(op_name(kind)) + "/";
  if (is_conv(kind)) {
    const std::size_t k = conv_kernel(kind);
    slot.params.emplace_back(base + "kernel", fan_in_uniform({k, h, h}, k * h, rng));
    slot.params.emplace_back(base + "shift", Tensor({h}));
  } else if (kind == OpKind::kBiGru) {
    for (const char* dir : {"fwd", "bwd"}) {
      slot.params.emplace_back(base + dir + "_w_in", uniform_tensor({h, 3 * h}, 0.1, rng));
      slot.params.emplace_back(base + dir + "_w_rec", uniform_tensor({h, 3 * h}, 0.1, rng));
      slot.params.emplace_back(base + dir + "_bias", Tensor({3 * h}));
    }
  } else if (kind == OpKind::kSelfAttention) {
    require(h % kAttentionHeads == 0, "self_attention: hidden size " + std::to_string(h) +
                                          " is not divisible by 8 heads");
    for (const char* name : {"q", "k", "v", "o"}) {
      slot.params.emplace_back(base + "w" + name, fan_in_uniform({h, h}, h, rng));
      slot.params.emplace_back(base + "b" + name, Tensor({h}));
    }
  }
  return slot;
}

std::int64_t OpSlot::param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params) n += static_cast<std::int64_t>(p.value.size());
  return n;
}

SequenceBatch conv_block(Graph& g, const SequenceBatch& x, Var kernel, Var shift,
                         BatchNormStats& stats, const LayerContext& ctx) {
  const Shape& ks = kernel.shape();
  require(ks.size() == 3 && ks[1] == x.width() && ks[2] == x.width(),
          "conv_block: kernel " + shape_string(ks) + " does not match hidden size " +
              std::to_string(x.width()));
  Var y = conv1d_same(relu(x.values), kernel, x.mask);
  if (ctx.batch_norm) {
    BatchNormOptions options;
    options.training = ctx.training;
    y = batch_norm(y, shift, x.mask, stats, options);
  }
  (void)g;
  return {y, x.mask};
}

SequenceBatch pool(const SequenceBatch& x, PoolMode mode) {
  return {pool3(x.values, x.mask, mode), x.mask};
}

namespace {

// One GRU direction over the whole sequence; returns per-step outputs in
// sequence order.
Var gru_direction(Graph& g, const SequenceBatch& x, const GruDirection& w, bool reverse) {
  const std::size_t batch = x.batch(), len = x.length(), h = x.width();
  require(w.w_in.shape() == Shape({h, 3 * h}) && w.w_rec.shape() == Shape({h, 3 * h}),
          "bigru: weight shapes do not match hidden size");
  Var projected = linear(x.values, w.w_in, w.bias);
  Var state = g.constant(Tensor({batch, h}));
  std::vector<Var> outputs(len);
  std::vector<double> keep(batch);
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t t = reverse ? len - 1 - step : step;
    Var xt = time_step(projected, t);
    Var gh = matmul(state, w.w_rec);
    Var r = sigmoid(add(slice_last(xt, 0, h), slice_last(gh, 0, h)));
    Var z = sigmoid(add(slice_last(xt, h, h), slice_last(gh, h, h)));
    Var n = tanh(add(slice_last(xt, 2 * h, h), mul(r, slice_last(gh, 2 * h, h))));
    Var fresh = add(n, mul(z, sub(state, n)));
    for (std::size_t b = 0; b < batch; ++b) keep[b] = x.mask[b * len + t];
    state = select_rows(keep, fresh, state);
    outputs[t] = state;
  }
  return stack_time(outputs);
}

}  // namespace

SequenceBatch bigru(Graph& g, const SequenceBatch& x, const GruDirection& forward,
                    const GruDirection& backward) {
  Var fwd = gru_direction(g, x, forward, false);
  Var bwd = gru_direction(g, x, backward, true);
  return {mask_rows(add(fwd, bwd), x.mask), x.mask};
}

SequenceBatch self_attention(const SequenceBatch& x, const AttentionWeights& w) {
  const std::size_t h = x.width();
  require(h % kAttentionHeads == 0, "self_attention: hidden size " + std::to_string(h) +
                                        " is not divisible by 8 heads");
  require(w.wq.shape() == Shape({h, h}), "self_attention: projection shape mismatch");
  Var q = linear(x.values, w.wq, w.bq);
  Var k = linear(x.values, w.wk, w.bk);
  Var v = linear(x.values, w.wv, w.bv);
  Var attended = multi_head_attention(q, k, v, x.mask, kAttentionHeads);
  return {mask_rows(linear(attended, w.wo, w.bo), x.mask), x.mask};
}

SequenceBatch apply_op(Graph& g, OpSlot& slot, const SequenceBatch& x, const LayerContext& ctx) {
  require(slot.hidden == x.width(), "apply_op: slot hidden size " + std::to_string(slot.hidden) +
                                        " does not match input width " +
                                        std::to_string(x.width()));
  auto p = [&](std::size_t i) { return g.param(slot.params[i]); };
  switch (slot.kind) {
    case OpKind::kConv1:
    case OpKind::kConv3:
    case OpKind::kConv5:
    case OpKind::kConv7:
      return conv_block(g, x, p(0), p(1), slot.bn, ctx);
    case OpKind::kMaxPool3:
      return pool(x, PoolMode::kMax);
    case OpKind::kAvgPool3:
      return pool(x, PoolMode::kAverage);
    case OpKind::kBiGru:
      return bigru(g, x, {p(0), p(1), p(2)}, {p(3), p(4), p(5)});
    case OpKind::kSelfAttention:
      return self_attention(x, {p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7)});
  }
  throw ContractViolation("apply_op: unknown op kind");
}

Var dropout(Var x, double keep_prob, Rng& rng, bool training) {
  require(keep_prob > 0.0 && keep_prob <= 1.0, "dropout: keep probability must be in (0, 1]");
  if (!training || keep_prob == 1.0) return x;
  Tensor keep(x.shape());
  for (double& v : keep.data()) v = uniform01(rng) < keep_prob ? 1.0 / keep_prob : 0.0;
  return mul_const(x, keep);
}

}  // namespace autoadr
