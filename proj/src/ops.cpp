#include "autoadr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "autoadr/errors.hpp"

namespace autoadr {
namespace {

constexpr double kProbEps = 1e-7;

Graph& graph_of(Var a) {
  require(a.valid(), "operation on an invalid Var");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  require(a.valid() && b.valid() && a.graph == b.graph, "operands belong to different graphs");
  return *a.graph;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

// y[n, m] += a[n, k] * b[k, m]
void gemm_acc(const double* a, const double* b, double* y, std::size_t n, std::size_t k,
              std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* yr = y + i * m;
    const double* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b + p * m;
      for (std::size_t j = 0; j < m; ++j) yr[j] += av * br[j];
    }
  }
}

// y[n, k] += dy[n, m] * b[k, m]^T
void gemm_acc_bt(const double* dy, const double* b, double* y, std::size_t n, std::size_t k,
                 std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* dr = dy + i * m;
    double* yr = y + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* br = b + p * m;
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += dr[j] * br[j];
      yr[p] += acc;
    }
  }
}

// y[k, m] += a[n, k]^T * dy[n, m]
void gemm_acc_at(const double* a, const double* dy, double* y, std::size_t n, std::size_t k,
                 std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a + i * k;
    const double* dr = dy + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* yr = y + p * m;
      for (std::size_t j = 0; j < m; ++j) yr[j] += av * dr[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Var unary(Var a, std::string_view name, Fwd fwd, Deriv deriv) {
  Graph& g = graph_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  const int pa = a.id;
  return g.make(name, std::move(y), {pa}, [pa, deriv](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    const Tensor& xv = gr.value(pa);
    const Tensor& yv = gr.value(self);
    Tensor& gx = gr.grad(pa);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const int pa = a.id, pb = b.id;
  return g.make("add", std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    for (int p : {pa, pb}) {
      if (!gr.needs_grad(p)) continue;
      Tensor& gp = gr.grad(p);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gy[i];
    }
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const int pa = a.id, pb = b.id;
  return g.make("sub", std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    if (gr.needs_grad(pa)) {
      Tensor& ga = gr.grad(pa);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    }
    if (gr.needs_grad(pb)) {
      Tensor& gb = gr.grad(pb);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const int pa = a.id, pb = b.id;
  return g.make("mul", std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    if (gr.needs_grad(pa)) {
      const Tensor& bv2 = gr.value(pb);
      Tensor& ga = gr.grad(pa);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv2[i];
    }
    if (gr.needs_grad(pb)) {
      const Tensor& av = gr.value(pa);
      Tensor& gb = gr.grad(pb);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

Var mul_const(Var a, const Tensor& c) {
  Graph& g = graph_of(a);
  require_same_shape(a.value(), c, "mul_const");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
  const int pa = a.id;
  return g.make("mul_const", std::move(y), {pa}, [pa, c](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    Tensor& ga = gr.grad(pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * c[i];
  });
}

Var scale(Var a, double s) {
  return unary(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var one_minus(Var a) {
  return unary(
      a, "one_minus", [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var abs(Var a) {
  return unary(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var add_bias(Var x, Var b) {
  Graph& g = graph_of(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t n = last_dim(xv);
  require(bv.size() == n, "add_bias: bias length does not match last dimension");
  Tensor y = xv;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % n];
  const int px = x.id, pb = b.id;
  return g.make("add_bias", std::move(y), {px, pb}, [px, pb, n](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    if (gr.needs_grad(px)) {
      Tensor& gx = gr.grad(px);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    }
    if (gr.needs_grad(pb)) {
      Tensor& gb = gr.grad(pb);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
    }
  });
}

Var linear(Var x, Var w, std::optional<Var> b) {
  Graph& g = graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(wv.rank() == 2, "linear: weight must be 2-D");
  const std::size_t in = wv.dim(0), out = wv.dim(1);
  require(last_dim(xv) == in, "linear: input width " + std::to_string(last_dim(xv)) +
                                  " does not match weight " + shape_string(wv.shape()));
  const std::size_t rows = xv.size() / in;
  Shape out_shape = xv.shape();
  out_shape.back() = out;
  Tensor y(out_shape);
  if (b) {
    const Tensor& bv = b->value();
    require(bv.size() == out, "linear: bias length mismatch");
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bv.raw().begin(), bv.raw().end(), y.raw().begin() + static_cast<long>(r * out));
  }
  gemm_acc(xv.raw().data(), wv.raw().data(), y.raw().data(), rows, in, out);
  std::vector<int> parents{x.id, w.id};
  if (b) parents.push_back(b->id);
  const int px = x.id, pw = w.id, pb = b ? b->id : -1;
  return g.make("linear", std::move(y), std::move(parents),
                [px, pw, pb, rows, in, out](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  if (gr.needs_grad(px)) {
                    gemm_acc_bt(gy.raw().data(), gr.value(pw).raw().data(),
                                gr.grad(px).raw().data(), rows, in, out);
                  }
                  if (gr.needs_grad(pw)) {
                    gemm_acc_at(gr.value(px).raw().data(), gy.raw().data(),
                                gr.grad(pw).raw().data(), rows, in, out);
                  }
                  if (pb >= 0 && gr.needs_grad(pb)) {
                    Tensor& gb = gr.grad(pb);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i % out] += gy[i];
                  }
                });
}

Var matmul(Var a, Var b) {
  require(a.value().rank() == 2, "matmul: left operand must be 2-D");
  return linear(a, b);
}

Var concat_last(std::span<const Var> parts) {
  require(!parts.empty(), "concat_last: no inputs");
  Graph& g = graph_of(parts[0]);
  const Shape& base = parts[0].shape();
  const std::size_t rows = parts[0].value().size() / base.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    graph_of(parts[0], p);
    const Shape& s = p.shape();
    require(s.size() == base.size() && std::equal(s.begin(), s.end() - 1, base.begin()),
            "concat_last: leading dimensions differ");
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = base;
  out_shape.back() = total;
  Tensor y(out_shape);
  std::size_t offset = 0;
  std::vector<int> ids;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j)
        y[r * total + offset + j] = pv[r * widths[k] + j];
    offset += widths[k];
    ids.push_back(parts[k].id);
  }
  return g.make("concat_last", std::move(y), ids,
                [ids, widths, rows, total](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (gr.needs_grad(ids[k])) {
                      Tensor& gp = gr.grad(ids[k]);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < widths[k]; ++j)
                          gp[r * widths[k] + j] += gy[r * total + off + j];
                    }
                    off += widths[k];
                  }
                });
}

Var slice_last(Var x, std::size_t start, std::size_t length) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  const std::size_t width = last_dim(xv);
  require(length > 0 && start + length <= width, "slice_last: range out of bounds");
  const std::size_t rows = xv.size() / width;
  Shape out_shape = xv.shape();
  out_shape.back() = length;
  Tensor y(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < length; ++j) y[r * length + j] = xv[r * width + start + j];
  const int px = x.id;
  return g.make("slice_last", std::move(y), {px},
                [px, rows, width, start, length](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  Tensor& gx = gr.grad(px);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < length; ++j)
                      gx[r * width + start + j] += gy[r * length + j];
                });
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of(x);
  Tensor y = x.value().reshaped(std::move(shape));
  const int px = x.id;
  return g.make("reshape", std::move(y), {px}, [px](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad(px);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

Var sum(Var x) {
  Graph& g = graph_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const int px = x.id;
  return g.make("sum", Tensor::scalar(s), {px}, [px](Graph& gr, int self) {
    const double gy = gr.grad(self)[0];
    Tensor& gx = gr.grad(px);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var average(std::span<const Var> parts) {
  require(!parts.empty(), "average: no inputs");
  if (parts.size() == 1) return parts[0];
  Var acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

Var time_step(Var x, std::size_t t) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require(xv.rank() == 3 && t < xv.dim(1), "time_step: index out of range");
  const std::size_t batch = xv.dim(0), len = xv.dim(1), h = xv.dim(2);
  Tensor y({batch, h});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(xv.raw().begin() + static_cast<long>((b * len + t) * h), h,
                y.raw().begin() + static_cast<long>(b * h));
  const int px = x.id;
  return g.make("time_step", std::move(y), {px}, [px, batch, len, h, t](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad(px);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < h; ++j) gx[(b * len + t) * h + j] += gy[b * h + j];
  });
}

Var stack_time(std::span<const Var> steps) {
  require(!steps.empty(), "stack_time: no steps");
  Graph& g = graph_of(steps[0]);
  const Shape& s0 = steps[0].shape();
  require(s0.size() == 2, "stack_time: steps must be [B, h]");
  const std::size_t batch = s0[0], h = s0[1], len = steps.size();
  Tensor y({batch, len, h});
  std::vector<int> ids;
  for (std::size_t t = 0; t < len; ++t) {
    graph_of(steps[0], steps[t]);
    require(steps[t].shape() == s0, "stack_time: step shapes differ");
    const Tensor& sv = steps[t].value();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(sv.raw().begin() + static_cast<long>(b * h), h,
                  y.raw().begin() + static_cast<long>((b * len + t) * h));
    ids.push_back(steps[t].id);
  }
  return g.make("stack_time", std::move(y), ids, [ids, batch, len, h](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    for (std::size_t t = 0; t < len; ++t) {
      if (!gr.needs_grad(ids[t])) continue;
      Tensor& gs = gr.grad(ids[t]);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < h; ++j) gs[b * h + j] += gy[(b * len + t) * h + j];
    }
  });
}

Var select_rows(const std::vector<double>& keep, Var fresh, Var previous) {
  Graph& g = graph_of(fresh, previous);
  require_same_shape(fresh.value(), previous.value(), "select_rows");
  const std::size_t rows = fresh.shape()[0];
  require(keep.size() == rows, "select_rows: keep mask length mismatch");
  const std::size_t width = fresh.value().size() / rows;
  Tensor y = previous.value();
  const Tensor& fv = fresh.value();
  for (std::size_t r = 0; r < rows; ++r)
    if (keep[r] != 0.0)
      std::copy_n(fv.raw().begin() + static_cast<long>(r * width), width,
                  y.raw().begin() + static_cast<long>(r * width));
  const int pf = fresh.id, pp = previous.id;
  return g.make("select_rows", std::move(y), {pf, pp},
                [keep, pf, pp, rows, width](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const int target = keep[r] != 0.0 ? pf : pp;
                    if (!gr.needs_grad(target)) continue;
                    Tensor& gt = gr.grad(target);
                    for (std::size_t j = 0; j < width; ++j)
                      gt[r * width + j] += gy[r * width + j];
                  }
                });
}

Var conv1d_same(Var x, Var w, const Tensor& mask) {
  Graph& g = graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 3, "conv1d_same: input must be [B, L, C]");
  require(wv.rank() == 3 && wv.dim(0) % 2 == 1, "conv1d_same: kernel must be [K odd, Cin, Cout]");
  const std::size_t batch = xv.dim(0), len = xv.dim(1), cin = xv.dim(2);
  const std::size_t k = wv.dim(0), cout = wv.dim(2);
  require(wv.dim(1) == cin, "conv1d_same: channel mismatch between input " +
                                shape_string(xv.shape()) + " and kernel " +
                                shape_string(wv.shape()));
  require(mask.shape() == Shape({batch, len}), "conv1d_same: mask shape mismatch");
  const long half = static_cast<long>(k / 2);
  Tensor y({batch, len, cout});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      if (mask[b * len + t] == 0.0) continue;
      double* yr = y.raw().data() + (b * len + t) * cout;
      for (std::size_t o = 0; o < k; ++o) {
        const long src = static_cast<long>(t) + static_cast<long>(o) - half;
        if (src < 0 || src >= static_cast<long>(len)) continue;
        const std::size_t s = static_cast<std::size_t>(src);
        if (mask[b * len + s] == 0.0) continue;
        gemm_acc(xv.raw().data() + (b * len + s) * cin, wv.raw().data() + o * cin * cout, yr, 1,
                 cin, cout);
      }
    }
  }
  const int px = x.id, pw = w.id;
  return g.make(
      "conv1d_same", std::move(y), {px, pw},
      [px, pw, mask, batch, len, cin, cout, k, half](Graph& gr, int self) {
        const Tensor& gy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& wv2 = gr.value(pw);
        Tensor* gx = gr.needs_grad(px) ? &gr.grad(px) : nullptr;
        Tensor* gw = gr.needs_grad(pw) ? &gr.grad(pw) : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < len; ++t) {
            if (mask[b * len + t] == 0.0) continue;
            const double* dy = gy.raw().data() + (b * len + t) * cout;
            for (std::size_t o = 0; o < k; ++o) {
              const long src = static_cast<long>(t) + static_cast<long>(o) - half;
              if (src < 0 || src >= static_cast<long>(len)) continue;
              const std::size_t s = static_cast<std::size_t>(src);
              if (mask[b * len + s] == 0.0) continue;
              if (gx) {
                gemm_acc_bt(dy, wv2.raw().data() + o * cin * cout,
                            gx->raw().data() + (b * len + s) * cin, 1, cin, cout);
              }
              if (gw) {
                gemm_acc_at(xv2.raw().data() + (b * len + s) * cin, dy,
                            gw->raw().data() + o * cin * cout, 1, cin, cout);
              }
            }
          }
        }
      });
}

Var batch_norm(Var x, Var shift, const Tensor& mask, BatchNormStats& stats,
               const BatchNormOptions& options) {
  Graph& g = graph_of(x, shift);
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "batch_norm: input must be [B, L, C]");
  const std::size_t batch = xv.dim(0), len = xv.dim(1), ch = xv.dim(2);
  require(shift.value().size() == ch, "batch_norm: shift length mismatch");
  require(stats.running_mean.size() == ch, "batch_norm: statistics width mismatch");
  require(mask.shape() == Shape({batch, len}), "batch_norm: mask shape mismatch");
  std::size_t valid = 0;
  for (double m : mask.data()) valid += m != 0.0 ? 1 : 0;

  std::vector<double> mu(ch, 0.0), inv_std(ch, 0.0);
  const bool use_batch = options.training && valid > 0;
  if (use_batch) {
    for (std::size_t r = 0; r < batch * len; ++r) {
      if (mask[r] == 0.0) continue;
      for (std::size_t c = 0; c < ch; ++c) mu[c] += xv[r * ch + c];
    }
    for (auto& m : mu) m /= static_cast<double>(valid);
    std::vector<double> var(ch, 0.0);
    for (std::size_t r = 0; r < batch * len; ++r) {
      if (mask[r] == 0.0) continue;
      for (std::size_t c = 0; c < ch; ++c) {
        const double d = xv[r * ch + c] - mu[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < ch; ++c) {
      var[c] /= static_cast<double>(valid);
      inv_std[c] = 1.0 / std::sqrt(var[c] + options.eps);
      stats.running_mean[c] =
          options.momentum * stats.running_mean[c] + (1.0 - options.momentum) * mu[c];
      stats.running_var[c] =
          options.momentum * stats.running_var[c] + (1.0 - options.momentum) * var[c];
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mu[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + options.eps);
    }
  }
  const Tensor& sv = shift.value();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < batch * len; ++r) {
    if (mask[r] == 0.0) continue;
    for (std::size_t c = 0; c < ch; ++c)
      y[r * ch + c] = (xv[r * ch + c] - mu[c]) * inv_std[c] + sv[c];
  }
  const int px = x.id, ps = shift.id;
  return g.make(
      "batch_norm", std::move(y), {px, ps},
      [px, ps, mask, mu, inv_std, use_batch, valid, rows = batch * len, ch](Graph& gr, int self) {
        const Tensor& gy = gr.grad(self);
        if (gr.needs_grad(ps)) {
          Tensor& gs = gr.grad(ps);
          for (std::size_t r = 0; r < rows; ++r) {
            if (mask[r] == 0.0) continue;
            for (std::size_t c = 0; c < ch; ++c) gs[c] += gy[r * ch + c];
          }
        }
        if (!gr.needs_grad(px)) return;
        const Tensor& xv2 = gr.value(px);
        Tensor& gx = gr.grad(px);
        if (!use_batch) {
          for (std::size_t r = 0; r < rows; ++r) {
            if (mask[r] == 0.0) continue;
            for (std::size_t c = 0; c < ch; ++c) gx[r * ch + c] += gy[r * ch + c] * inv_std[c];
          }
          return;
        }
        std::vector<double> sum_dy(ch, 0.0), sum_dy_xhat(ch, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          if (mask[r] == 0.0) continue;
          for (std::size_t c = 0; c < ch; ++c) {
            const double xhat = (xv2[r * ch + c] - mu[c]) * inv_std[c];
            sum_dy[c] += gy[r * ch + c];
            sum_dy_xhat[c] += gy[r * ch + c] * xhat;
          }
        }
        const double n = static_cast<double>(valid);
        for (std::size_t r = 0; r < rows; ++r) {
          if (mask[r] == 0.0) continue;
          for (std::size_t c = 0; c < ch; ++c) {
            const double xhat = (xv2[r * ch + c] - mu[c]) * inv_std[c];
            gx[r * ch + c] +=
                inv_std[c] / n * (n * gy[r * ch + c] - sum_dy[c] - xhat * sum_dy_xhat[c]);
          }
        }
      });
}

Var pool3(Var x, const Tensor& mask, PoolMode mode) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "pool3: input must be [B, L, C]");
  const std::size_t batch = xv.dim(0), len = xv.dim(1), ch = xv.dim(2);
  require(mask.shape() == Shape({batch, len}), "pool3: mask shape mismatch");
  Tensor y(xv.shape());
  // For max mode: source row per output element; for avg: count of valid rows.
  std::vector<std::size_t> argmax(mode == PoolMode::kMax ? xv.size() : 0);
  std::vector<double> counts(batch * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t r = b * len + t;
      if (mask[r] == 0.0) continue;
      const std::size_t lo = t == 0 ? 0 : t - 1;
      const std::size_t hi = std::min(len - 1, t + 1);
      for (std::size_t s = lo; s <= hi; ++s) {
        const std::size_t rs = b * len + s;
        if (mask[rs] == 0.0) continue;
        const bool first = counts[r] == 0.0;
        counts[r] += 1.0;
        for (std::size_t c = 0; c < ch; ++c) {
          const double v = xv[rs * ch + c];
          if (mode == PoolMode::kAverage) {
            y[r * ch + c] += v;
          } else if (first || v > y[r * ch + c]) {
            y[r * ch + c] = v;
            argmax[r * ch + c] = rs * ch + c;
          }
        }
      }
      if (mode == PoolMode::kAverage)
        for (std::size_t c = 0; c < ch; ++c) y[r * ch + c] /= counts[r];
    }
  }
  const int px = x.id;
  return g.make(mode == PoolMode::kMax ? "maxpool3" : "avgpool3", std::move(y), {px},
                [px, mask, mode, argmax = std::move(argmax), counts = std::move(counts), batch,
                 len, ch](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  Tensor& gx = gr.grad(px);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t t = 0; t < len; ++t) {
                      const std::size_t r = b * len + t;
                      if (mask[r] == 0.0) continue;
                      if (mode == PoolMode::kMax) {
                        for (std::size_t c = 0; c < ch; ++c)
                          gx[argmax[r * ch + c]] += gy[r * ch + c];
                        continue;
                      }
                      const std::size_t lo = t == 0 ? 0 : t - 1;
                      const std::size_t hi = std::min(len - 1, t + 1);
                      for (std::size_t s = lo; s <= hi; ++s) {
                        const std::size_t rs = b * len + s;
                        if (mask[rs] == 0.0) continue;
                        for (std::size_t c = 0; c < ch; ++c)
                          gx[rs * ch + c] += gy[r * ch + c] / counts[r];
                      }
                    }
                  }
                });
}

std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k, const Tensor& mask,
                                            std::size_t heads) {
  require(q.rank() == 3 && q.shape() == k.shape(), "attention: q/k must share shape [B, L, h]");
  const std::size_t batch = q.dim(0), len = q.dim(1), width = q.dim(2);
  require(heads > 0 && width % heads == 0, "attention: hidden size " + std::to_string(width) +
                                               " not divisible by " + std::to_string(heads) +
                                               " heads");
  require(mask.shape() == Shape({batch, len}), "attention: mask shape mismatch");
  const std::size_t dk = width / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> probs(batch * heads * len * len, 0.0);
  std::vector<double> row(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t i = 0; i < len; ++i) {
        if (mask[b * len + i] == 0.0) continue;
        const double* qi = q.raw().data() + (b * len + i) * width + hd * dk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          if (mask[b * len + j] == 0.0) continue;
          const double* kj = k.raw().data() + (b * len + j) * width + hd * dk;
          double s = 0.0;
          for (std::size_t d = 0; d < dk; ++d) s += qi[d] * kj[d];
          row[j] = s * inv_scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          if (mask[b * len + j] == 0.0) continue;
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* pr = probs.data() + ((b * heads + hd) * len + i) * len;
        for (std::size_t j = 0; j < len; ++j) {
          if (mask[b * len + j] == 0.0) continue;
          pr[j] = row[j] / z;
        }
      }
    }
  }
  return probs;
}

Var multi_head_attention(Var q, Var k, Var v, const Tensor& mask, std::size_t heads) {
  Graph& g = graph_of(q, k);
  graph_of(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require(vv.shape() == qv.shape(), "attention: v must share q's shape");
  auto probs = std::make_shared<std::vector<double>>(attention_probabilities(qv, kv, mask, heads));
  const std::size_t batch = qv.dim(0), len = qv.dim(1), width = qv.dim(2);
  const std::size_t dk = width / heads;
  Tensor y(qv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t i = 0; i < len; ++i) {
        if (mask[b * len + i] == 0.0) continue;
        const double* pr = probs->data() + ((b * heads + hd) * len + i) * len;
        double* yi = y.raw().data() + (b * len + i) * width + hd * dk;
        for (std::size_t j = 0; j < len; ++j) {
          if (mask[b * len + j] == 0.0) continue;
          const double* vj = vv.raw().data() + (b * len + j) * width + hd * dk;
          for (std::size_t d = 0; d < dk; ++d) yi[d] += pr[j] * vj[d];
        }
      }
    }
  }
  const int pq = q.id, pk = k.id, pv = v.id;
  return g.make(
      "multi_head_attention", std::move(y), {pq, pk, pv},
      [pq, pk, pv, probs, mask, batch, len, width, heads, dk](Graph& gr, int self) {
        const Tensor& gy = gr.grad(self);
        const Tensor& qv2 = gr.value(pq);
        const Tensor& kv2 = gr.value(pk);
        const Tensor& vv2 = gr.value(pv);
        Tensor* gq = gr.needs_grad(pq) ? &gr.grad(pq) : nullptr;
        Tensor* gk = gr.needs_grad(pk) ? &gr.grad(pk) : nullptr;
        Tensor* gv = gr.needs_grad(pv) ? &gr.grad(pv) : nullptr;
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
        std::vector<double> dp(len);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t hd = 0; hd < heads; ++hd) {
            for (std::size_t i = 0; i < len; ++i) {
              if (mask[b * len + i] == 0.0) continue;
              const double* pr = probs->data() + ((b * heads + hd) * len + i) * len;
              const double* dyi = gy.raw().data() + (b * len + i) * width + hd * dk;
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                if (mask[b * len + j] == 0.0) continue;
                const double* vj = vv2.raw().data() + (b * len + j) * width + hd * dk;
                double s = 0.0;
                for (std::size_t d = 0; d < dk; ++d) s += dyi[d] * vj[d];
                dp[j] = s;
                dot += pr[j] * s;
                if (gv) {
                  double* gvj = gv->raw().data() + (b * len + j) * width + hd * dk;
                  for (std::size_t d = 0; d < dk; ++d) gvj[d] += pr[j] * dyi[d];
                }
              }
              const double* qi = qv2.raw().data() + (b * len + i) * width + hd * dk;
              for (std::size_t j = 0; j < len; ++j) {
                if (mask[b * len + j] == 0.0) continue;
                const double ds = pr[j] * (dp[j] - dot) * inv_scale;
                if (ds == 0.0) continue;
                const double* kj = kv2.raw().data() + (b * len + j) * width + hd * dk;
                if (gq) {
                  double* gqi = gq->raw().data() + (b * len + i) * width + hd * dk;
                  for (std::size_t d = 0; d < dk; ++d) gqi[d] += ds * kj[d];
                }
                if (gk) {
                  double* gkj = gk->raw().data() + (b * len + j) * width + hd * dk;
                  for (std::size_t d = 0; d < dk; ++d) gkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      });
}

Var embedding_bag(Var table, const TokenBatch& tokens) {
  Graph& g = graph_of(table);
  const Tensor& tv = table.value();
  require(tv.rank() == 2, "embedding_bag: table must be [V, E]");
  const std::size_t vocab = tv.dim(0), emb = tv.dim(1);
  require(tokens.batch > 0 && tokens.length > 0 &&
              tokens.ids.size() == tokens.batch * tokens.length,
          "embedding_bag: token batch is inconsistent");
  Tensor y({tokens.batch, tokens.length, emb});
  for (std::size_t r = 0; r < tokens.ids.size(); ++r) {
    for (int id : tokens.ids[r]) {
      require(id >= 0 && static_cast<std::size_t>(id) < vocab,
              "embedding_bag: id " + std::to_string(id) + " out of range");
      const double* row = tv.raw().data() + static_cast<std::size_t>(id) * emb;
      for (std::size_t e = 0; e < emb; ++e) y[r * emb + e] += row[e];
    }
  }
  const int pt = table.id;
  return g.make("embedding_bag", std::move(y), {pt}, [pt, tokens, emb](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gt = gr.grad(pt);
    for (std::size_t r = 0; r < tokens.ids.size(); ++r)
      for (int id : tokens.ids[r]) {
        double* row = gt.raw().data() + static_cast<std::size_t>(id) * emb;
        for (std::size_t e = 0; e < emb; ++e) row[e] += gy[r * emb + e];
      }
  });
}

Var add_rows(Var x, Var table, const std::vector<int>& rows) {
  Graph& g = graph_of(x, table);
  const Tensor& xv = x.value();
  const Tensor& tv = table.value();
  require(tv.rank() == 2 && tv.dim(1) == xv.shape().back(), "add_rows: width mismatch");
  const std::size_t width = tv.dim(1);
  const std::size_t positions = xv.size() / width;
  require(rows.size() == positions, "add_rows: one row index per position required");
  Tensor y = xv;
  for (std::size_t r = 0; r < positions; ++r) {
    require(rows[r] >= 0 && static_cast<std::size_t>(rows[r]) < tv.dim(0),
            "add_rows: row index out of range");
    const double* src = tv.raw().data() + static_cast<std::size_t>(rows[r]) * width;
    for (std::size_t e = 0; e < width; ++e) y[r * width + e] += src[e];
  }
  const int px = x.id, pt = table.id;
  return g.make("add_rows", std::move(y), {px, pt},
                [px, pt, rows, width, positions](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  if (gr.needs_grad(px)) {
                    Tensor& gx = gr.grad(px);
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
                  }
                  if (gr.needs_grad(pt)) {
                    Tensor& gt = gr.grad(pt);
                    for (std::size_t r = 0; r < positions; ++r) {
                      double* dst = gt.raw().data() + static_cast<std::size_t>(rows[r]) * width;
                      for (std::size_t e = 0; e < width; ++e) dst[e] += gy[r * width + e];
                    }
                  }
                });
}

Var mask_rows(Var x, const Tensor& mask) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require(xv.rank() >= 2 && xv.dim(0) * xv.dim(1) == mask.size(),
          "mask_rows: mask does not match leading dimensions");
  const std::size_t rows = mask.size();
  const std::size_t width = xv.size() / rows;
  Tensor y = xv;
  for (std::size_t r = 0; r < rows; ++r)
    if (mask[r] == 0.0)
      std::fill_n(y.raw().begin() + static_cast<long>(r * width), width, 0.0);
  const int px = x.id;
  return g.make("mask_rows", std::move(y), {px}, [px, mask, rows, width](Graph& gr, int self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad(px);
    for (std::size_t r = 0; r < rows; ++r) {
      if (mask[r] == 0.0) continue;
      for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += gy[r * width + j];
    }
  });
}

Var masked_mean_time(Var x, const Tensor& mask) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "masked_mean_time: input must be [B, L, h]");
  const std::size_t batch = xv.dim(0), len = xv.dim(1), h = xv.dim(2);
  require(mask.shape() == Shape({batch, len}), "masked_mean_time: mask shape mismatch");
  std::vector<double> inv_count(batch, 0.0);
  Tensor y({batch, h});
  for (std::size_t b = 0; b < batch; ++b) {
    double count = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      if (mask[b * len + t] == 0.0) continue;
      count += 1.0;
      for (std::size_t j = 0; j < h; ++j) y[b * h + j] += xv[(b * len + t) * h + j];
    }
    if (count > 0.0) {
      inv_count[b] = 1.0 / count;
      for (std::size_t j = 0; j < h; ++j) y[b * h + j] *= inv_count[b];
    }
  }
  const int px = x.id;
  return g.make("masked_mean_time", std::move(y), {px},
                [px, mask, inv_count, batch, len, h](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  Tensor& gx = gr.grad(px);
                  for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t t = 0; t < len; ++t) {
                      if (mask[b * len + t] == 0.0) continue;
                      for (std::size_t j = 0; j < h; ++j)
                        gx[(b * len + t) * h + j] += gy[b * h + j] * inv_count[b];
                    }
                });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const Tensor& xv = x.value();
  const std::size_t n = last_dim(xv);
  require(gamma.value().size() == n && beta.value().size() == n,
          "layer_norm: gamma/beta width mismatch");
  const std::size_t rows = xv.size() / n;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  std::vector<double> xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[r * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[r * n + j] - mu) * (xv[r * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xv[r * n + j] - mu) * inv_std[r];
      y[r * n + j] = gv[j] * xhat[r * n + j] + bv[j];
    }
  }
  const int px = x.id, pg = gamma.id, pb = beta.id;
  return g.make("layer_norm", std::move(y), {px, pg, pb},
                [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                 n](Graph& gr, int self) {
                  const Tensor& gy = gr.grad(self);
                  const Tensor& gv2 = gr.value(pg);
                  if (gr.needs_grad(pg)) {
                    Tensor& gg = gr.grad(pg);
                    for (std::size_t i = 0; i < gy.size(); ++i) gg[i % n] += gy[i] * xhat[i];
                  }
                  if (gr.needs_grad(pb)) {
                    Tensor& gb = gr.grad(pb);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
                  }
                  if (!gr.needs_grad(px)) return;
                  Tensor& gx = gr.grad(px);
                  const double dn = static_cast<double>(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double d = gy[r * n + j] * gv2[j];
                      s1 += d;
                      s2 += d * xhat[r * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const double d = gy[r * n + j] * gv2[j];
                      gx[r * n + j] += inv_std[r] / dn * (dn * d - s1 - xhat[r * n + j] * s2);
                    }
                  }
                });
}

Var kd_loss(Var p, const std::vector<double>& targets, Reduction reduction,
            ClampCounter* counter) {
  Graph& g = graph_of(p);
  const Tensor& pv = p.value();
  require(pv.size() == targets.size(), "kd_loss: predictions and targets differ in length");
  require(!targets.empty(), "kd_loss: empty batch");
  const double norm = reduction == Reduction::kMean ? 1.0 / static_cast<double>(pv.size()) : 1.0;
  std::vector<char> clamped(pv.size(), 0);
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    double pi = pv[i];
    if (pi < kProbEps || pi > 1.0 - kProbEps) {
      pi = std::clamp(pi, kProbEps, 1.0 - kProbEps);
      clamped[i] = 1;
      if (counter) ++counter->clamped;
    }
    const double yi = targets[i];
    loss -= yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi);
  }
  const int pp = p.id;
  return g.make("kd_loss", Tensor::scalar(loss * norm), {pp},
                [pp, targets, clamped = std::move(clamped), norm](Graph& gr, int self) {
                  const double gy = gr.grad(self)[0] * norm;
                  const Tensor& pv2 = gr.value(pp);
                  Tensor& gp = gr.grad(pp);
                  for (std::size_t i = 0; i < gp.size(); ++i) {
                    if (clamped[i]) continue;
                    const double pi = pv2[i];
                    gp[i] += gy * ((1.0 - targets[i]) / (1.0 - pi) - targets[i] / pi);
                  }
                });
}

}  // namespace autoadr
