// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors plus a tape-based reverse-mode autodiff graph.
// Layout convention for 4-D tensors is [batch, channels, height, width].

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace maskref {

/// Raised on malformed shapes, mismatched operands, or invalid arguments.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a forward or backward pass produces NaN/Inf, or training diverges.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e < 0) throw ShapeError("negative extent in shape");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Value-semantics handle over a shared (shape, data, grad) payload.
/// Tensors are treated as immutable once produced by an op; only parameter
/// updates and initialization write through values_mut().
class Tensor {
  struct Payload {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, zero-filled
    bool requires_grad = false;
  };

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    std::size_t n = shape_numel(shape);
    t.p_->shape = std::move(shape);
    t.p_->value.assign(n, 0.0);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.p_->value.begin(), t.p_->value.end(), v);
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("value count does not match shape " + shape_str(shape));
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = std::move(shape);
    t.p_->value = std::move(values);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(p_); }

  const Shape& shape() const { return p_->shape; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  int dim(int i) const { return p_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return p_->value.size(); }

  std::span<const double> values() const { return p_->value; }
  std::span<double> values_mut() { return p_->value; }
  const double* data() const { return p_->value.data(); }
  double* data_mut() { return p_->value.data(); }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool rg) { p_->requires_grad = rg; }

  bool grad_allocated() const { return !p_->grad.empty() || p_->value.empty(); }

  /// Gradient buffer, allocated zero-filled on first access.
  std::span<double> grad() {
    if (p_->grad.size() != p_->value.size()) p_->grad.assign(p_->value.size(), 0.0);
    return p_->grad;
  }
  std::span<const double> grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  void zero_grad() {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
  }

  /// Value of a single-element tensor.
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return p_->value[0];
  }

  bool same_payload(const Tensor& o) const { return p_ == o.p_; }

 private:
  std::shared_ptr<Payload> p_;
};

namespace detail {

inline void check_finite(std::span<const double> xs, std::string_view what) {
  for (double x : xs)
    if (!std::isfinite(x))
      throw NumericError("non-finite value in " + std::string(what));
}

/// Uniform double in [0,1) from the top 53 bits of the generator output.
/// Hand-rolled so results do not depend on the standard library's
/// distribution implementation.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace detail

/// Execution context: an ordered tape of executed operations (with references
/// to their input/output tensors) plus the seeded RNG used for parameter
/// initialization. backward() replays the tape once, in reverse.
class Graph {
 public:
  struct TapeEntry {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  explicit Graph(std::uint64_t seed = 0) : rng_(seed) {}

  std::mt19937_64& rng() { return rng_; }

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward) {
    detail::check_finite(output.values(), op);
    tape_.push_back({op, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t num_ops() const { return tape_.size(); }

  std::size_t count_ops(std::string_view op) const {
    std::size_t n = 0;
    for (const auto& e : tape_) n += (e.op == op);
    return n;
  }

  /// Drop the recorded tape (start a fresh forward pass). Tensor payloads
  /// still referenced elsewhere stay alive.
  void reset() { tape_.clear(); }

  /// Reverse-mode sweep from a scalar loss. Visits every recorded entry
  /// exactly once, newest first; gradients accumulate additively across
  /// fan-out. Parameter grads are *not* cleared here.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward requires a scalar loss");
    Tensor l = loss;
    l.grad()[0] += 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      // An output whose grad buffer was never touched received no upstream
      // gradient; its backward step would only add zeros.
      if (!it->output.grad_allocated()) continue;
      if (it->backward) it->backward();
    }
    for (const auto& e : tape_) {
      if (e.output.grad_allocated()) detail::check_finite(e.output.grad(), e.op);
      for (const auto& in : e.inputs)
        if (in.requires_grad() && in.grad_allocated())
          detail::check_finite(in.grad(), e.op);
    }
  }

 private:
  std::vector<TapeEntry> tape_;
  std::mt19937_64 rng_;
};

/// Parameter initialized uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline Tensor param_uniform(Graph& g, Shape shape, int fan_in) {
  if (fan_in <= 0) throw ShapeError("fan_in must be positive");
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values_mut()) v = (2.0 * detail::uniform01(g.rng()) - 1.0) * bound;
  return t;
}

enum class PadMode { zero, reflective };

namespace detail {

inline bool any_requires_grad(std::initializer_list<Tensor> ts) {
  for (const auto& t : ts)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

/// Padded-coordinate -> source-coordinate map for one axis. -1 means a
/// zero-padding cell. Reflection mirrors interior samples without repeating
/// the border one (index -1 maps to 1, index H maps to H-2).
inline std::vector<int> pad_map(int extent, int pad, PadMode mode) {
  std::vector<int> m(static_cast<std::size_t>(extent + 2 * pad));
  for (int i = 0; i < extent + 2 * pad; ++i) {
    int s = i - pad;
    if (s < 0) s = (mode == PadMode::reflective) ? -s : -1;
    else if (s >= extent) s = (mode == PadMode::reflective) ? 2 * extent - 2 - s : -1;
    m[static_cast<std::size_t>(i)] = s;
  }
  return m;
}

}  // namespace detail

/// 2-D cross-correlation. input [N,Cin,H,W] * weight [Cout,Cin,kh,kw] + bias
/// [Cout] -> [N,Cout,H',W'] with H' = floor((H+2*pad-kh)/stride)+1.
/// Reflective padding mirrors interior rows/columns and requires pad < H,W.
inline Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight,
                     const Tensor& bias, int stride = 1, int pad = 0,
                     PadMode pad_mode = PadMode::zero) {
  if (input.ndim() != 4 || weight.ndim() != 4)
    throw ShapeError("conv2d expects 4-D input and weight");
  const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                     " vs weight " + shape_str(weight.shape()));
  if (!bias.defined() || bias.size() != static_cast<std::size_t>(cout))
    throw ShapeError("conv2d bias must have one entry per output channel");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
  if (pad_mode == PadMode::reflective && (pad >= h || pad >= w))
    throw ShapeError("conv2d: reflective pad too large for input");
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw ShapeError("conv2d: kernel larger than padded input");

  const int hp = h + 2 * pad, wp = w + 2 * pad;
  const int oh = (hp - kh) / stride + 1, ow = (wp - kw) / stride + 1;
  const int ohw = oh * ow;
  const int k = cin * kh * kw;
  const auto rows = detail::pad_map(h, pad, pad_mode);
  const auto cols = detail::pad_map(w, pad, pad_mode);

  // Materialize the padded sample, then gather into a [k, oh*ow] matrix so
  // the contraction below runs over contiguous rows.
  auto build_cols = [=](const double* in_n, double* padded, double* col) {
    for (int c = 0; c < cin; ++c) {
      const double* src = in_n + static_cast<std::size_t>(c) * h * w;
      double* dst = padded + static_cast<std::size_t>(c) * hp * wp;
      for (int y = 0; y < hp; ++y) {
        const int sy = rows[static_cast<std::size_t>(y)];
        if (sy < 0) {
          std::fill(dst + y * wp, dst + (y + 1) * wp, 0.0);
          continue;
        }
        const double* srow = src + static_cast<std::size_t>(sy) * w;
        double* drow = dst + static_cast<std::size_t>(y) * wp;
        for (int x = 0; x < wp; ++x) {
          const int sx = cols[static_cast<std::size_t>(x)];
          drow[x] = sx < 0 ? 0.0 : srow[sx];
        }
      }
    }
    for (int c = 0; c < cin; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          double* crow = col + static_cast<std::size_t>((c * kh + ky) * kw + kx) * ohw;
          const double* p = padded + static_cast<std::size_t>(c) * hp * wp;
          for (int oy = 0; oy < oh; ++oy) {
            const double* prow = p + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
            double* orow = crow + static_cast<std::size_t>(oy) * ow;
            if (stride == 1) {
              std::copy(prow, prow + ow, orow);
            } else {
              for (int ox = 0; ox < ow; ++ox) orow[ox] = prow[ox * stride];
            }
          }
        }
  };

  Tensor out = Tensor::zeros({n, cout, oh, ow},
                             detail::any_requires_grad({input, weight, bias}));
  {
    std::vector<double> padded(static_cast<std::size_t>(cin) * hp * wp);
    std::vector<double> col(static_cast<std::size_t>(k) * ohw);
    for (int i = 0; i < n; ++i) {
      build_cols(input.data() + static_cast<std::size_t>(i) * cin * h * w,
                 padded.data(), col.data());
      double* o = out.data_mut() + static_cast<std::size_t>(i) * cout * ohw;
      for (int co = 0; co < cout; ++co) {
        double* orow = o + static_cast<std::size_t>(co) * ohw;
        std::fill(orow, orow + ohw, bias.data()[co]);
        const double* wrow = weight.data() + static_cast<std::size_t>(co) * k;
        for (int kk = 0; kk < k; ++kk) {
          const double a = wrow[kk];
          if (a == 0.0) continue;
          const double* crow = col.data() + static_cast<std::size_t>(kk) * ohw;
          for (int j = 0; j < ohw; ++j) orow[j] += a * crow[j];
        }
      }
    }
  }

  Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
  g.record("conv2d", {input, weight, bias}, out, [=]() mutable {
    std::span<const double> dout = out_t.grad();
    const bool need_in = in_t.requires_grad();
    const bool need_w = w_t.requires_grad();
    if (b_t.requires_grad()) {
      std::span<double> db = b_t.grad();
      for (int i = 0; i < n; ++i)
        for (int co = 0; co < cout; ++co) {
          const double* drow = dout.data() + (static_cast<std::size_t>(i) * cout + co) * ohw;
          double s = 0.0;
          for (int j = 0; j < ohw; ++j) s += drow[j];
          db[static_cast<std::size_t>(co)] += s;
        }
    }
    if (!need_in && !need_w) return;
    std::vector<double> padded(static_cast<std::size_t>(cin) * hp * wp);
    std::vector<double> col(static_cast<std::size_t>(k) * ohw);
    std::vector<double> dcol(static_cast<std::size_t>(k) * ohw);
    std::vector<double> dpadded(static_cast<std::size_t>(cin) * hp * wp);
    std::span<double> dw = need_w ? w_t.grad() : std::span<double>{};
    std::span<double> din = need_in ? in_t.grad() : std::span<double>{};
    for (int i = 0; i < n; ++i) {
      build_cols(in_t.data() + static_cast<std::size_t>(i) * cin * h * w,
                 padded.data(), col.data());
      const double* dout_n = dout.data() + static_cast<std::size_t>(i) * cout * ohw;
      if (need_w) {
        for (int co = 0; co < cout; ++co) {
          const double* drow = dout_n + static_cast<std::size_t>(co) * ohw;
          double* dwrow = dw.data() + static_cast<std::size_t>(co) * k;
          for (int kk = 0; kk < k; ++kk) {
            const double* crow = col.data() + static_cast<std::size_t>(kk) * ohw;
            double s = 0.0;
            for (int j = 0; j < ohw; ++j) s += drow[j] * crow[j];
            dwrow[kk] += s;
          }
        }
      }
      if (!need_in) continue;
      std::fill(dcol.begin(), dcol.end(), 0.0);
      for (int co = 0; co < cout; ++co) {
        const double* drow = dout_n + static_cast<std::size_t>(co) * ohw;
        const double* wrow = w_t.data() + static_cast<std::size_t>(co) * k;
        for (int kk = 0; kk < k; ++kk) {
          const double a = wrow[kk];
          if (a == 0.0) continue;
          double* dcrow = dcol.data() + static_cast<std::size_t>(kk) * ohw;
          for (int j = 0; j < ohw; ++j) dcrow[j] += a * drow[j];
        }
      }
      std::fill(dpadded.begin(), dpadded.end(), 0.0);
      for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double* dcrow =
                dcol.data() + static_cast<std::size_t>((c * kh + ky) * kw + kx) * ohw;
            double* dp = dpadded.data() + static_cast<std::size_t>(c) * hp * wp;
            for (int oy = 0; oy < oh; ++oy) {
              double* prow = dp + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
              const double* srow = dcrow + static_cast<std::size_t>(oy) * ow;
              for (int ox = 0; ox < ow; ++ox) prow[ox * stride] += srow[ox];
            }
          }
      double* din_n = din.data() + static_cast<std::size_t>(i) * cin * h * w;
      for (int c = 0; c < cin; ++c) {
        const double* dp = dpadded.data() + static_cast<std::size_t>(c) * hp * wp;
        double* dst = din_n + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < hp; ++y) {
          const int sy = rows[static_cast<std::size_t>(y)];
          if (sy < 0) continue;
          for (int x = 0; x < wp; ++x) {
            const int sx = cols[static_cast<std::size_t>(x)];
            if (sx >= 0) dst[static_cast<std::size_t>(sy) * w + sx] += dp[static_cast<std::size_t>(y) * wp + x];
          }
        }
      }
    }
  });
  return out;
}

/// 2x2 max pooling over disjoint windows; H and W must be even. Backward
/// routes the gradient to the argmax cell, first occurrence in row-major
/// order on ties.
inline Tensor maxpool2(Graph& g, const Tensor& input) {
  if (input.ndim() != 4) throw ShapeError("maxpool2 expects a 4-D tensor");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2 requires even spatial extents, got " + shape_str(input.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({n, c, oh, ow}, input.requires_grad());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const double* in = input.data();
  double* o = out.data_mut();
  std::size_t oi = 0;
  for (int i = 0; i < n * c; ++i) {
    const double* plane = in + static_cast<std::size_t>(i) * h * w;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++oi) {
        std::size_t base = static_cast<std::size_t>(2 * oy) * w + 2 * ox;
        double best = plane[base];
        std::size_t bi = base;
        const std::size_t cand[3] = {base + 1, base + w, base + w + 1};
        for (std::size_t idx : cand)
          if (plane[idx] > best) { best = plane[idx]; bi = idx; }
        o[oi] = best;
        (*argmax)[oi] = static_cast<std::uint32_t>(bi);
      }
  }
  Tensor in_t = input, out_t = out;
  g.record("maxpool2", {input}, out, [=]() mutable {
    if (!in_t.requires_grad()) return;
    std::span<double> din = in_t.grad();
    std::span<const double> dout = out_t.grad();
    std::size_t j = 0;
    for (int i = 0; i < n * c; ++i) {
      double* plane = din.data() + static_cast<std::size_t>(i) * h * w;
      for (int p = 0; p < oh * ow; ++p, ++j) plane[(*argmax)[j]] += dout[j];
    }
  });
  return out;
}

namespace detail {

struct UpTaps {
  std::vector<int> lo, hi;
  std::vector<double> whi;  // weight of hi; lo gets 1-whi
};

/// Half-pixel-center source taps for 2x upsampling: output o samples source
/// coordinate (o+0.5)/2 - 0.5, clamped to [0, extent-1].
inline UpTaps up2_taps(int extent) {
  UpTaps t;
  const int out = extent * 2;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.whi.resize(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    int lo = static_cast<int>(std::floor(s));
    int hi = std::min(lo + 1, extent - 1);
    t.lo[static_cast<std::size_t>(o)] = lo;
    t.hi[static_cast<std::size_t>(o)] = hi;
    t.whi[static_cast<std::size_t>(o)] = s - lo;
  }
  return t;
}

}  // namespace detail

/// Bilinear 2x upsampling with half-pixel centers and edge clamping. Linear,
/// so the backward pass is its exact transpose.
inline Tensor bilinear_up2(Graph& g, const Tensor& input) {
  if (input.ndim() != 4) throw ShapeError("bilinear_up2 expects a 4-D tensor");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = 2 * h, ow = 2 * w;
  const auto ty = detail::up2_taps(h);
  const auto tx = detail::up2_taps(w);
  Tensor out = Tensor::zeros({n, c, oh, ow}, input.requires_grad());
  const double* in = input.data();
  double* o = out.data_mut();
  for (int i = 0; i < n * c; ++i) {
    const double* plane = in + static_cast<std::size_t>(i) * h * w;
    double* oplane = o + static_cast<std::size_t>(i) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const double wy = ty.whi[static_cast<std::size_t>(oy)];
      const double* r0 = plane + static_cast<std::size_t>(ty.lo[static_cast<std::size_t>(oy)]) * w;
      const double* r1 = plane + static_cast<std::size_t>(ty.hi[static_cast<std::size_t>(oy)]) * w;
      double* orow = oplane + static_cast<std::size_t>(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const double wx = tx.whi[static_cast<std::size_t>(ox)];
        const int x0 = tx.lo[static_cast<std::size_t>(ox)], x1 = tx.hi[static_cast<std::size_t>(ox)];
        orow[ox] = (1 - wy) * ((1 - wx) * r0[x0] + wx * r0[x1]) +
                   wy * ((1 - wx) * r1[x0] + wx * r1[x1]);
      }
    }
  }
  Tensor in_t = input, out_t = out;
  g.record("bilinear_up2", {input}, out, [=]() mutable {
    if (!in_t.requires_grad()) return;
    std::span<double> din = in_t.grad();
    std::span<const double> dout = out_t.grad();
    for (int i = 0; i < n * c; ++i) {
      double* plane = din.data() + static_cast<std::size_t>(i) * h * w;
      const double* dplane = dout.data() + static_cast<std::size_t>(i) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const double wy = ty.whi[static_cast<std::size_t>(oy)];
        double* r0 = plane + static_cast<std::size_t>(ty.lo[static_cast<std::size_t>(oy)]) * w;
        double* r1 = plane + static_cast<std::size_t>(ty.hi[static_cast<std::size_t>(oy)]) * w;
        const double* drow = dplane + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const double wx = tx.whi[static_cast<std::size_t>(ox)];
          const int x0 = tx.lo[static_cast<std::size_t>(ox)], x1 = tx.hi[static_cast<std::size_t>(ox)];
          const double d = drow[ox];
          r0[x0] += (1 - wy) * (1 - wx) * d;
          r0[x1] += (1 - wy) * wx * d;
          r1[x0] += wy * (1 - wx) * d;
          r1[x1] += wy * wx * d;
        }
      }
    }
  });
  return out;
}

/// Channel concatenation: [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W] with a's
/// channels first. Either operand may have zero channels.
inline Tensor concat_channels(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 4 || b.ndim() != 4) throw ShapeError("concat_channels expects 4-D tensors");
  const int n = a.dim(0), ca = a.dim(1), h = a.dim(2), w = a.dim(3);
  const int cb = b.dim(1);
  if (b.dim(0) != n || b.dim(2) != h || b.dim(3) != w)
    throw ShapeError("concat_channels batch/spatial mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros({n, ca + cb, h, w}, detail::any_requires_grad({a, b}));
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  double* o = out.data_mut();
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data() + static_cast<std::size_t>(i) * ca * hw, ca * hw,
                o + static_cast<std::size_t>(i) * (ca + cb) * hw);
    std::copy_n(b.data() + static_cast<std::size_t>(i) * cb * hw, cb * hw,
                o + static_cast<std::size_t>(i) * (ca + cb) * hw + ca * hw);
  }
  Tensor a_t = a, b_t = b, out_t = out;
  g.record("concat_channels", {a, b}, out, [=]() mutable {
    std::span<const double> dout = out_t.grad();
    for (int i = 0; i < n; ++i) {
      const double* d = dout.data() + static_cast<std::size_t>(i) * (ca + cb) * hw;
      if (a_t.requires_grad()) {
        double* da = a_t.grad().data() + static_cast<std::size_t>(i) * ca * hw;
        for (std::size_t j = 0; j < static_cast<std::size_t>(ca) * hw; ++j) da[j] += d[j];
      }
      if (b_t.requires_grad()) {
        double* db = b_t.grad().data() + static_cast<std::size_t>(i) * cb * hw;
        for (std::size_t j = 0; j < static_cast<std::size_t>(cb) * hw; ++j)
          db[j] += d[static_cast<std::size_t>(ca) * hw + j];
      }
    }
  });
  return out;
}

inline Tensor relu(Graph& g, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  const double* in = x.data();
  double* o = out.data_mut();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  Tensor x_t = x, out_t = out;
  g.record("relu", {x}, out, [=]() mutable {
    if (!x_t.requires_grad()) return;
    std::span<double> dx = x_t.grad();
    std::span<const double> dout = out_t.grad();
    const double* in2 = x_t.data();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (in2[i] > 0.0) dx[i] += dout[i];
  });
  return out;
}

inline Tensor sigmoid(Graph& g, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  const double* in = x.data();
  double* o = out.data_mut();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = in[i];
    if (v >= 0.0) {
      o[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      o[i] = e / (1.0 + e);
    }
  }
  Tensor x_t = x, out_t = out;
  g.record("sigmoid", {x}, out, [=]() mutable {
    if (!x_t.requires_grad()) return;
    std::span<double> dx = x_t.grad();
    std::span<const double> dout = out_t.grad();
    const double* s = out_t.data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s[i] * (1.0 - s[i]) * dout[i];
  });
  return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape(), detail::any_requires_grad({a, b}));
  const double* pa = a.data();
  const double* pb = b.data();
  double* o = out.data_mut();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = pa[i] + pb[i];
  Tensor a_t = a, b_t = b, out_t = out;
  g.record("add", {a, b}, out, [=]() mutable {
    std::span<const double> dout = out_t.grad();
    if (a_t.requires_grad()) {
      std::span<double> da = a_t.grad();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i];
    }
    if (b_t.requires_grad()) {
      std::span<double> db = b_t.grad();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dout[i];
    }
  });
  return out;
}

/// Elementwise product.
inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape(), detail::any_requires_grad({a, b}));
  const double* pa = a.data();
  const double* pb = b.data();
  double* o = out.data_mut();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = pa[i] * pb[i];
  Tensor a_t = a, b_t = b, out_t = out;
  g.record("mul", {a, b}, out, [=]() mutable {
    std::span<const double> dout = out_t.grad();
    if (a_t.requires_grad()) {
      std::span<double> da = a_t.grad();
      const double* pb2 = b_t.data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += pb2[i] * dout[i];
    }
    if (b_t.requires_grad()) {
      std::span<double> db = b_t.grad();
      const double* pa2 = a_t.data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += pa2[i] * dout[i];
    }
  });
  return out;
}

inline Tensor scale(Graph& g, const Tensor& x, double s) {
  Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
  const double* in = x.data();
  double* o = out.data_mut();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = s * in[i];
  Tensor x_t = x, out_t = out;
  g.record("scale", {x}, out, [=]() mutable {
    if (!x_t.requires_grad()) return;
    std::span<double> dx = x_t.grad();
    std::span<const double> dout = out_t.grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * dout[i];
  });
  return out;
}

/// Affine map: x [N,D] * weight [O,D]^T + bias [O] -> [N,O].
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.ndim() != 2 || weight.ndim() != 2)
    throw ShapeError("linear expects 2-D input and weight");
  const int n = x.dim(0), d = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != d)
    throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  if (bias.size() != static_cast<std::size_t>(o))
    throw ShapeError("linear bias must have one entry per output");
  Tensor out = Tensor::zeros({n, o}, detail::any_requires_grad({x, weight, bias}));
  double* po = out.data_mut();
  for (int i = 0; i < n; ++i) {
    const double* xr = x.data() + static_cast<std::size_t>(i) * d;
    double* orow = po + static_cast<std::size_t>(i) * o;
    for (int j = 0; j < o; ++j) {
      const double* wr = weight.data() + static_cast<std::size_t>(j) * d;
      double s = bias.data()[j];
      for (int kk = 0; kk < d; ++kk) s += xr[kk] * wr[kk];
      orow[j] = s;
    }
  }
  Tensor x_t = x, w_t = weight, b_t = bias, out_t = out;
  g.record("linear", {x, weight, bias}, out, [=]() mutable {
    std::span<const double> dout = out_t.grad();
    if (b_t.requires_grad()) {
      std::span<double> db = b_t.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) db[static_cast<std::size_t>(j)] += dout[static_cast<std::size_t>(i) * o + j];
    }
    if (w_t.requires_grad()) {
      std::span<double> dw = w_t.grad();
      for (int i = 0; i < n; ++i) {
        const double* xr = x_t.data() + static_cast<std::size_t>(i) * d;
        const double* dr = dout.data() + static_cast<std::size_t>(i) * o;
        for (int j = 0; j < o; ++j) {
          const double a = dr[j];
          if (a == 0.0) continue;
          double* dwr = dw.data() + static_cast<std::size_t>(j) * d;
          for (int kk = 0; kk < d; ++kk) dwr[kk] += a * xr[kk];
        }
      }
    }
    if (x_t.requires_grad()) {
      std::span<double> dx = x_t.grad();
      for (int i = 0; i < n; ++i) {
        double* dxr = dx.data() + static_cast<std::size_t>(i) * d;
        const double* dr = dout.data() + static_cast<std::size_t>(i) * o;
        for (int j = 0; j < o; ++j) {
          const double a = dr[j];
          if (a == 0.0) continue;
          const double* wr = w_t.data() + static_cast<std::size_t>(j) * d;
          for (int kk = 0; kk < d; ++kk) dxr[kk] += a * wr[kk];
        }
      }
    }
  });
  return out;
}

inline Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw ShapeError("reshape to " + shape_str(shape) + " changes element count");
  Tensor out = Tensor::from_values(std::move(shape),
                                   std::vector<double>(x.values().begin(), x.values().end()),
                                   x.requires_grad());
  Tensor x_t = x, out_t = out;
  g.record("reshape", {x}, out, [=]() mutable {
    if (!x_t.requires_grad()) return;
    std::span<double> dx = x_t.grad();
    std::span<const double> dout = out_t.grad();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
  });
  return out;
}

/// Gather whole rows along the leading dimension.
inline Tensor select_rows(Graph& g, const Tensor& x, std::vector<int> rows) {
  if (x.ndim() < 1) throw ShapeError("select_rows needs at least 1-D input");
  const int n = x.dim(0);
  const std::size_t rest = x.size() / static_cast<std::size_t>(std::max(n, 1));
  for (int r : rows)
    if (r < 0 || r >= n) throw ShapeError("select_rows index out of range");
  Shape os = x.shape();
  os[0] = static_cast<int>(rows.size());
  Tensor out = Tensor::zeros(os, x.requires_grad());
  double* o = out.data_mut();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data() + static_cast<std::size_t>(rows[i]) * rest, rest, o + i * rest);
  Tensor x_t = x, out_t = out;
  auto rows_p = std::make_shared<std::vector<int>>(std::move(rows));
  g.record("select_rows", {x}, out, [=]() mutable {
    if (!x_t.requires_grad()) return;
    std::span<double> dx = x_t.grad();
    std::span<const double> dout = out_t.grad();
    for (std::size_t i = 0; i < rows_p->size(); ++i) {
      double* dst = dx.data() + static_cast<std::size_t>((*rows_p)[i]) * rest;
      const double* src = dout.data() + i * rest;
      for (std::size_t j = 0; j < rest; ++j) dst[j] += src[j];
    }
  });
  return out;
}

/// Copy with the gradient path cut: the result does not require gradients and
/// backward never crosses it.
inline Tensor detach(Graph& g, const Tensor& x) {
  Tensor out = Tensor::from_values(
      x.shape(), std::vector<double>(x.values().begin(), x.values().end()), false);
  g.record("detach", {x}, out, nullptr);
  return out;
}

inline Tensor sum(Graph& g, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::from_values({1}, {s}, x.requires_grad());
  Tensor x_t = x, out_t = out;
  g.record("sum", {x}, out, [=]() mutable {
    if (!x_t.requires_grad()) return;
    const double d = out_t.grad()[0];
    std::span<double> dx = x_t.grad();
    for (double& v : dx) v += d;
  });
  return out;
}

inline Tensor mean(Graph& g, const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(g, sum(g, x), 1.0 / static_cast<double>(x.size()));
}

/// Mean binary cross-entropy. Predictions must already be probabilities
/// (apply sigmoid upstream); they are clamped to [1e-7, 1-1e-7] before the
/// logs. Targets must be exactly 0 or 1.
inline Tensor bce_loss(Graph& g, const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("bce_loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  if (pred.size() == 0) throw ShapeError("bce_loss on empty tensor");
  constexpr double kEps = 1e-7;
  const double* p = pred.data();
  const double* t = target.data();
  const std::size_t n = pred.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0))
      throw NumericError("bce_loss prediction outside [0,1]");
    if (t[i] != 0.0 && t[i] != 1.0) throw ShapeError("bce_loss target must be 0 or 1");
    const double pc = std::clamp(p[i], kEps, 1.0 - kEps);
    acc -= t[i] * std::log(pc) + (1.0 - t[i]) * std::log(1.0 - pc);
  }
  Tensor out = Tensor::from_values({1}, {acc / static_cast<double>(n)}, pred.requires_grad());
  Tensor p_t = pred, t_t = target, out_t = out;
  g.record("bce_loss", {pred, target}, out, [=]() mutable {
    if (!p_t.requires_grad()) return;
    const double d = out_t.grad()[0] / static_cast<double>(n);
    std::span<double> dp = p_t.grad();
    const double* p2 = p_t.data();
    const double* t2 = t_t.data();
    for (std::size_t i = 0; i < n; ++i) {
      if (p2[i] <= kEps || p2[i] >= 1.0 - kEps) continue;  // clamped region
      dp[i] += d * (-t2[i] / p2[i] + (1.0 - t2[i]) / (1.0 - p2[i]));
    }
  });
  return out;
}

}  // namespace maskref
