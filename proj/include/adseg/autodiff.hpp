#pragma once

// Tape-based reverse-mode differentiation over a fixed set of tensor ops.
//
// A Tape records every op applied to Vars created from it. Leaves are either
// constants or named parameters; backprop() returns d(loss)/d(parameter) for
// every parameter registered on the tape. A tape constructed with
// record=false evaluates values only and refuses to backprop.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adseg/error.hpp"
#include "adseg/named_tensors.hpp"
#include "adseg/tensor.hpp"

namespace adseg {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient flowing into the node's output and accumulates
  /// into its inputs via grad().
  using Backward = std::function<void(const Tensor& grad_out, Tape& tape)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor t) { return push_leaf(std::move(t), false); }

  Var parameter(const std::string& name, Tensor t) {
    for (const auto& [n, _] : params_)
      if (n == name) throw ConfigError("parameter '" + name + "' registered twice on tape");
    Var v = push_leaf(std::move(t), record_);
    params_.emplace_back(name, v.id());
    return v;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op result. `inputs` are the node ids the op read; the
  /// backward closure is dropped when no input needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, Backward backward, const char* op) {
    if (!value.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite output");
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw ConfigError(std::string(op) + ": operand belongs to another tape");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    Node node{std::move(value), needs && record_, {}};
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  /// Gradient accumulator of node `id`, zero-initialized on first access.
  Tensor& grad(std::size_t id) {
    if (!grads_[id].has_value()) grads_[id] = Tensor(nodes_[id].value.shape());
    return *grads_[id];
  }

  Gradients backprop(Var loss) {
    if (!record_) throw ConfigError("backprop on a non-recording tape");
    if (loss.tape_ != this) throw ConfigError("backprop: loss belongs to another tape");
    if (nodes_[loss.id_].value.size() != 1) {
      throw ShapeError("backprop: loss is not scalar, shape " + shape_str(loss.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grad(loss.id_)[0] = Real{1};
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      if (!grads_[i].has_value() || !nodes_[i].backward) continue;
      nodes_[i].backward(*grads_[i], *this);
    }
    Gradients out;
    for (const auto& [name, id] : params_) {
      Tensor g = grads_[id].has_value() ? std::move(*grads_[id]) : Tensor(nodes_[id].value.shape());
      if (!g.all_finite()) throw NonFiniteError("backprop: non-finite gradient for '" + name + "'");
      out.add(name, std::move(g));
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    Backward backward;
  };

  Var push_leaf(Tensor t, bool requires_grad) {
    if (!t.all_finite()) throw NonFiniteError("leaf tensor contains non-finite values");
    nodes_.push_back(Node{std::move(t), requires_grad, {}});
    return Var(this, nodes_.size() - 1);
  }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
  std::vector<std::optional<Tensor>> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename Fwd, typename Dfn>
Var unary(Var x, Fwd fwd, Dfn dfn, const char* op) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  Tape& tape = x.tape();
  return tape.push(
      std::move(out), {x},
      [xid, dfn](const Tensor& g, Tape& t) {
        const Tensor& xv = t.value(xid);
        Tensor& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfn(xv[i]);
      },
      op);
}

inline Real stable_sigmoid(Real v) {
  if (v >= 0) return Real{1} / (Real{1} + std::exp(-v));
  const Real e = std::exp(v);
  return e / (Real{1} + e);
}

}  // namespace detail

inline Var relu(Var x) {
  return detail::unary(
      x, [](Real v) { return v > 0 ? v : Real{0}; }, [](Real v) { return v > 0 ? Real{1} : Real{0}; },
      "relu");
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, detail::stable_sigmoid,
      [](Real v) {
        const Real s = detail::stable_sigmoid(v);
        return s * (Real{1} - s);
      },
      "sigmoid");
}

inline Var log(Var x) {
  for (Real v : x.value().data())
    if (!(v > 0)) throw DomainError("log: input must be strictly positive");
  return detail::unary(
      x, [](Real v) { return std::log(v); }, [](Real v) { return Real{1} / v; }, "log");
}

/// y = s * x
inline Var scale(Var x, Real s) {
  return detail::unary(
      x, [s](Real v) { return s * v; }, [s](Real) { return s; }, "scale");
}

/// y = x + s
inline Var add_scalar(Var x, Real s) {
  return detail::unary(
      x, [s](Real v) { return v + s; }, [](Real) { return Real{1}; }, "add_scalar");
}

/// Clamp to [lo, hi]; the gradient is zero where the clamp is active.
inline Var clamp(Var x, Real lo, Real hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lo > hi");
  return detail::unary(
      x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v) { return (v >= lo && v <= hi) ? Real{1} : Real{0}; }, "clamp");
}

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().push(
      std::move(out), {a, b},
      [aid, bid](const Tensor& g, Tape& t) {
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      },
      "add");
}

inline Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().push(
      std::move(out), {a, b},
      [aid, bid](const Tensor& g, Tape& t) {
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      },
      "sub");
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().push(
      std::move(out), {a, b},
      [aid, bid](const Tensor& g, Tape& t) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

// ---------------------------------------------------------------------------
// Reductions and reshapes

inline Var sum(Var x) {
  const Real s = x.value().sum();
  const std::size_t xid = x.id();
  return x.tape().push(
      Tensor::scalar(s), {x},
      [xid](const Tensor& g, Tape& t) {
        Tensor& gx = t.grad(xid);
        const Real g0 = g[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g0;
      },
      "sum");
}

inline Var mean(Var x) {
  const Real n = static_cast<Real>(x.value().size());
  const Real m = x.value().sum() / n;
  const std::size_t xid = x.id();
  return x.tape().push(
      Tensor::scalar(m), {x},
      [xid, n](const Tensor& g, Tape& t) {
        Tensor& gx = t.grad(xid);
        const Real g0 = g[0] / n;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g0;
      },
      "mean");
}

inline Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.value().data());
  const std::size_t xid = x.id();
  return x.tape().push(
      std::move(out), {x},
      [xid](const Tensor& g, Tape& t) {
        Tensor& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Spatial ops on [C,H,W]

inline Var concat_channels(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 3, "concat_channels");
  require_rank(bv, 3, "concat_channels");
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  std::vector<Real> data;
  data.reserve(av.size() + bv.size());
  data.insert(data.end(), av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)}, std::move(data));
  const std::size_t aid = a.id(), bid = b.id(), na = av.size();
  return a.tape().push(
      std::move(out), {a, b},
      [aid, bid, na](const Tensor& g, Tape& t) {
        if (t.requires_grad(aid)) {
          Tensor& ga = t.grad(aid);
          for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad(bid);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
      },
      "concat_channels");
}

namespace detail {

// Half-pixel-centred bilinear taps for doubling one axis of length n.
struct UpsampleTap {
  std::size_t lo, hi;
  Real w_lo, w_hi;
};

inline std::vector<UpsampleTap> upsample_taps(std::size_t n) {
  std::vector<UpsampleTap> taps(2 * n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t prev = k == 0 ? 0 : k - 1;
    const std::size_t next = k + 1 < n ? k + 1 : n - 1;
    taps[2 * k] = {prev, k, Real{0.25}, Real{0.75}};
    taps[2 * k + 1] = {k, next, Real{0.75}, Real{0.25}};
  }
  return taps;
}

}  // namespace detail

/// Bilinear 2x upsampling with half-pixel centres and edge replication.
inline Var upsample2x(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "upsample2x");
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const auto ty = detail::upsample_taps(H);
  const auto tx = detail::upsample_taps(W);
  Tensor out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < 2 * H; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < 2 * W; ++ox) {
        const auto& b = tx[ox];
        out.at(c, oy, ox) = a.w_lo * (b.w_lo * xv.at(c, a.lo, b.lo) + b.w_hi * xv.at(c, a.lo, b.hi)) +
                            a.w_hi * (b.w_lo * xv.at(c, a.hi, b.lo) + b.w_hi * xv.at(c, a.hi, b.hi));
      }
    }
  }
  const std::size_t xid = x.id();
  return x.tape().push(
      std::move(out), {x},
      [xid, C, H, W, ty, tx](const Tensor& g, Tape& t) {
        Tensor& gx = t.grad(xid);
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t oy = 0; oy < 2 * H; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < 2 * W; ++ox) {
              const auto& b = tx[ox];
              const Real gv = g.at(c, oy, ox);
              gx.at(c, a.lo, b.lo) += gv * a.w_lo * b.w_lo;
              gx.at(c, a.lo, b.hi) += gv * a.w_lo * b.w_hi;
              gx.at(c, a.hi, b.lo) += gv * a.w_hi * b.w_lo;
              gx.at(c, a.hi, b.hi) += gv * a.w_hi * b.w_hi;
            }
          }
        }
      },
      "upsample2x");
}

namespace detail {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return cin * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

inline std::vector<Real> im2col(const Tensor& x, const ConvGeometry& g) {
  std::vector<Real> cols(g.rows() * g.cols(), Real{0});
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = cols.data() + ((ci * g.kh + ki) * g.kw + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const Real* src = x.ptr() + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          Real* dst = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

inline void col2im_add(const RowMatrix& dcols, const ConvGeometry& g, Tensor& dx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = dcols.data() + ((ci * g.kh + ki) * g.kw + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          Real* dst = dx.ptr() + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const Real* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation of a [C_in,H,W] input with a [C_out,C_in,kh,kw]
/// kernel plus per-channel bias. Kernel extents must be odd.
inline Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const Tensor& b = bias.value();
  require_rank(x, 3, "conv2d input");
  require_rank(k, 4, "conv2d kernel");
  require_rank(b, 1, "conv2d bias");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (k.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, got " +
                     std::to_string(x.dim(0)));
  }
  if (b.dim(0) != k.dim(0)) throw ShapeError("conv2d: bias length does not match output channels");
  if (k.dim(2) % 2 == 0 || k.dim(3) % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), k.dim(0), k.dim(2), k.dim(3), stride, padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) throw ShapeError("conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  std::vector<Real> cols = detail::im2col(x, g);
  Tensor out({g.cout, g.ho, g.wo});
  {
    detail::ConstRowMap km(k.ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.rows()));
    detail::ConstRowMap cm(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    detail::RowMap om(out.ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.cols()));
    om.noalias() = km * cm;
    for (std::size_t co = 0; co < g.cout; ++co) om.row(static_cast<Eigen::Index>(co)).array() += b[co];
  }
  if (!input.tape().recording()) cols.clear();

  const std::size_t xid = input.id(), kid = kernel.id(), bid = bias.id();
  return input.tape().push(
      std::move(out), {input, kernel, bias},
      [xid, kid, bid, g, cols = std::move(cols)](const Tensor& grad, Tape& t) {
        const auto R = static_cast<Eigen::Index>(g.rows());
        const auto P = static_cast<Eigen::Index>(g.cols());
        const auto Co = static_cast<Eigen::Index>(g.cout);
        detail::ConstRowMap gm(grad.ptr(), Co, P);
        if (t.requires_grad(kid)) {
          detail::ConstRowMap cm(cols.data(), R, P);
          detail::RowMap gk(t.grad(kid).ptr(), Co, R);
          gk.noalias() += gm * cm.transpose();
        }
        if (t.requires_grad(bid)) {
          Tensor& gb = t.grad(bid);
          for (Eigen::Index co = 0; co < Co; ++co) gb[static_cast<std::size_t>(co)] += gm.row(co).sum();
        }
        if (t.requires_grad(xid)) {
          detail::ConstRowMap km(t.value(kid).ptr(), Co, R);
          detail::RowMatrix dcols = km.transpose() * gm;
          detail::col2im_add(dcols, g, t.grad(xid));
        }
      },
      "conv2d");
}

}  // namespace adseg
