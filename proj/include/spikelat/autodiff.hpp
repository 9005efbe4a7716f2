#pragma once

// Reverse-mode differentiation over a define-by-run tape, restricted to the
// primitives a latency-coded SNN needs. Every forward op records a node whose
// closure knows how to push the node's gradient into its parents.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spikelat/tensor.hpp"

namespace spikelat {

enum class OpKind {
  Leaf,
  Linear,
  Conv2d,
  BatchNorm2d,
  Sigmoid,
  SoftmaxRows,
  Add,
  Scale,
  Sum,
  Mean,
  WeightedSum,
  Reshape,
  AvgPool2d,
  TimeMean,
  CrossEntropy,
  Lif,
  LatencyEncode,
  TadLoss,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Linear: return "linear";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BatchNorm2d: return "batchnorm2d";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::WeightedSum: return "weighted_sum";
    case OpKind::Reshape: return "reshape";
    case OpKind::AvgPool2d: return "avgpool2d";
    case OpKind::TimeMean: return "time_mean";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Lif: return "lif";
    case OpKind::LatencyEncode: return "latency_encode";
    case OpKind::TadLoss: return "tad_loss";
  }
  return "?";
}

// Receives the node's accumulated gradient and one slot per parent; a slot is
// null when that parent does not need a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

struct Node {
  std::size_t id = 0;
  OpKind op = OpKind::Leaf;
  std::vector<std::size_t> parents;
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  BackwardFn backward;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.id = nodes_.size();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var record(OpKind op, std::vector<Var> parents, Tensor value, BackwardFn backward) {
    if (!value.all_finite())
      throw NumericError(std::string("non-finite value produced by ") + op_name(op));
    Node n;
    n.id = nodes_.size();
    n.op = op;
    for (const Var& p : parents) {
      if (&p.tape() != this) throw GraphError("parent belongs to a different tape");
      if (p.id() >= n.id) throw GraphError("parent does not precede node");
      n.parents.push_back(p.id());
      n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  Tensor grad_of(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.empty() && !n.value.empty() ? Tensor::zeros_like(n.value) : n.grad;
  }

  // Seeds d(root)/d(root) = 1 and walks the tape backwards. Gradients of
  // nodes used several times (e.g. weights shared across timesteps) add up.
  void backward(Var root) {
    if (&root.tape() != this) throw GraphError("root belongs to a different tape");
    Node& r = nodes_.at(root.id());
    if (r.value.size() != 1)
      throw ContractError("backward root must be scalar, got " + shape_str(r.value.shape()));
    r.grad = Tensor(r.value.shape(), 1.0);
    std::vector<Tensor*> slots;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      slots.clear();
      for (std::size_t p : n.parents) {
        if (p >= i) throw GraphError("cycle detected at node " + std::to_string(i));
        Node& pn = nodes_[p];
        if (!pn.requires_grad) {
          slots.push_back(nullptr);
          continue;
        }
        if (pn.grad.empty()) pn.grad = Tensor::zeros_like(pn.value);
        slots.push_back(&pn.grad);
      }
      n.backward(n.grad, slots);
    }
  }

  // Multiply-accumulate counter for conv/linear, used by the energy audit.
  std::uint64_t mac_count() const { return macs_; }
  void count_macs(std::uint64_t n) { macs_ += n; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline Tensor Var::grad() const { return tape_->grad_of(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, hout, wout;
  std::size_t patch() const { return cin * k * k; }
  std::size_t pixels() const { return hout * wout; }
};

inline void im2col(const double* x, const ConvGeom& g, RowMat& cols) {
  cols.resize(static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const std::size_t row = (c * g.k + ki) * g.k + kj;
        double* dst = cols.data() + row * g.pixels();
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            dst[oy * g.wout + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const RowMat& cols, const ConvGeom& g, double* dx) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const std::size_t row = (c * g.k + ki) * g.k + kj;
        const double* src = cols.data() + row * g.pixels();
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += src[oy * g.wout + ox];
          }
        }
      }
}

}  // namespace detail

// out[n,o] = sum_i x[n,i] w[i,o] + b[o]
inline Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  detail::require_rank(xv, 2, "linear");
  detail::require_rank(wv, 2, "linear");
  detail::require_rank(bv, 1, "linear");
  const std::size_t n = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
  if (wv.dim(0) != in || bv.dim(0) != out)
    throw DimensionError("linear: x " + shape_str(xv.shape()) + ", w " + shape_str(wv.shape()) +
                         ", b " + shape_str(bv.shape()));
  Tensor y({n, out});
  const auto N = static_cast<Eigen::Index>(n), I = static_cast<Eigen::Index>(in),
             O = static_cast<Eigen::Index>(out);
  detail::MapMat ym(y.raw(), N, O);
  ym.noalias() = detail::ConstMapMat(xv.raw(), N, I) * detail::ConstMapMat(wv.raw(), I, O);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.raw(), O);
  x.tape().count_macs(static_cast<std::uint64_t>(n * in * out));

  Tape* tape = &x.tape();
  const std::size_t xi = x.id(), wi = w.id();
  return tape->record(OpKind::Linear, {x, w, b}, std::move(y),
                      [tape, xi, wi, N, I, O](const Tensor& g, std::span<Tensor* const> pg) {
                        detail::ConstMapMat gm(g.raw(), N, O);
                        if (pg[0])
                          detail::MapMat(pg[0]->raw(), N, I).noalias() +=
                              gm * detail::ConstMapMat(tape->node(wi).value.raw(), I, O).transpose();
                        if (pg[1])
                          detail::MapMat(pg[1]->raw(), I, O).noalias() +=
                              detail::ConstMapMat(tape->node(xi).value.raw(), N, I).transpose() * gm;
                        if (pg[2]) {
                          // plain row-order loop: Eigen's vectorised column sum
                          // depends on buffer alignment, which breaks run-to-run
                          // bit equality
                          std::vector<double> acc(static_cast<std::size_t>(O), 0.0);
                          for (Eigen::Index r = 0; r < N; ++r)
                            for (Eigen::Index c = 0; c < O; ++c) acc[c] += gm(r, c);
                          for (Eigen::Index c = 0; c < O; ++c) (*pg[2])[c] += acc[c];
                        }
                      });
}

// Cross-correlation of x[N,Cin,H,W] with k[Cout,Cin,K,K], zero padding.
inline Var conv2d(Var x, Var k, std::size_t stride, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& kv = k.value();
  detail::require_rank(xv, 4, "conv2d");
  detail::require_rank(kv, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (kv.dim(1) != xv.dim(1) || kv.dim(2) != kv.dim(3))
    throw DimensionError("conv2d: kernel " + shape_str(kv.shape()) + " incompatible with input " +
                         shape_str(xv.shape()));
  detail::ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), stride, pad, 0, 0};
  if (g.k > g.h + 2 * pad || g.k > g.w + 2 * pad)
    throw DimensionError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
                         shape_str(xv.shape()));
  g.hout = (g.h + 2 * pad - g.k) / stride + 1;
  g.wout = (g.w + 2 * pad - g.k) / stride + 1;

  Tensor y({g.n, g.cout, g.hout, g.wout});
  const auto CO = static_cast<Eigen::Index>(g.cout), P = static_cast<Eigen::Index>(g.patch()),
             HW = static_cast<Eigen::Index>(g.pixels());
  detail::ConstMapMat km(kv.raw(), CO, P);
  detail::RowMat cols;
  const std::size_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * g.pixels();
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(xv.raw() + n * in_stride, g, cols);
    detail::MapMat(y.raw() + n * out_stride, CO, HW).noalias() = km * cols;
  }
  x.tape().count_macs(static_cast<std::uint64_t>(g.n * g.pixels() * g.patch() * g.cout));

  Tape* tape = &x.tape();
  const std::size_t xi = x.id(), ki = k.id();
  return tape->record(
      OpKind::Conv2d, {x, k}, std::move(y),
      [tape, xi, ki, g, CO, P, HW, in_stride, out_stride](const Tensor& grad,
                                                            std::span<Tensor* const> pg) {
        const Tensor& xv = tape->node(xi).value;
        detail::ConstMapMat km(tape->node(ki).value.raw(), CO, P);
        detail::RowMat cols, dcols;
        for (std::size_t n = 0; n < g.n; ++n) {
          detail::ConstMapMat gm(grad.raw() + n * out_stride, CO, HW);
          if (pg[1]) {
            detail::im2col(xv.raw() + n * in_stride, g, cols);
            detail::MapMat(pg[1]->raw(), CO, P).noalias() += gm * cols.transpose();
          }
          if (pg[0]) {
            dcols.noalias() = km.transpose() * gm;
            detail::col2im_add(dcols, g, pg[0]->raw() + n * in_stride);
          }
        }
      });
}

struct BatchNormStats {
  Tensor mean;
  Tensor var;
};

enum class NormMode { Train, Eval };

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalisation of x[N,C,H,W]. Train mode uses batch statistics
// (biased variance) and updates `stats` with momentum; running variance uses
// the unbiased estimate. Eval mode normalises with `stats`.
inline Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormStats& stats, NormMode mode,
                       BatchNormOptions opt = {}) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "batchnorm2d");
  if (opt.eps <= 0) throw ContractError("batchnorm2d: eps must be positive");
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gamma.value().size() != c || beta.value().size() != c || stats.mean.size() != c ||
      stats.var.size() != c)
    throw DimensionError("batchnorm2d: parameter size does not match channels " +
                         std::to_string(c));
  const std::size_t m = n * hw;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();

  Tensor y(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == NormMode::Train) {
      // Shifted accumulation keeps a constant channel exactly centred.
      const double pivot = xv[ch * hw];
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) s += xv[(i * c + ch) * hw + j] - pivot;
      mean = pivot + s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = xv[(i * c + ch) * hw + j] - mean;
          ss += d * d;
        }
      var = ss / static_cast<double>(m);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      stats.mean[ch] = (1.0 - opt.momentum) * stats.mean[ch] + opt.momentum * mean;
      stats.var[ch] = (1.0 - opt.momentum) * stats.var[ch] + opt.momentum * unbiased;
    } else {
      mean = stats.mean[ch];
      var = stats.var[ch];
    }
    invstd[ch] = 1.0 / std::sqrt(var + opt.eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + ch) * hw + j;
        xhat[idx] = (xv[idx] - mean) * invstd[ch];
        y[idx] = gv[ch] * xhat[idx] + bv[ch];
      }
  }

  Tape* tape = &x.tape();
  const std::size_t gi = gamma.id();
  const bool train = mode == NormMode::Train;
  return tape->record(
      OpKind::BatchNorm2d, {x, gamma, beta}, std::move(y),
      [tape, gi, xhat = std::move(xhat), invstd = std::move(invstd), n, c, hw, m, train](
          const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& gv = tape->node(gi).value;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t idx = (i * c + ch) * hw + j;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (pg[1]) (*pg[1])[ch] += sum_gx;
          if (pg[2]) (*pg[2])[ch] += sum_g;
          if (!pg[0]) continue;
          const double scale = gv[ch] * invstd[ch];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t idx = (i * c + ch) * hw + j;
              (*pg[0])[idx] += train ? scale / static_cast<double>(m) *
                                           (static_cast<double>(m) * g[idx] - sum_g - xhat[idx] * sum_gx)
                                     : scale * g[idx];
            }
        }
      });
}

inline Var sigmoid(Var x) {
  Tensor y(x.value().shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = detail::stable_sigmoid(x.value()[i]);
  Tape* tape = &x.tape();
  const std::size_t self = tape->size();
  return tape->record(OpKind::Sigmoid, {x}, std::move(y),
                      [tape, self](const Tensor& g, std::span<Tensor* const> pg) {
                        const Tensor& s = tape->node(self).value;
                        for (std::size_t i = 0; i < g.size(); ++i)
                          (*pg[0])[i] += g[i] * s[i] * (1.0 - s[i]);
                      });
}

// Row-wise softmax on a plain tensor, max-subtracted.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y.at(i, j) = std::exp(x.at(i, j) - mx));
    for (std::size_t j = 0; j < c; ++j) y.at(i, j) /= z;
  }
  return y;
}

inline Var softmax_rows(Var x) {
  Tensor y = softmax_rows(x.value());
  Tape* tape = &x.tape();
  const std::size_t self = tape->size();
  return tape->record(OpKind::SoftmaxRows, {x}, std::move(y),
                      [tape, self](const Tensor& g, std::span<Tensor* const> pg) {
                        const Tensor& s = tape->node(self).value;
                        const std::size_t n = s.dim(0), c = s.dim(1);
                        for (std::size_t i = 0; i < n; ++i) {
                          double dot = 0.0;
                          for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * s.at(i, j);
                          for (std::size_t j = 0; j < c; ++j)
                            pg[0]->at(i, j) += s.at(i, j) * (g.at(i, j) - dot);
                        }
                      });
}

inline Var add(Var a, Var b) {
  a.value().require_same(b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return a.tape().record(OpKind::Add, {a, b}, std::move(y),
                         [](const Tensor& g, std::span<Tensor* const> pg) {
                           if (pg[0]) *pg[0] += g;
                           if (pg[1]) *pg[1] += g;
                         });
}

inline Var scale(Var a, double c) {
  Tensor y = a.value();
  y *= c;
  return a.tape().record(OpKind::Scale, {a}, std::move(y),
                         [c](const Tensor& g, std::span<Tensor* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
                         });
}

inline Var sum(Var a) {
  return a.tape().record(OpKind::Sum, {a}, Tensor::scalar(a.value().sum()),
                         [](const Tensor& g, std::span<Tensor* const> pg) {
                           for (double& v : pg[0]->data()) v += g[0];
                         });
}

inline Var mean(Var a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return a.tape().record(OpKind::Mean, {a}, Tensor::scalar(a.value().sum() * inv),
                         [inv](const Tensor& g, std::span<Tensor* const> pg) {
                           for (double& v : pg[0]->data()) v += g[0] * inv;
                         });
}

// sum_i a[i] * w[i] with constant weights; handy for probing gradients.
inline Var weighted_sum(Var a, Tensor w) {
  a.value().require_same(w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return a.tape().record(OpKind::WeightedSum, {a}, Tensor::scalar(s),
                         [w = std::move(w)](const Tensor& g, std::span<Tensor* const> pg) {
                           for (std::size_t i = 0; i < w.size(); ++i) (*pg[0])[i] += g[0] * w[i];
                         });
}

inline Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().record(OpKind::Reshape, {a}, std::move(y),
                         [](const Tensor& g, std::span<Tensor* const> pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                         });
}

// Non-overlapping average pooling with window = stride = k. Trailing rows and
// columns that do not fill a window are dropped.
inline Var avgpool2d(Var x, std::size_t k) {
  const Tensor& xv = x.value();
  detail::require_rank(xv, 4, "avgpool2d");
  if (k == 0 || k > xv.dim(2) || k > xv.dim(3))
    throw DimensionError("avgpool2d: window " + std::to_string(k) + " does not fit " +
                         shape_str(xv.shape()));
  const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor y({xv.dim(0), xv.dim(1), ho, wo});
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) s += xv[(p * h + oy * k + a) * w + ox * k + b];
        y[(p * ho + oy) * wo + ox] = s * inv;
      }
  return x.tape().record(OpKind::AvgPool2d, {x}, std::move(y),
                         [nc, h, w, ho, wo, k, inv](const Tensor& g, std::span<Tensor* const> pg) {
                           for (std::size_t p = 0; p < nc; ++p)
                             for (std::size_t oy = 0; oy < ho; ++oy)
                               for (std::size_t ox = 0; ox < wo; ++ox) {
                                 const double gv = g[(p * ho + oy) * wo + ox] * inv;
                                 for (std::size_t a = 0; a < k; ++a)
                                   for (std::size_t b = 0; b < k; ++b)
                                     (*pg[0])[(p * h + oy * k + a) * w + ox * k + b] += gv;
                               }
                         });
}

// x[T,N,C] (or [T*N,C] with explicit steps) -> mean over the time axis, [N,C].
inline Var time_mean(Var x, std::size_t steps) {
  const Tensor& xv = x.value();
  if (steps == 0 || xv.rank() < 2 || xv.dim(0) % steps != 0)
    throw DimensionError("time_mean: leading axis of " + shape_str(xv.shape()) +
                         " is not divisible by " + std::to_string(steps));
  const std::size_t per_step = xv.size() / steps;
  const std::size_t n = xv.rank() == 3 ? xv.dim(1) : xv.dim(0) / steps;
  const std::size_t c = per_step / n;
  const double inv = 1.0 / static_cast<double>(steps);
  Tensor y({n, c});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < per_step; ++i) y[i] += xv[t * per_step + i] * inv;
  return x.tape().record(OpKind::TimeMean, {x}, std::move(y),
                         [steps, per_step, inv](const Tensor& g, std::span<Tensor* const> pg) {
                           for (std::size_t t = 0; t < steps; ++t)
                             for (std::size_t i = 0; i < per_step; ++i)
                               (*pg[0])[t * per_step + i] += g[i] * inv;
                         });
}

// Per-row softmax cross-entropy in nats.
inline std::vector<double> cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: label count mismatch");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ContractError("label " + std::to_string(labels[i]) + " out of range [0," +
                          std::to_string(c) + ")");
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits.at(i, j) - mx);
    out[i] = std::log(z) + mx - logits.at(i, static_cast<std::size_t>(labels[i]));
  }
  return out;
}

// Batch-mean softmax cross-entropy of logits[N,C].
inline Var cross_entropy(Var logits, std::vector<int> labels) {
  const auto rows = cross_entropy_rows(logits.value(), labels);
  double s = 0.0;
  for (double r : rows) s += r;
  const std::size_t n = rows.size();
  Tape* tape = &logits.tape();
  const std::size_t li = logits.id();
  return tape->record(OpKind::CrossEntropy, {logits}, Tensor::scalar(s / static_cast<double>(n)),
                      [tape, li, labels = std::move(labels), n](const Tensor& g,
                                                               std::span<Tensor* const> pg) {
                        const Tensor p = softmax_rows(tape->node(li).value);
                        const double k = g[0] / static_cast<double>(n);
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < p.dim(1); ++j)
                            pg[0]->at(i, j) +=
                                k * (p.at(i, j) - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0));
                      });
}

}  // namespace spikelat
