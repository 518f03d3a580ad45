#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "ufedgan/kernels.hpp"
#include "ufedgan/tensor.hpp"

namespace ufed {

enum class Mode { train, eval };

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  matmul,
  add_bias,
  conv2d,
  conv2d_t,
  relu,
  leaky_relu,
  tanh_act,
  sigmoid_act,
  batchnorm,
  reshape,
  mean_all,
  sum_all,
  bce,
  softmax_ce,
};

template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
};

namespace detail {

template <typename T>
constexpr T sigmoid_eps();
template <>
constexpr float sigmoid_eps<float>() { return 1e-7f; }
template <>
constexpr double sigmoid_eps<double>() { return 1e-12; }

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                                const char* op) {
  if (s < 1) throw ContractError(std::string(op) + ": stride must be >= 1");
  if (in + 2 * p < k)
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(k) +
                         " exceeds padded input " + std::to_string(in + 2 * p));
  return (in + 2 * p - k) / s + 1;
}

// col is (C*kh*kw) x (oh*ow), row-major.
template <typename T>
void im2col(const T* src, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t s, std::size_t p, std::size_t oh, std::size_t ow, T* col) {
  const std::size_t S = oh * ow;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * S;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * s + ki) - std::ptrdiff_t(p);
          if (iy < 0 || iy >= std::ptrdiff_t(H)) {
            for (std::size_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
            continue;
          }
          const T* srow = src + (c * H + std::size_t(iy)) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * s + kj) - std::ptrdiff_t(p);
            row[oy * ow + ox] = (ix >= 0 && ix < std::ptrdiff_t(W)) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-accumulate columns back into the image.
template <typename T>
void col2im_acc(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, std::size_t s, std::size_t p, std::size_t oh, std::size_t ow,
                T* dst) {
  const std::size_t S = oh * ow;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * S;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * s + ki) - std::ptrdiff_t(p);
          if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
          T* drow = dst + (c * H + std::size_t(iy)) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * s + kj) - std::ptrdiff_t(p);
            if (ix >= 0 && ix < std::ptrdiff_t(W)) drow[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Append-only record of primitive ops; one backward pass yields gradients for
// every watched leaf. Single-threaded and single-use. Leaf tensors must stay
// alive (and unmodified) between watch() and backward().
template <typename T>
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::leaf;
    int a = -1, b = -1, c = -1;
    bool needs_grad = false;
    Shape shape;
    std::vector<T> value;
    std::vector<T> aux;
    std::vector<std::int32_t> labels;
    int i0 = 0, i1 = 0;
    T f0{};
    Tensor<T>* leaf = nullptr;
  };

  Tape() {
    if (active_slot() != nullptr) throw StateError("Tape: a tape is already active on this thread");
    active_slot() = this;
  }
  ~Tape() {
    if (active_slot() == this) active_slot() = nullptr;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  int watch(Tensor<T>& t) {
    ensure_live("watch");
    if (t.tape_tag == this && t.node >= 0) return t.node;
    t.set_requires_grad(true);
    Node n;
    n.kind = OpKind::leaf;
    n.needs_grad = true;
    n.shape = t.shape();
    n.value = t.data();
    n.leaf = &t;
    const int id = record(std::move(n));
    t.node = id;
    t.tape_tag = this;
    return id;
  }

  // Node id of `t` on this tape, or -1 when untracked here.
  int tracked_node(const Tensor<T>& t) const {
    return (t.tape_tag == this && t.node >= 0) ? t.node : -1;
  }

  // Records `t`'s data as a constant (no gradient flows into it).
  int intern_constant(const Tensor<T>& t) {
    ensure_live("record");
    Node n;
    n.kind = OpKind::constant;
    n.needs_grad = false;
    n.shape = t.shape();
    n.value = t.data();
    return record(std::move(n));
  }

  int record(Node&& n) {
    ensure_live("record");
    nodes_.push_back(std::move(n));
    if (nodes_.back().kind == OpKind::leaf) leaves_.push_back(int(nodes_.size()) - 1);
    return int(nodes_.size()) - 1;
  }

  Node& node(int i) { return nodes_[std::size_t(i)]; }
  const Node& node(int i) const { return nodes_[std::size_t(i)]; }
  std::size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor<T>& loss) {
    ensure_live("backward");
    if (!loss.is_scalar())
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    const int root = tracked_node(loss);
    if (root < 0) throw ContractError("backward: loss is not recorded on the active tape");
    consumed_ = true;

    grads_.assign(nodes_.size(), {});
    grads_[std::size_t(root)] = {T(1)};
    for (int i = root; i >= 0; --i) {
      if (grads_[std::size_t(i)].empty()) continue;
      propagate(i);
    }
    for (int id : leaves_) {
      Node& n = nodes_[std::size_t(id)];
      if (n.leaf == nullptr) continue;
      auto& g = grads_[std::size_t(id)];
      if (g.empty()) g.assign(numel(n.shape), T(0));  // unreachable leaf -> zeros
      n.leaf->grad() = g;
    }
  }

  // Gradient buffer of a tensor recorded on this tape (valid after backward).
  const std::vector<T>& grad_of(const Tensor<T>& t) const {
    if (!consumed_) throw StateError("grad_of: backward has not run");
    const int id = tracked_node(t);
    if (id < 0) throw ContractError("grad_of: tensor is not recorded on this tape");
    return grads_[std::size_t(id)];
  }

 private:
  static Tape*& active_slot() {
    static thread_local Tape* p = nullptr;
    return p;
  }

  void ensure_live(const char* what) const {
    if (consumed_)
      throw StateError(std::string("Tape::") + what + ": tape already consumed by backward");
  }

  std::vector<T>& grad_buf(int id) {
    auto& g = grads_[std::size_t(id)];
    if (g.empty()) g.assign(numel(nodes_[std::size_t(id)].shape), T(0));
    return g;
  }

  bool wants(int id) const { return id >= 0 && nodes_[std::size_t(id)].needs_grad; }

  void propagate(int id);

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data())
    if (!std::isfinite(double(v)))
      throw NumericError(std::string(op) + ": non-finite value in result");
}

// Records an op node when a tape is active and any input is tracked.
// Returns the node pointer for the op to attach saved state, or nullptr.
template <typename T>
typename Tape<T>::Node* maybe_record(Tensor<T>& out, OpKind kind, const Tensor<T>* a,
                                     const Tensor<T>* b = nullptr, const Tensor<T>* c = nullptr) {
  Tape<T>* tp = Tape<T>::active();
  if (tp == nullptr) return nullptr;
  const Tensor<T>* ins[3] = {a, b, c};
  int ids[3] = {-1, -1, -1};
  bool any_tracked = false;
  for (int i = 0; i < 3; ++i) {
    if (ins[i] == nullptr) continue;
    ids[i] = tp->tracked_node(*ins[i]);
    any_tracked |= ids[i] >= 0;
  }
  if (!any_tracked) return nullptr;
  for (int i = 0; i < 3; ++i)
    if (ins[i] != nullptr && ids[i] < 0) ids[i] = tp->intern_constant(*ins[i]);

  typename Tape<T>::Node n;
  n.kind = kind;
  n.a = ids[0];
  n.b = ids[1];
  n.c = ids[2];
  n.needs_grad = (ids[0] >= 0 && tp->node(ids[0]).needs_grad) ||
                 (ids[1] >= 0 && tp->node(ids[1]).needs_grad) ||
                 (ids[2] >= 0 && tp->node(ids[2]).needs_grad);
  n.shape = out.shape();
  n.value = out.data();
  const int id = tp->record(std::move(n));
  out.node = id;
  out.tape_tag = tp;
  return &tp->node(id);
}

}  // namespace detail

// ---- primitive ops ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  kernels::active<T>().add(a.ptr(), b.ptr(), out.ptr(), out.size());
  detail::ensure_finite(out, "add");
  detail::maybe_record(out, OpKind::add, &a, &b);
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  kernels::active<T>().sub(a.ptr(), b.ptr(), out.ptr(), out.size());
  detail::ensure_finite(out, "sub");
  detail::maybe_record(out, OpKind::sub, &a, &b);
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  kernels::active<T>().mul(a.ptr(), b.ptr(), out.ptr(), out.size());
  detail::ensure_finite(out, "mul");
  detail::maybe_record(out, OpKind::mul, &a, &b);
  return out;
}

// (m,k) x (k,n) -> (m,n)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw DimensionError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  kernels::active<T>().gemm_nn(m, n, k, a.ptr(), b.ptr(), out.ptr());
  detail::ensure_finite(out, "matmul");
  detail::maybe_record(out, OpKind::matmul, &a, &b);
  return out;
}

// Adds b per row of a 2-d (N,D) input (len(b)=D) or per channel of a 4-d
// NCHW input (len(b)=C).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const auto& xs = x.shape();
  if (b.shape().size() != 1)
    throw DimensionError("add_bias: bias must be rank-1, got " + shape_str(b.shape()));
  Tensor<T> out = x;
  out.node = -1;
  out.tape_tag = nullptr;
  if (xs.size() == 2) {
    if (b.size() != xs[1])
      throw DimensionError("add_bias: bias length " + std::to_string(b.size()) +
                           " vs row width " + std::to_string(xs[1]));
    for (std::size_t i = 0; i < xs[0]; ++i)
      kernels::active<T>().add(out.ptr() + i * xs[1], b.ptr(), out.ptr() + i * xs[1], xs[1]);
  } else if (xs.size() == 4) {
    if (b.size() != xs[1])
      throw DimensionError("add_bias: bias length " + std::to_string(b.size()) + " vs channels " +
                           std::to_string(xs[1]));
    const std::size_t sp = xs[2] * xs[3];
    for (std::size_t n = 0; n < xs[0]; ++n)
      for (std::size_t c = 0; c < xs[1]; ++c) {
        T* p = out.ptr() + (n * xs[1] + c) * sp;
        const T bv = b.data()[c];
        for (std::size_t i = 0; i < sp; ++i) p[i] += bv;
      }
  } else {
    throw DimensionError("add_bias: expects rank-2 or rank-4 input, got " + shape_str(xs));
  }
  detail::ensure_finite(out, "add_bias");
  detail::maybe_record(out, OpKind::add_bias, &x, &b);
  return out;
}

// input (N,Ci,H,W) * kernel (Co,Ci,kh,kw) -> (N,Co,OH,OW)
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw DimensionError("conv2d: expects rank-4 input and kernel, got " + shape_str(xs) +
                         " and " + shape_str(ws));
  if (xs[1] != ws[1])
    throw DimensionError("conv2d: input channels " + std::to_string(xs[1]) +
                         " vs kernel channels " + std::to_string(ws[1]));
  const std::size_t N = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ws[0], kh = ws[2], kw = ws[3];
  const std::size_t oh = detail::conv_out_dim(H, kh, stride, pad, "conv2d");
  const std::size_t ow = detail::conv_out_dim(W, kw, stride, pad, "conv2d");
  const std::size_t S = oh * ow, K = Ci * kh * kw;

  Tensor<T> out({N, Co, oh, ow});
  std::vector<T> col(K * S);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.ptr() + n * Ci * H * W, Ci, H, W, kh, kw, stride, pad, oh, ow, col.data());
    kernels::active<T>().gemm_nn(Co, S, K, w.ptr(), col.data(), out.ptr() + n * Co * S);
  }
  detail::ensure_finite(out, "conv2d");
  if (auto* node = detail::maybe_record(out, OpKind::conv2d, &x, &w)) {
    node->i0 = int(stride);
    node->i1 = int(pad);
  }
  return out;
}

// input (N,Ci,H,W) * kernel (Ci,Co,kh,kw) -> (N,Co,OH,OW), the exact adjoint
// of conv2d with the same stride/padding.
template <typename T>
Tensor<T> conv2d_transposed(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                            std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw DimensionError("conv2d_transposed: expects rank-4 input and kernel, got " +
                         shape_str(xs) + " and " + shape_str(ws));
  if (xs[1] != ws[0])
    throw DimensionError("conv2d_transposed: input channels " + std::to_string(xs[1]) +
                         " vs kernel in-channels " + std::to_string(ws[0]));
  if (stride < 1) throw ContractError("conv2d_transposed: stride must be >= 1");
  const std::size_t N = xs[0], Ci = xs[1], Hi = xs[2], Wi = xs[3];
  const std::size_t Co = ws[1], kh = ws[2], kw = ws[3];
  const std::size_t oh_tmp = (Hi - 1) * stride + kh;
  const std::size_t ow_tmp = (Wi - 1) * stride + kw;
  if (oh_tmp < 2 * pad + 1 || ow_tmp < 2 * pad + 1)
    throw DimensionError("conv2d_transposed: padding too large for output size");
  const std::size_t OH = oh_tmp - 2 * pad, OW = ow_tmp - 2 * pad;
  const std::size_t S_in = Hi * Wi, K = Co * kh * kw;

  Tensor<T> out({N, Co, OH, OW});
  std::vector<T> col(K * S_in);
  for (std::size_t n = 0; n < N; ++n) {
    std::fill(col.begin(), col.end(), T(0));
    kernels::active<T>().gemm_tn(K, S_in, Ci, w.ptr(), x.ptr() + n * Ci * S_in, col.data());
    detail::col2im_acc(col.data(), Co, OH, OW, kh, kw, stride, pad, Hi, Wi,
                       out.ptr() + n * Co * OH * OW);
  }
  detail::ensure_finite(out, "conv2d_transposed");
  if (auto* node = detail::maybe_record(out, OpKind::conv2d_t, &x, &w)) {
    node->i0 = int(stride);
    node->i1 = int(pad);
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  kernels::active<T>().relu(x.ptr(), out.ptr(), out.size());
  detail::maybe_record(out, OpKind::relu, &x);
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out(x.shape());
  kernels::active<T>().leaky_relu(slope, x.ptr(), out.ptr(), out.size());
  detail::ensure_finite(out, "leaky_relu");
  if (auto* node = detail::maybe_record(out, OpKind::leaky_relu, &x)) node->f0 = slope;
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = T(std::tanh(double(in[i])));
  detail::maybe_record(out, OpKind::tanh_act, &x);
  return out;
}

// Output is clamped to the open interval (0,1) so that a following bce_loss
// stays inside its domain even when the logit saturates in float.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  constexpr T eps = detail::sigmoid_eps<T>();
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = T(1.0 / (1.0 + std::exp(-double(in[i]))));
    o[i] = v < eps ? eps : (v > T(1) - eps ? T(1) - eps : v);
  }
  detail::maybe_record(out, OpKind::sigmoid_act, &x);
  return out;
}

// Per-channel batch normalization over (N,C,H,W) or per-feature over (N,D).
// Training mode normalizes with batch statistics and updates `stats`;
// eval mode applies the frozen running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    RunningStats<T>& stats, Mode mode, T eps = T(1e-5), T momentum = T(0.1)) {
  const auto& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4)
    throw DimensionError("batchnorm: expects rank-2 or rank-4 input, got " + shape_str(xs));
  const std::size_t N = xs[0], C = xs[1];
  const std::size_t sp = xs.size() == 4 ? xs[2] * xs[3] : 1;
  if (gamma.size() != C || beta.size() != C || stats.mean.size() != C || stats.var.size() != C)
    throw DimensionError("batchnorm: gamma/beta/stats length must equal channel count " +
                         std::to_string(C));
  const std::size_t m = N * sp;
  if (mode == Mode::train && m < 2)
    throw ContractError("batchnorm: training mode needs more than one value per channel");

  std::vector<T> mean_c(C), invstd_c(C);
  if (mode == Mode::train) {
    std::vector<T> var_c(C, T(0));
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.ptr() + (n * C + c) * sp;
        for (std::size_t i = 0; i < sp; ++i) acc += double(p[i]);
      }
      const double mu = acc / double(m);
      double vacc = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.ptr() + (n * C + c) * sp;
        for (std::size_t i = 0; i < sp; ++i) {
          const double d = double(p[i]) - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / double(m);
      mean_c[c] = T(mu);
      var_c[c] = T(var);
      invstd_c[c] = T(1.0 / std::sqrt(var + double(eps)));
      stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * T(mu);
      stats.var[c] =
          (T(1) - momentum) * stats.var[c] + momentum * T(var * double(m) / double(m - 1));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean_c[c] = stats.mean[c];
      invstd_c[c] = T(1.0 / std::sqrt(double(stats.var[c]) + double(eps)));
    }
  }

  Tensor<T> out(xs);
  std::vector<T> xhat(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.ptr() + (n * C + c) * sp;
      T* xh = xhat.data() + (n * C + c) * sp;
      T* o = out.ptr() + (n * C + c) * sp;
      const T mu = mean_c[c], is = invstd_c[c], g = gamma.data()[c], bb = beta.data()[c];
      for (std::size_t i = 0; i < sp; ++i) {
        xh[i] = (p[i] - mu) * is;
        o[i] = g * xh[i] + bb;
      }
    }
  detail::ensure_finite(out, "batchnorm");
  if (auto* node = detail::maybe_record(out, OpKind::batchnorm, &x, &gamma, &beta)) {
    node->aux = std::move(xhat);
    node->aux.insert(node->aux.end(), invstd_c.begin(), invstd_c.end());
    node->i0 = int(C);
    node->i1 = mode == Mode::eval ? 1 : 0;
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
  Tensor<T> out(std::move(new_shape), x.data());
  detail::maybe_record(out, OpKind::reshape, &x);
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::scalar(kernels::active<T>().sum(x.ptr(), x.size()) / T(x.size()));
  detail::ensure_finite(out, "mean");
  detail::maybe_record(out, OpKind::mean_all, &x);
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::scalar(kernels::active<T>().sum(x.ptr(), x.size()));
  detail::ensure_finite(out, "sum");
  detail::maybe_record(out, OpKind::sum_all, &x);
  return out;
}

// Mean binary cross-entropy; predictions must lie strictly inside (0,1).
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  check_same_shape(pred.shape(), target.shape(), "bce_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = double(pred.data()[i]);
    if (!(p > 0.0 && p < 1.0))
      throw DomainError("bce_loss: prediction " + std::to_string(p) + " outside (0,1)");
    const double t = double(target.data()[i]);
    acc += -t * std::log(p) - (1.0 - t) * std::log1p(-p);
  }
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(pred.size())));
  detail::ensure_finite(out, "bce_loss");
  detail::maybe_record(out, OpKind::bce, &pred, &target);
  return out;
}

// Mean softmax cross-entropy over logits (N,K) with integer labels.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::int32_t>& labels) {
  const auto& ls = logits.shape();
  if (ls.size() != 2)
    throw DimensionError("softmax_cross_entropy: expects rank-2 logits, got " + shape_str(ls));
  const std::size_t N = ls[0], K = ls[1];
  if (labels.size() != N)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(N) + " rows");
  std::vector<T> probs(N * K);
  double acc = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const T* row = logits.ptr() + i * K;
    double mx = double(row[0]);
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, double(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < K; ++j) z += std::exp(double(row[j]) - mx);
    const std::int32_t y = labels[i];
    if (y < 0 || std::size_t(y) >= K)
      throw ContractError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    for (std::size_t j = 0; j < K; ++j) probs[i * K + j] = T(std::exp(double(row[j]) - mx) / z);
    acc += std::log(z) - (double(row[std::size_t(y)]) - mx);
  }
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(N)));
  detail::ensure_finite(out, "softmax_cross_entropy");
  if (auto* node = detail::maybe_record(out, OpKind::softmax_ce, &logits)) {
    node->aux = std::move(probs);
    node->labels = labels;
  }
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tp = Tape<T>::active();
  if (tp == nullptr) throw StateError("backward: no active tape on this thread");
  tp->backward(loss);
}

// ---- backward dispatch ----

template <typename T>
void Tape<T>::propagate(int id) {
  Node& n = nodes_[std::size_t(id)];
  const std::vector<T>& g = grads_[std::size_t(id)];
  const auto& kt = kernels::active<T>();
  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      break;
    case OpKind::add: {
      if (wants(n.a)) kt.axpy(T(1), g.data(), grad_buf(n.a).data(), g.size());
      if (wants(n.b)) kt.axpy(T(1), g.data(), grad_buf(n.b).data(), g.size());
      break;
    }
    case OpKind::sub: {
      if (wants(n.a)) kt.axpy(T(1), g.data(), grad_buf(n.a).data(), g.size());
      if (wants(n.b)) kt.axpy(T(-1), g.data(), grad_buf(n.b).data(), g.size());
      break;
    }
    case OpKind::mul: {
      if (wants(n.a)) kt.mul_acc(g.data(), nodes_[std::size_t(n.b)].value.data(), grad_buf(n.a).data(), g.size());
      if (wants(n.b)) kt.mul_acc(g.data(), nodes_[std::size_t(n.a)].value.data(), grad_buf(n.b).data(), g.size());
      break;
    }
    case OpKind::matmul: {
      const Node& na = nodes_[std::size_t(n.a)];
      const Node& nb = nodes_[std::size_t(n.b)];
      const std::size_t m = na.shape[0], k = na.shape[1], nn = nb.shape[1];
      if (wants(n.a)) kt.gemm_nt(m, k, nn, g.data(), nb.value.data(), grad_buf(n.a).data());
      if (wants(n.b)) kt.gemm_tn(k, nn, m, na.value.data(), g.data(), grad_buf(n.b).data());
      break;
    }
    case OpKind::add_bias: {
      if (wants(n.a)) kt.axpy(T(1), g.data(), grad_buf(n.a).data(), g.size());
      if (wants(n.b)) {
        std::vector<T>& gb = grad_buf(n.b);
        const std::size_t C = nodes_[std::size_t(n.b)].shape[0];
        if (n.shape.size() == 2) {
          for (std::size_t i = 0; i < n.shape[0]; ++i)
            kt.axpy(T(1), g.data() + i * C, gb.data(), C);
        } else {
          const std::size_t sp = n.shape[2] * n.shape[3];
          for (std::size_t s = 0; s < n.shape[0]; ++s)
            for (std::size_t c = 0; c < C; ++c)
              gb[c] += kt.sum(g.data() + (s * C + c) * sp, sp);
        }
      }
      break;
    }
    case OpKind::conv2d: {
      const Node& nx = nodes_[std::size_t(n.a)];
      const Node& nw = nodes_[std::size_t(n.b)];
      const std::size_t N = nx.shape[0], Ci = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
      const std::size_t Co = nw.shape[0], kh = nw.shape[2], kw = nw.shape[3];
      const std::size_t oh = n.shape[2], ow = n.shape[3];
      const std::size_t S = oh * ow, K = Ci * kh * kw;
      const std::size_t s = std::size_t(n.i0), p = std::size_t(n.i1);
      std::vector<T> col(K * S);
      for (std::size_t i = 0; i < N; ++i) {
        const T* gout = g.data() + i * Co * S;
        if (wants(n.b)) {
          detail::im2col(nx.value.data() + i * Ci * H * W, Ci, H, W, kh, kw, s, p, oh, ow, col.data());
          kt.gemm_nt(Co, K, S, gout, col.data(), grad_buf(n.b).data());
        }
        if (wants(n.a)) {
          std::fill(col.begin(), col.end(), T(0));
          kt.gemm_tn(K, S, Co, nw.value.data(), gout, col.data());
          detail::col2im_acc(col.data(), Ci, H, W, kh, kw, s, p, oh, ow,
                             grad_buf(n.a).data() + i * Ci * H * W);
        }
      }
      break;
    }
    case OpKind::conv2d_t: {
      const Node& nx = nodes_[std::size_t(n.a)];
      const Node& nw = nodes_[std::size_t(n.b)];
      const std::size_t N = nx.shape[0], Ci = nx.shape[1], Hi = nx.shape[2], Wi = nx.shape[3];
      const std::size_t Co = nw.shape[1], kh = nw.shape[2], kw = nw.shape[3];
      const std::size_t OH = n.shape[2], OW = n.shape[3];
      const std::size_t S_in = Hi * Wi, K = Co * kh * kw;
      const std::size_t s = std::size_t(n.i0), p = std::size_t(n.i1);
      std::vector<T> col(K * S_in);
      for (std::size_t i = 0; i < N; ++i) {
        detail::im2col(g.data() + i * Co * OH * OW, Co, OH, OW, kh, kw, s, p, Hi, Wi, col.data());
        if (wants(n.a))
          kt.gemm_nn(Ci, S_in, K, nw.value.data(), col.data(),
                     grad_buf(n.a).data() + i * Ci * S_in);
        if (wants(n.b))
          kt.gemm_nt(Ci, K, S_in, nx.value.data() + i * Ci * S_in, col.data(),
                     grad_buf(n.b).data());
      }
      break;
    }
    case OpKind::relu: {
      if (wants(n.a))
        kt.relu_bwd(nodes_[std::size_t(n.a)].value.data(), g.data(), grad_buf(n.a).data(), g.size());
      break;
    }
    case OpKind::leaky_relu: {
      if (wants(n.a))
        kt.leaky_relu_bwd(n.f0, nodes_[std::size_t(n.a)].value.data(), g.data(),
                          grad_buf(n.a).data(), g.size());
      break;
    }
    case OpKind::tanh_act: {
      if (wants(n.a)) {
        std::vector<T>& ga = grad_buf(n.a);
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * (T(1) - n.value[i] * n.value[i]);
      }
      break;
    }
    case OpKind::sigmoid_act: {
      if (wants(n.a)) {
        std::vector<T>& ga = grad_buf(n.a);
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * n.value[i] * (T(1) - n.value[i]);
      }
      break;
    }
    case OpKind::batchnorm: {
      const std::size_t C = std::size_t(n.i0);
      const bool eval_mode = n.i1 == 1;
      const std::size_t N = n.shape[0];
      const std::size_t sp = n.shape.size() == 4 ? n.shape[2] * n.shape[3] : 1;
      const std::size_t m = N * sp;
      const T* xhat = n.aux.data();
      const T* invstd = n.aux.data() + m * C;
      const std::vector<T>& gamma = nodes_[std::size_t(n.b)].value;
      std::vector<T> dbeta(C, T(0)), dgamma(C, T(0));
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
          const T* gp = g.data() + (i * C + c) * sp;
          const T* xh = xhat + (i * C + c) * sp;
          for (std::size_t j = 0; j < sp; ++j) {
            dbeta[c] += gp[j];
            dgamma[c] += gp[j] * xh[j];
          }
        }
      if (wants(n.c)) kt.axpy(T(1), dbeta.data(), grad_buf(n.c).data(), C);
      if (wants(n.b)) kt.axpy(T(1), dgamma.data(), grad_buf(n.b).data(), C);
      if (wants(n.a)) {
        std::vector<T>& gx = grad_buf(n.a);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const T* gp = g.data() + (i * C + c) * sp;
            const T* xh = xhat + (i * C + c) * sp;
            T* gxp = gx.data() + (i * C + c) * sp;
            const T gis = gamma[c] * invstd[c];
            if (eval_mode) {
              for (std::size_t j = 0; j < sp; ++j) gxp[j] += gp[j] * gis;
            } else {
              const T scale = gis / T(m);
              for (std::size_t j = 0; j < sp; ++j)
                gxp[j] += scale * (T(m) * gp[j] - dbeta[c] - xh[j] * dgamma[c]);
            }
          }
      }
      break;
    }
    case OpKind::reshape: {
      if (wants(n.a)) kt.axpy(T(1), g.data(), grad_buf(n.a).data(), g.size());
      break;
    }
    case OpKind::mean_all: {
      if (wants(n.a)) {
        std::vector<T>& ga = grad_buf(n.a);
        const T gv = g[0] / T(ga.size());
        for (T& v : ga) v += gv;
      }
      break;
    }
    case OpKind::sum_all: {
      if (wants(n.a)) {
        std::vector<T>& ga = grad_buf(n.a);
        for (T& v : ga) v += g[0];
      }
      break;
    }
    case OpKind::bce: {
      const std::vector<T>& p = nodes_[std::size_t(n.a)].value;
      const std::vector<T>& t = nodes_[std::size_t(n.b)].value;
      const T gv = g[0] / T(p.size());
      if (wants(n.a)) {
        std::vector<T>& gp = grad_buf(n.a);
        for (std::size_t i = 0; i < p.size(); ++i)
          gp[i] += gv * (-t[i] / p[i] + (T(1) - t[i]) / (T(1) - p[i]));
      }
      if (wants(n.b)) {
        std::vector<T>& gt = grad_buf(n.b);
        for (std::size_t i = 0; i < p.size(); ++i)
          gt[i] += gv * T(std::log((1.0 - double(p[i])) / double(p[i])));
      }
      break;
    }
    case OpKind::softmax_ce: {
      if (wants(n.a)) {
        const std::size_t N = nodes_[std::size_t(n.a)].shape[0];
        const std::size_t K = nodes_[std::size_t(n.a)].shape[1];
        std::vector<T>& gl = grad_buf(n.a);
        const T gv = g[0] / T(N);
        for (std::size_t i = 0; i < N; ++i) {
          const T* pr = n.aux.data() + i * K;
          T* gp = gl.data() + i * K;
          for (std::size_t j = 0; j < K; ++j) gp[j] += gv * pr[j];
          gp[std::size_t(n.labels[i])] -= gv;
        }
      }
      break;
    }
  }
}

}  // namespace ufed
