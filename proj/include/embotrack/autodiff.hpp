#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace embotrack::ad {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

class Tape;

// Lightweight handle into a Tape. Copyable; the tape owns all storage.
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;
  bool requires_grad() const;
  std::int64_t size() const { return numel(shape()); }
  double scalar() const;
  double item(std::int64_t i) const { return value()[i]; }
  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Backward rule: receives the tape and the id of the node it belongs to;
// reads that node's gradient and accumulates into input gradients.
using BackwardFn = std::function<void(Tape&, int)>;

// Reverse-mode tape over dense row-major double tensors. Nodes are recorded
// in topological order (an op can only consume earlier nodes), so backward is
// a single reverse sweep. A tape is single-threaded; independent tapes may
// live on independent threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> value) {
    return make(std::move(shape), std::move(value), true);
  }

  Tensor constant(Shape shape, std::vector<double> value) {
    return make(std::move(shape), std::move(value), false);
  }

  Tensor scalar_constant(double v) { return constant({1}, {v}); }

  Tensor zeros_constant(Shape shape) {
    auto n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }

  // Detached copy: same values, no gradient path.
  Tensor detach(const Tensor& t) {
    auto v = t.value();
    return constant(t.shape(), std::vector<double>(v.begin(), v.end()));
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Accumulates 1 into the loss gradient and sweeps the tape in reverse
  // recording order. Repeated calls без zero_grad accumulate additively.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(loss.shape()));
    }
    if (!nodes_[loss.id()].requires_grad) return;  // nothing reachable
    nodes_[loss.id()].grad[0] += 1.0;
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }

  std::span<const double> value_of(int id) const { return nodes_[id].value; }
  std::span<double> grad_of(int id) { return nodes_[id].grad; }
  const Shape& shape_of(int id) const { return nodes_[id].shape; }
  bool requires_grad_of(int id) const { return nodes_[id].requires_grad; }

  // Records an op output. The closure is kept only if some input needs grad.
  Tensor record(Shape shape, std::vector<double> value,
                std::span<const Tensor> inputs, BackwardFn backward) {
    bool grad = false;
    for (const Tensor& t : inputs) grad = grad || t.requires_grad();
    Tensor out = make(std::move(shape), std::move(value), grad);
    if (grad) nodes_[out.id()].backward = std::move(backward);
    return out;
  }

  Tensor record(Shape shape, std::vector<double> value,
                std::initializer_list<Tensor> inputs, BackwardFn backward) {
    return record(std::move(shape), std::move(value),
                  std::span<const Tensor>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized only when requires_grad
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tensor make(Shape shape, std::vector<double> value, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(value.size())) {
      throw std::invalid_argument("tensor: value size " +
                                  std::to_string(value.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad.assign(n.value.size(), 0.0);
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

inline const Shape& Tensor::shape() const { return tape_->shape_of(id_); }
inline std::span<const double> Tensor::value() const {
  return tape_->value_of(id_);
}
inline std::span<const double> Tensor::grad() const {
  return tape_->grad_of(id_);
}
inline bool Tensor::requires_grad() const {
  return tape_->requires_grad_of(id_);
}
inline double Tensor::scalar() const {
  if (size() != 1) {
    throw std::invalid_argument("scalar: tensor has shape " +
                                shape_str(shape()));
  }
  return value()[0];
}

namespace detail {

inline Tape& same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) +
                                ": operands live on different tapes");
  }
  return *a.tape();
}

// Accumulate src (scaled) into the grad of node `id` if it participates.
inline void add_grad(Tape& t, int id, std::span<const double> src) {
  if (!t.requires_grad_of(id)) return;
  auto g = t.grad_of(id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (shapes must match exactly; the only broadcasting in
// this library is bias_add / channel_bias_add below)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tape& tape = detail::same_tape(a, b, "add");
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  auto va = a.value(), vb = b.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  int ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b},
                     [ia, ib](Tape& t, int self) {
                       auto g = t.grad_of(self);
                       detail::add_grad(t, ia, g);
                       detail::add_grad(t, ib, g);
                     });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& tape = detail::same_tape(a, b, "sub");
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  auto va = a.value(), vb = b.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  int ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b},
                     [ia, ib](Tape& t, int self) {
                       auto g = t.grad_of(self);
                       detail::add_grad(t, ia, g);
                       if (t.requires_grad_of(ib)) {
                         auto gb = t.grad_of(ib);
                         for (std::size_t i = 0; i < gb.size(); ++i)
                           gb[i] -= g[i];
                       }
                     });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& tape = detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  auto va = a.value(), vb = b.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  int ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b},
                     [ia, ib](Tape& t, int self) {
                       auto g = t.grad_of(self);
                       auto va = t.value_of(ia), vb = t.value_of(ib);
                       if (t.requires_grad_of(ia)) {
                         auto ga = t.grad_of(ia);
                         for (std::size_t i = 0; i < ga.size(); ++i)
                           ga[i] += g[i] * vb[i];
                       }
                       if (t.requires_grad_of(ib)) {
                         auto gb = t.grad_of(ib);
                         for (std::size_t i = 0; i < gb.size(); ++i)
                           gb[i] += g[i] * va[i];
                       }
                     });
}

// Elementwise minimum; ties route the gradient to `a`.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  Tape& tape = detail::same_tape(a, b, "minimum");
  if (a.shape() != b.shape()) shape_error("minimum", a.shape(), b.shape());
  auto va = a.value(), vb = b.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(va[i], vb[i]);
  int ia = a.id(), ib = b.id();
  return tape.record(a.shape(), std::move(out), {a, b},
                     [ia, ib](Tape& t, int self) {
                       auto g = t.grad_of(self);
                       auto va = t.value_of(ia), vb = t.value_of(ib);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         int target = va[i] <= vb[i] ? ia : ib;
                         if (t.requires_grad_of(target))
                           t.grad_of(target)[i] += g[i];
                       }
                     });
}

// y = scale * x + offset (scalar coefficients).
inline Tensor affine(const Tensor& x, double scale, double offset) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * vx[i] + offset;
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix, scale](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += scale * g[i];
                     });
}

inline Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }
inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }

inline Tensor relu(const Tensor& x) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, vx[i]);
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto vx = t.value_of(ix);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         if (vx[i] > 0.0) gx[i] += g[i];
                     });
}

inline Tensor tanh(const Tensor& x) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(vx[i]);
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto y = t.value_of(self);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += g[i] * (1.0 - y[i] * y[i]);
                     });
}

inline Tensor sigmoid(const Tensor& x) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-vx[i]));
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto y = t.value_of(self);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += g[i] * y[i] * (1.0 - y[i]);
                     });
}

inline Tensor exp(const Tensor& x) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(vx[i]);
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto y = t.value_of(self);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += g[i] * y[i];
                     });
}

inline Tensor log(const Tensor& x) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(vx[i]);
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto vx = t.value_of(ix);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += g[i] / vx[i];
                     });
}

// Hard clamp; gradient passes только strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  std::vector<double> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp(vx[i], lo, hi);
  int ix = x.id();
  return tape.record(x.shape(), std::move(out), {x},
                     [ix, lo, hi](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto vx = t.value_of(ix);
                       auto gx = t.grad_of(ix);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         if (vx[i] > lo && vx[i] < hi) gx[i] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = detail::same_tape(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    shape_error("matmul", sa, sb);
  const int m = sa[0], k = sa[1], n = sb[1];
  auto va = a.value(), vb = b.value();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = va.data() + static_cast<std::size_t>(i) * k;
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = vb.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  int ia = a.id(), ib = b.id();
  return tape.record(
      {m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, int self) {
        auto g = t.grad_of(self);
        auto va = t.value_of(ia), vb = t.value_of(ib);
        if (t.requires_grad_of(ia)) {
          auto ga = t.grad_of(ia);  // dA = g * B^T : (m,k)
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              const double* grow = g.data() + static_cast<std::size_t>(i) * n;
              const double* brow = vb.data() + static_cast<std::size_t>(p) * n;
              double s = 0.0;
              for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
              ga[static_cast<std::size_t>(i) * k + p] += s;
            }
        }
        if (t.requires_grad_of(ib)) {
          auto gb = t.grad_of(ib);  // dB = A^T * g : (k,n)
          for (int i = 0; i < m; ++i) {
            const double* arow = va.data() + static_cast<std::size_t>(i) * k;
            const double* grow = g.data() + static_cast<std::size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
              const double av = arow[p];
              if (av == 0.0) continue;
              double* gbrow = gb.data() + static_cast<std::size_t>(p) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      });
}

// X (m,n) + row vector b (n), broadcast over rows.
inline Tensor bias_add(const Tensor& x, const Tensor& b) {
  Tape& tape = detail::same_tape(x, b, "bias_add");
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sx.size() != 2 || sb.size() != 1 || sx[1] != sb[0])
    shape_error("bias_add", sx, sb);
  const int m = sx[0], n = sx[1];
  auto vx = x.value(), vb = b.value();
  std::vector<double> out(vx.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          vx[static_cast<std::size_t>(i) * n + j] + vb[j];
  int ix = x.id(), ib = b.id();
  return tape.record(sx, std::move(out), {x, b},
                     [ix, ib, m, n](Tape& t, int self) {
                       auto g = t.grad_of(self);
                       detail::add_grad(t, ix, g);
                       if (t.requires_grad_of(ib)) {
                         auto gb = t.grad_of(ib);
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j)
                             gb[j] += g[static_cast<std::size_t>(i) * n + j];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution (valid padding, square stride, NCHW without batch dim)
// ---------------------------------------------------------------------------

// input (C,H,W), kernel (K,C,kh,kw) -> (K,OH,OW)
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride) {
  Tape& tape = detail::same_tape(input, kernel, "conv2d");
  const Shape& si = input.shape();
  const Shape& sk = kernel.shape();
  if (si.size() != 3 || sk.size() != 4 || si[0] != sk[1])
    shape_error("conv2d", si, sk);
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int C = si[0], H = si[1], W = si[2];
  const int K = sk[0], kh = sk[2], kw = sk[3];
  if (kh > H || kw > W) shape_error("conv2d", si, sk);
  const int OH = (H - kh) / stride + 1;
  const int OW = (W - kw) / stride + 1;
  auto vi = input.value(), vk = kernel.value();
  std::vector<double> out(static_cast<std::size_t>(K) * OH * OW, 0.0);
  for (int k = 0; k < K; ++k) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) {
          const double* kbase =
              vk.data() + ((static_cast<std::size_t>(k) * C + c) * kh) * kw;
          const double* ibase =
              vi.data() + (static_cast<std::size_t>(c) * H + oy * stride) * W +
              ox * stride;
          for (int dy = 0; dy < kh; ++dy) {
            const double* krow = kbase + static_cast<std::size_t>(dy) * kw;
            const double* irow = ibase + static_cast<std::size_t>(dy) * W;
            for (int dx = 0; dx < kw; ++dx) s += krow[dx] * irow[dx];
          }
        }
        out[(static_cast<std::size_t>(k) * OH + oy) * OW + ox] = s;
      }
    }
  }
  int ii = input.id(), ik = kernel.id();
  return tape.record(
      {K, OH, OW}, std::move(out), {input, kernel},
      [ii, ik, C, H, W, K, kh, kw, OH, OW, stride](Tape& t, int self) {
        auto g = t.grad_of(self);
        auto vi = t.value_of(ii);
        auto vk = t.value_of(ik);
        const bool gi = t.requires_grad_of(ii);
        const bool gk = t.requires_grad_of(ik);
        for (int k = 0; k < K; ++k) {
          for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
              const double go =
                  g[(static_cast<std::size_t>(k) * OH + oy) * OW + ox];
              if (go == 0.0) continue;
              for (int c = 0; c < C; ++c) {
                const std::size_t kbase =
                    ((static_cast<std::size_t>(k) * C + c) * kh) * kw;
                const std::size_t ibase =
                    (static_cast<std::size_t>(c) * H + oy * stride) * W +
                    ox * stride;
                for (int dy = 0; dy < kh; ++dy) {
                  for (int dx = 0; dx < kw; ++dx) {
                    const std::size_t kidx =
                        kbase + static_cast<std::size_t>(dy) * kw + dx;
                    const std::size_t iidx =
                        ibase + static_cast<std::size_t>(dy) * W + dx;
                    if (gi) t.grad_of(ii)[iidx] += go * vk[kidx];
                    if (gk) t.grad_of(ik)[kidx] += go * vi[iidx];
                  }
                }
              }
            }
          }
        }
      });
}

// X (K,H,W) + per-channel bias (K).
inline Tensor channel_bias_add(const Tensor& x, const Tensor& b) {
  Tape& tape = detail::same_tape(x, b, "channel_bias_add");
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sx.size() != 3 || sb.size() != 1 || sx[0] != sb[0])
    shape_error("channel_bias_add", sx, sb);
  const int K = sx[0];
  const std::size_t plane = static_cast<std::size_t>(sx[1]) * sx[2];
  auto vx = x.value(), vb = b.value();
  std::vector<double> out(vx.size());
  for (int k = 0; k < K; ++k)
    for (std::size_t i = 0; i < plane; ++i)
      out[k * plane + i] = vx[k * plane + i] + vb[k];
  int ix = x.id(), ib = b.id();
  return tape.record(sx, std::move(out), {x, b},
                     [ix, ib, K, plane](Tape& t, int self) {
                       auto g = t.grad_of(self);
                       detail::add_grad(t, ix, g);
                       if (t.requires_grad_of(ib)) {
                         auto gb = t.grad_of(ib);
                         for (int k = 0; k < K; ++k) {
                           double s = 0.0;
                           for (std::size_t i = 0; i < plane; ++i)
                             s += g[k * plane + i];
                           gb[k] += s;
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  Tape& tape = *x.tape();
  if (numel(new_shape) != x.size()) shape_error("reshape", x.shape(), new_shape);
  auto vx = x.value();
  int ix = x.id();
  return tape.record(std::move(new_shape),
                     std::vector<double>(vx.begin(), vx.end()), {x},
                     [ix](Tape& t, int self) {
                       detail::add_grad(t, ix, t.grad_of(self));
                     });
}

// Concatenate same-rank tensors along `axis`; all other dims must agree.
inline Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape& tape = *parts[0].tape();
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& sp = p.shape();
    if (static_cast<int>(sp.size()) != rank) shape_error("concat", s0, sp);
    for (int d = 0; d < rank; ++d)
      if (d != axis && sp[d] != s0[d]) shape_error("concat", s0, sp);
    out_shape[axis] += sp[axis];
  }
  // outer = product of dims before axis, inner = product after.
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < rank; ++d) inner *= s0[d];

  std::vector<double> out(numel(out_shape));
  const std::int64_t out_axis = out_shape[axis];
  std::int64_t offset = 0;
  std::vector<int> ids;
  std::vector<std::int64_t> axis_sizes, offsets;
  for (const Tensor& p : parts) {
    const std::int64_t pa = p.shape()[axis];
    auto vp = p.value();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(vp.begin() + o * pa * inner, vp.begin() + (o + 1) * pa * inner,
                out.begin() + (o * out_axis + offset) * inner);
    }
    ids.push_back(p.id());
    axis_sizes.push_back(pa);
    offsets.push_back(offset);
    offset += pa;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return tape.record(
      out_shape, std::move(out), inputs,
      [ids, axis_sizes, offsets, outer, inner, out_axis](Tape& t, int self) {
        auto g = t.grad_of(self);
        for (std::size_t pi = 0; pi < ids.size(); ++pi) {
          if (!t.requires_grad_of(ids[pi])) continue;
          auto gp = t.grad_of(ids[pi]);
          const std::int64_t pa = axis_sizes[pi];
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src =
                g.data() + (o * out_axis + offsets[pi]) * inner;
            double* dst = gp.data() + o * pa * inner;
            for (std::int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

// Repeat every row of X (m,n) `times` consecutive times -> (m*times, n).
// A 1-D input (n) is treated as a single row.
inline Tensor repeat_rows(const Tensor& x, int times) {
  Tape& tape = *x.tape();
  const Shape& sx = x.shape();
  int m = 1, n = 0;
  if (sx.size() == 1) {
    n = sx[0];
  } else if (sx.size() == 2) {
    m = sx[0];
    n = sx[1];
  } else {
    throw std::invalid_argument("repeat_rows: rank must be 1 or 2, got " +
                                shape_str(sx));
  }
  if (times < 1) throw std::invalid_argument("repeat_rows: times must be >= 1");
  auto vx = x.value();
  std::vector<double> out(static_cast<std::size_t>(m) * times * n);
  for (int i = 0; i < m; ++i)
    for (int r = 0; r < times; ++r)
      std::copy(vx.begin() + static_cast<std::size_t>(i) * n,
                vx.begin() + static_cast<std::size_t>(i + 1) * n,
                out.begin() + (static_cast<std::size_t>(i) * times + r) * n);
  int ix = x.id();
  return tape.record({m * times, n}, std::move(out), {x},
                     [ix, m, n, times](Tape& t, int self) {
                       if (!t.requires_grad_of(ix)) return;
                       auto g = t.grad_of(self);
                       auto gx = t.grad_of(ix);
                       for (int i = 0; i < m; ++i)
                         for (int r = 0; r < times; ++r)
                           for (int j = 0; j < n; ++j)
                             gx[static_cast<std::size_t>(i) * n + j] +=
                                 g[(static_cast<std::size_t>(i) * times + r) *
                                       n +
                                   j];
                     });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
  Tape& tape = *x.tape();
  auto vx = x.value();
  double s = 0.0;
  for (double v : vx) s += v;
  int ix = x.id();
  return tape.record({1}, {s}, {x}, [ix](Tape& t, int self) {
    if (!t.requires_grad_of(ix)) return;
    const double g = t.grad_of(self)[0];
    auto gx = t.grad_of(ix);
    for (double& v : gx) v += g;
  });
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// Sum a 2-D tensor over one axis: axis=0 -> (n), axis=1 -> (m).
inline Tensor sum_axis(const Tensor& x, int axis) {
  Tape& tape = *x.tape();
  const Shape& sx = x.shape();
  if (sx.size() != 2 || (axis != 0 && axis != 1))
    throw std::invalid_argument("sum_axis: need 2-D tensor and axis in {0,1}, got " +
                                shape_str(sx) + " axis " + std::to_string(axis));
  const int m = sx[0], n = sx[1];
  auto vx = x.value();
  int ix = x.id();
  if (axis == 0) {
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out[j] += vx[static_cast<std::size_t>(i) * n + j];
    return tape.record({n}, std::move(out), {x}, [ix, m, n](Tape& t, int self) {
      if (!t.requires_grad_of(ix)) return;
      auto g = t.grad_of(self);
      auto gx = t.grad_of(ix);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          gx[static_cast<std::size_t>(i) * n + j] += g[j];
    });
  }
  std::vector<double> out(m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[i] += vx[static_cast<std::size_t>(i) * n + j];
  return tape.record({m}, std::move(out), {x}, [ix, m, n](Tape& t, int self) {
    if (!t.requires_grad_of(ix)) return;
    auto g = t.grad_of(self);
    auto gx = t.grad_of(ix);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(i) * n + j] += g[i];
  });
}

// Row-wise log(sum(exp(x))) of a 2-D tensor -> (m). Max-shifted for
// stability; backward is the row softmax.
inline Tensor logsumexp_rows(const Tensor& x) {
  Tape& tape = *x.tape();
  const Shape& sx = x.shape();
  if (sx.size() != 2)
    throw std::invalid_argument("logsumexp_rows: need 2-D tensor, got " +
                                shape_str(sx));
  const int m = sx[0], n = sx[1];
  auto vx = x.value();
  std::vector<double> out(m);
  for (int i = 0; i < m; ++i) {
    const double* row = vx.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    out[i] = mx + std::log(s);
  }
  int ix = x.id();
  return tape.record({m}, std::move(out), {x}, [ix, m, n](Tape& t, int self) {
    if (!t.requires_grad_of(ix)) return;
    auto g = t.grad_of(self);
    auto y = t.value_of(self);
    auto vx = t.value_of(ix);
    auto gx = t.grad_of(ix);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(i) * n + j] +=
            g[i] * std::exp(vx[static_cast<std::size_t>(i) * n + j] - y[i]);
  });
}

inline Tensor logsumexp(const Tensor& v) {
  if (v.shape().size() == 1)
    return reshape(logsumexp_rows(reshape(v, {1, v.shape()[0]})), {1});
  return logsumexp_rows(v);
}

// Euclidean norm of a vector -> scalar.
inline Tensor l2_norm(const Tensor& v) {
  Tape& tape = *v.tape();
  auto vv = v.value();
  double s = 0.0;
  for (double x : vv) s += x * x;
  const double norm = std::sqrt(s);
  int iv = v.id();
  return tape.record({1}, {norm}, {v}, [iv](Tape& t, int self) {
    if (!t.requires_grad_of(iv)) return;
    const double g = t.grad_of(self)[0];
    const double norm = std::max(t.value_of(self)[0], 1e-12);
    auto vv = t.value_of(iv);
    auto gv = t.grad_of(iv);
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g * vv[i] / norm;
  });
}

// Cosine similarity of two equal-length vectors -> scalar. If either norm is
// below eps the result is a hard 0 with no gradient path (degenerate inputs
// must not blow up training).
inline Tensor cosine_similarity(const Tensor& u, const Tensor& v,
                                double eps = 1e-8) {
  Tape& tape = detail::same_tape(u, v, "cosine_similarity");
  if (u.shape() != v.shape() || u.shape().size() != 1)
    shape_error("cosine_similarity", u.shape(), v.shape());
  auto vu = u.value(), vv = v.value();
  double dot = 0.0, su = 0.0, sv = 0.0;
  for (std::size_t i = 0; i < vu.size(); ++i) {
    dot += vu[i] * vv[i];
    su += vu[i] * vu[i];
    sv += vv[i] * vv[i];
  }
  const double nu = std::sqrt(su), nv = std::sqrt(sv);
  if (nu < eps || nv < eps) return tape.scalar_constant(0.0);
  const double c = dot / (nu * nv);
  int iu = u.id(), iv = v.id();
  return tape.record({1}, {c}, {u, v}, [iu, iv, nu, nv, c](Tape& t, int self) {
    const double g = t.grad_of(self)[0];
    auto vu = t.value_of(iu), vv = t.value_of(iv);
    if (t.requires_grad_of(iu)) {
      auto gu = t.grad_of(iu);
      for (std::size_t i = 0; i < gu.size(); ++i)
        gu[i] += g * (vv[i] / (nu * nv) - c * vu[i] / (nu * nu));
    }
    if (t.requires_grad_of(iv)) {
      auto gv = t.grad_of(iv);
      for (std::size_t i = 0; i < gv.size(); ++i)
        gv[i] += g * (vu[i] / (nu * nv) - c * vv[i] / (nv * nv));
    }
  });
}

// Mean squared error between same-shape tensors -> scalar.
inline Tensor squared_error(const Tensor& a, const Tensor& b) {
  Tape& tape = detail::same_tape(a, b, "squared_error");
  if (a.shape() != b.shape()) shape_error("squared_error", a.shape(), b.shape());
  auto va = a.value(), vb = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    const double d = va[i] - vb[i];
    s += d * d;
  }
  const double n = static_cast<double>(va.size());
  int ia = a.id(), ib = b.id();
  return tape.record({1}, {s / n}, {a, b}, [ia, ib, n](Tape& t, int self) {
    const double g = t.grad_of(self)[0];
    auto va = t.value_of(ia), vb = t.value_of(ib);
    if (t.requires_grad_of(ia)) {
      auto ga = t.grad_of(ia);
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += g * 2.0 * (va[i] - vb[i]) / n;
    }
    if (t.requires_grad_of(ib)) {
      auto gb = t.grad_of(ib);
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] -= g * 2.0 * (va[i] - vb[i]) / n;
    }
  });
}

inline Tensor dot(const Tensor& u, const Tensor& v) {
  return sum_all(mul(u, v));
}

// Stack scalar tensors into a vector (used to average per-step losses).
inline Tensor stack_scalars(std::span<const Tensor> xs) {
  std::vector<Tensor> rows;
  rows.reserve(xs.size());
  for (const Tensor& x : xs) {
    if (x.size() != 1)
      throw std::invalid_argument("stack_scalars: non-scalar input " +
                                  shape_str(x.shape()));
    rows.push_back(x);
  }
  return concat(std::span<const Tensor>(rows.data(), rows.size()), 0);
}

}  // namespace embotrack::ad
