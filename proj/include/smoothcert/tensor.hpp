#ifndef SMOOTHCERT_TENSOR_HPP
#define SMOOTHCERT_TENSOR_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "smoothcert/errors.hpp"

namespace smoothcert {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
class Recording;

namespace detail {

template <class S>
struct Node {
  Mat<S> value;
  Mat<S> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::uint64_t grad_run = 0;  // backward pass that last wrote grad
  std::uint64_t tape_id = 0;   // 0: leaf or inference result
  std::function<void(Node&)> backprop;
  std::vector<std::shared_ptr<Node>> parents;
};

// Accumulates g into the node's gradient. A fresh backward pass may not add
// onto a gradient left over from an earlier one; that would silently sum two
// unrelated gradients, so it is rejected.
template <class S, class D>
void deposit(Node<S>* n, const Eigen::MatrixBase<D>& g, std::uint64_t run) {
  if (!n->requires_grad) return;
  if (n->grad_run != run) {
    if (n->has_grad)
      throw ContractError(
          "backward: leaf already holds a gradient from a previous pass; "
          "call zero_grad first");
    n->grad.setZero(n->value.rows(), n->value.cols());
    n->grad_run = run;
    n->has_grad = true;
  }
  n->grad.noalias() += g;
}

}  // namespace detail

/// Handle to a value (and, while a Recording is active, a tape node).
/// Copying a Tensor aliases the underlying node.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Mat<S> value, bool requires_grad = true) {
    Tensor t;
    t.n_ = std::make_shared<detail::Node<S>>();
    t.n_->value = std::move(value);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor constant(Mat<S> value) { return leaf(std::move(value), false); }

  static Tensor zeros(Eigen::Index rows, Eigen::Index cols, bool requires_grad = true) {
    return leaf(Mat<S>::Zero(rows, cols), requires_grad);
  }

  bool valid() const { return n_ != nullptr; }
  Eigen::Index rows() const { return node().value.rows(); }
  Eigen::Index cols() const { return node().value.cols(); }

  Mat<S>& value() { return node().value; }
  const Mat<S>& value() const { return node().value; }

  /// Gradient deposited by the most recent backward. Empty if none.
  const Mat<S>& grad() const { return node().grad; }
  bool has_grad() const { return node().has_grad; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool rg) { node().requires_grad = rg; }

  void zero_grad() {
    auto& n = node();
    n.grad.resize(0, 0);
    n.has_grad = false;
    n.grad_run = 0;
  }

  S scalar() const {
    const auto& n = node();
    if (n.value.size() != 1) throw ContractError("scalar: tensor is not 1x1");
    return n.value(0, 0);
  }

  detail::Node<S>* raw() const { return n_.get(); }
  const std::shared_ptr<detail::Node<S>>& shared() const {
    if (!n_) throw ContractError("operation on an empty tensor");
    return n_;
  }

 private:
  detail::Node<S>& node() const {
    if (!n_) throw ContractError("operation on an empty tensor");
    return *n_;
  }

  std::shared_ptr<detail::Node<S>> n_;

  template <class T2>
  friend class Recording;
};

/// RAII tape. While alive, free-function ops on this thread record backward
/// closures; backward(loss) replays them in reverse. One backward per
/// Recording; recordings do not nest.
template <class S>
class Recording {
 public:
  Recording() : id_(next_id().fetch_add(1, std::memory_order_relaxed)) {
    if (active_) throw ContractError("Recording: recordings do not nest");
    active_ = this;
  }
  ~Recording() { active_ = nullptr; }
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

  static Recording* active() { return active_; }
  std::uint64_t id() const { return id_; }

  void append(std::shared_ptr<detail::Node<S>> n) { tape_.push_back(std::move(n)); }

  /// Runs reverse-mode accumulation from a recorded scalar. Leaf gradients
  /// are left on the leaves; intermediate gradients are released.
  void backward(const Tensor<S>& loss) {
    auto* ln = loss.raw();
    if (!ln || ln->tape_id != id_)
      throw ContractError("backward: loss was not recorded on this tape");
    if (used_) throw ContractError("backward: this recording was already consumed");
    if (ln->value.size() != 1)
      throw ContractError("backward: loss must be a 1x1 tensor");
    used_ = true;
    const std::uint64_t run = next_run().fetch_add(1, std::memory_order_relaxed);
    ln->grad = Mat<S>::Ones(1, 1);
    ln->grad_run = run;
    ln->has_grad = true;
    run_ = run;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      auto& n = **it;
      if (n.has_grad && n.requires_grad && n.backprop) n.backprop(n);
      n.grad.resize(0, 0);
      n.has_grad = false;
    }
  }

  /// Marker of the backward pass driven by this recording (used by deposit).
  std::uint64_t run() const { return run_; }

  static std::atomic<std::uint64_t>& next_id() {
    static std::atomic<std::uint64_t> v{1};
    return v;
  }
  static std::atomic<std::uint64_t>& next_run() {
    static std::atomic<std::uint64_t> v{1};
    return v;
  }

 private:
  std::vector<std::shared_ptr<detail::Node<S>>> tape_;
  std::uint64_t id_;
  std::uint64_t run_ = 0;
  bool used_ = false;
  static inline thread_local Recording* active_ = nullptr;
};

namespace detail {

template <class S>
void check_usable(const Tensor<S>& t) {
  auto* n = t.raw();
  if (!n) throw ContractError("operation on an empty tensor");
  if (n->tape_id != 0) {
    auto* rec = Recording<S>::active();
    if (!rec || n->tape_id != rec->id())
      throw ContractError("tensor belongs to a recording that is not active");
  }
}

/// Builds the result node for an op. Records it only when a Recording is
/// active and some parent participates in the gradient.
template <class S, class Backprop>
Tensor<S> make_op(Mat<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
                  Backprop&& backprop) {
  auto out = Tensor<S>::leaf(std::move(value), false);
  auto* rec = Recording<S>::active();
  if (!rec) return out;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto* n = out.raw();
  n->tape_id = rec->id();
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::forward<Backprop>(backprop);
  }
  rec->append(out.shared());
  return out;
}

template <class S>
std::uint64_t current_run() {
  auto* rec = Recording<S>::active();
  return rec ? rec->run() : 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_usable(a);
  detail::check_usable(b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree (" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + ")");
  Mat<S> v = a.value() * b.value();
  auto *an = a.raw(), *bn = b.raw();
  return detail::make_op<S>(
      std::move(v), {a.shared(), b.shared()}, [an, bn](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (an->requires_grad) detail::deposit(an, self.grad * bn->value.transpose(), run);
        if (bn->requires_grad) detail::deposit(bn, an->value.transpose() * self.grad, run);
      });
}

/// add(a, b): same shape, or broadcast when one side is a single row whose
/// width matches the other.
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_usable(a);
  detail::check_usable(b);
  const bool same = a.rows() == b.rows() && a.cols() == b.cols();
  const bool b_row = b.rows() == 1 && b.cols() == a.cols();
  const bool a_row = a.rows() == 1 && a.cols() == b.cols();
  if (!same && !b_row && !a_row)
    throw ShapeError("add: shapes are not compatible");
  if (!same && a_row) return add(b, a);

  Mat<S> v = same ? Mat<S>(a.value() + b.value())
                  : Mat<S>(a.value().rowwise() + b.value().row(0));
  auto *an = a.raw(), *bn = b.raw();
  return detail::make_op<S>(
      std::move(v), {a.shared(), b.shared()}, [an, bn, same](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (an->requires_grad) detail::deposit(an, self.grad, run);
        if (bn->requires_grad) {
          if (same)
            detail::deposit(bn, self.grad, run);
          else
            detail::deposit(bn, self.grad.colwise().sum(), run);
        }
      });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_usable(a);
  detail::check_usable(b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub: shapes disagree");
  Mat<S> v = a.value() - b.value();
  auto *an = a.raw(), *bn = b.raw();
  return detail::make_op<S>(
      std::move(v), {a.shared(), b.shared()}, [an, bn](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (an->requires_grad) detail::deposit(an, self.grad, run);
        if (bn->requires_grad) detail::deposit(bn, -self.grad, run);
      });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_usable(a);
  detail::check_usable(b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul: shapes disagree");
  Mat<S> v = a.value().cwiseProduct(b.value());
  auto *an = a.raw(), *bn = b.raw();
  return detail::make_op<S>(
      std::move(v), {a.shared(), b.shared()}, [an, bn](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (an->requires_grad) detail::deposit(an, self.grad.cwiseProduct(bn->value), run);
        if (bn->requires_grad) detail::deposit(bn, self.grad.cwiseProduct(an->value), run);
      });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, S c) {
  detail::check_usable(a);
  Mat<S> v = a.value() * c;
  auto* an = a.raw();
  return detail::make_op<S>(std::move(v), {a.shared()}, [an, c](detail::Node<S>& self) {
    detail::deposit(an, (self.grad * c).eval(), detail::current_run<S>());
  });
}

template <class S>
Tensor<S> transposed(const Tensor<S>& x) {
  detail::check_usable(x);
  Mat<S> v = x.value().transpose();
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(v), {x.shared()}, [xn](detail::Node<S>& self) {
    detail::deposit(xn, self.grad.transpose(), detail::current_run<S>());
  });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  detail::check_usable(x);
  Mat<S> v = x.value().cwiseMax(S(0));
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(v), {x.shared()}, [xn](detail::Node<S>& self) {
    Mat<S> mask = (xn->value.array() > S(0)).template cast<S>();
    detail::deposit(xn, self.grad.cwiseProduct(mask), detail::current_run<S>());
  });
}

template <class S>
Tensor<S> tanh_map(const Tensor<S>& x) {
  detail::check_usable(x);
  Mat<S> v = x.value().array().tanh().matrix();
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(v), {x.shared()}, [xn](detail::Node<S>& self) {
    detail::deposit(xn,
                    (self.grad.array() * (S(1) - self.value.array().square())).matrix(),
                    detail::current_run<S>());
  });
}

/// Gaussian error linear unit, tanh approximation.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  detail::check_usable(x);
  const S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S c3 = static_cast<S>(0.044715);
  Mat<S> t = (k * (x.value().array() + c3 * x.value().array().cube())).tanh().matrix();
  Mat<S> v = (S(0.5) * x.value().array() * (S(1) + t.array())).matrix();
  auto* xn = x.raw();
  return detail::make_op<S>(
      std::move(v), {x.shared()}, [xn, k, c3, t = std::move(t)](detail::Node<S>& self) {
        const auto xa = xn->value.array();
        const auto ta = t.array();
        Mat<S> dydx = (S(0.5) * (S(1) + ta) +
                       S(0.5) * xa * (S(1) - ta.square()) * k * (S(1) + S(3) * c3 * xa.square()))
                          .matrix();
        detail::deposit(xn, self.grad.cwiseProduct(dydx), detail::current_run<S>());
      });
}

/// Row-wise softmax.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  detail::check_usable(x);
  Mat<S> y = x.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    auto row = y.row(i).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(y), {x.shared()}, [xn](detail::Node<S>& self) {
    Mat<S> dx = self.grad.cwiseProduct(self.value);
    Eigen::Matrix<S, Eigen::Dynamic, 1> rs = dx.rowwise().sum();
    dx.noalias() -= rs.asDiagonal() * self.value;
    detail::deposit(xn, dx, detail::current_run<S>());
  });
}

/// Row-wise layer normalization followed by a learned scale and shift.
/// gamma and beta are [1 x d].
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = static_cast<S>(1e-5)) {
  detail::check_usable(x);
  detail::check_usable(gamma);
  detail::check_usable(beta);
  const Eigen::Index d = x.cols();
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != d || beta.cols() != d)
    throw ShapeError("layer_norm: gamma and beta must be [1 x cols(x)]");

  Mat<S> xhat(x.rows(), d);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto row = x.value().row(i).array();
    const S mu = row.mean();
    const S var = (row - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = ((row - mu) * is).matrix();
  }
  Mat<S> v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
             beta.value().row(0).array();
  auto *xn = x.raw(), *gn = gamma.raw(), *bn = beta.raw();
  return detail::make_op<S>(
      std::move(v), {x.shared(), gamma.shared(), beta.shared()},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std),
       d](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (bn->requires_grad) detail::deposit(bn, self.grad.colwise().sum(), run);
        if (gn->requires_grad)
          detail::deposit(gn, self.grad.cwiseProduct(xhat).colwise().sum(), run);
        if (xn->requires_grad) {
          Mat<S> dxhat = (self.grad.array().rowwise() * gn->value.row(0).array()).matrix();
          Eigen::Matrix<S, Eigen::Dynamic, 1> s1 = dxhat.rowwise().sum();
          Eigen::Matrix<S, Eigen::Dynamic, 1> s2 =
              dxhat.cwiseProduct(xhat).rowwise().sum();
          Mat<S> dx = S(d) * dxhat;
          dx.colwise() -= s1;
          dx -= (xhat.array().colwise() * s2.array()).matrix();
          Eigen::Array<S, Eigen::Dynamic, 1> row_scale = inv_std.array() / S(d);
          dx.array().colwise() *= row_scale;
          detail::deposit(xn, dx, run);
        }
      });
}

/// Mean softmax cross-entropy over rows of logits. labels[i] is the class
/// index of row i. Returns a 1x1 tensor.
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  detail::check_usable(logits);
  const Eigen::Index n = logits.rows(), c = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: one label per row required");
  for (int y : labels)
    if (y < 0 || y >= c) throw ContractError("softmax_cross_entropy: label out of range");

  Mat<S> probs = logits.value();
  S loss = S(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = probs.row(i).array();
    const S m = row.maxCoeff();
    row -= m;
    const S lse = std::log(row.exp().sum());
    loss += lse - row(labels[static_cast<std::size_t>(i)]);
    row = (row - lse).exp();
  }
  Mat<S> v(1, 1);
  v(0, 0) = loss / S(n);
  auto* ln = logits.raw();
  return detail::make_op<S>(
      std::move(v), {logits.shared()},
      [ln, labels, probs = std::move(probs), n](detail::Node<S>& self) {
        Mat<S> dl = probs;
        for (Eigen::Index i = 0; i < n; ++i)
          dl(i, labels[static_cast<std::size_t>(i)]) -= S(1);
        dl *= self.grad(0, 0) / S(n);
        detail::deposit(ln, dl, detail::current_run<S>());
      });
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  detail::check_usable(x);
  Mat<S> v(1, 1);
  v(0, 0) = x.value().sum();
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(v), {x.shared()}, [xn](detail::Node<S>& self) {
    detail::deposit(
        xn, (Mat<S>::Ones(xn->value.rows(), xn->value.cols()) * self.grad(0, 0)).eval(),
        detail::current_run<S>());
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  detail::check_usable(x);
  const S inv = S(1) / static_cast<S>(x.value().size());
  return mul(sum(x), inv);
}

// ---------------------------------------------------------------------------
// Slicing and concatenation
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, Eigen::Index begin, Eigen::Index len) {
  detail::check_usable(x);
  if (begin < 0 || len < 0 || begin + len > x.rows())
    throw ShapeError("slice_rows: range out of bounds");
  Mat<S> v = x.value().middleRows(begin, len);
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(v), {x.shared()},
                            [xn, begin, len](detail::Node<S>& self) {
                              Mat<S> dx = Mat<S>::Zero(xn->value.rows(), xn->value.cols());
                              dx.middleRows(begin, len) = self.grad;
                              detail::deposit(xn, dx, detail::current_run<S>());
                            });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, Eigen::Index begin, Eigen::Index len) {
  detail::check_usable(x);
  if (begin < 0 || len < 0 || begin + len > x.cols())
    throw ShapeError("slice_cols: range out of bounds");
  Mat<S> v = x.value().middleCols(begin, len);
  auto* xn = x.raw();
  return detail::make_op<S>(std::move(v), {x.shared()},
                            [xn, begin, len](detail::Node<S>& self) {
                              Mat<S> dx = Mat<S>::Zero(xn->value.rows(), xn->value.cols());
                              dx.middleCols(begin, len) = self.grad;
                              detail::deposit(xn, dx, detail::current_run<S>());
                            });
}

template <class S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_usable(a);
  detail::check_usable(b);
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: widths disagree");
  Mat<S> v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value();
  v.bottomRows(b.rows()) = b.value();
  auto *an = a.raw(), *bn = b.raw();
  const Eigen::Index ar = a.rows(), br = b.rows();
  return detail::make_op<S>(std::move(v), {a.shared(), b.shared()},
                            [an, bn, ar, br](detail::Node<S>& self) {
                              const auto run = detail::current_run<S>();
                              if (an->requires_grad)
                                detail::deposit(an, self.grad.topRows(ar), run);
                              if (bn->requires_grad)
                                detail::deposit(bn, self.grad.bottomRows(br), run);
                            });
}

template <class S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_usable(a);
  detail::check_usable(b);
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: heights disagree");
  Mat<S> v(a.rows(), a.cols() + b.cols());
  v.leftCols(a.cols()) = a.value();
  v.rightCols(b.cols()) = b.value();
  auto *an = a.raw(), *bn = b.raw();
  const Eigen::Index ac = a.cols(), bc = b.cols();
  return detail::make_op<S>(std::move(v), {a.shared(), b.shared()},
                            [an, bn, ac, bc](detail::Node<S>& self) {
                              const auto run = detail::current_run<S>();
                              if (an->requires_grad)
                                detail::deposit(an, self.grad.leftCols(ac), run);
                              if (bn->requires_grad)
                                detail::deposit(bn, self.grad.rightCols(bc), run);
                            });
}

// ---------------------------------------------------------------------------
// Fused transformer ops
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention over a batch of token blocks.
/// q, k, v are [batch*tokens x d]; heads must divide d. Softmax matrices are
/// kept for the backward pass.
template <class S>
Tensor<S> attention_heads(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                          Eigen::Index batch, Eigen::Index heads) {
  detail::check_usable(q);
  detail::check_usable(k);
  detail::check_usable(v);
  const Eigen::Index rows = q.rows(), d = q.cols();
  if (k.rows() != rows || v.rows() != rows || k.cols() != d || v.cols() != d)
    throw ShapeError("attention_heads: q, k, v must share one shape");
  if (batch <= 0 || rows % batch != 0)
    throw ShapeError("attention_heads: rows must be a multiple of batch");
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("attention_heads: heads must divide the model width");
  const Eigen::Index t = rows / batch, dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  Mat<S> out(rows, d);
  std::vector<Mat<S>> attn(static_cast<std::size_t>(batch * heads));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * t, h * dh, t, dh);
      const auto kb = k.value().block(b * t, h * dh, t, dh);
      const auto vb = v.value().block(b * t, h * dh, t, dh);
      Mat<S> sc = qb * kb.transpose() * scale;
      for (Eigen::Index i = 0; i < t; ++i) {
        auto row = sc.row(i).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
      }
      out.block(b * t, h * dh, t, dh).noalias() = sc * vb;
      attn[static_cast<std::size_t>(b * heads + h)] = std::move(sc);
    }
  }
  auto *qn = q.raw(), *kn = k.raw(), *vn = v.raw();
  return detail::make_op<S>(
      std::move(out), {q.shared(), k.shared(), v.shared()},
      [qn, kn, vn, attn = std::move(attn), batch, heads, t, dh,
       scale](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        Mat<S> dq = Mat<S>::Zero(qn->value.rows(), qn->value.cols());
        Mat<S> dk = dq, dv = dq;
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Mat<S>& a = attn[static_cast<std::size_t>(b * heads + h)];
            const auto qb = qn->value.block(b * t, h * dh, t, dh);
            const auto kb = kn->value.block(b * t, h * dh, t, dh);
            const auto vb = vn->value.block(b * t, h * dh, t, dh);
            const auto go = self.grad.block(b * t, h * dh, t, dh);
            dv.block(b * t, h * dh, t, dh).noalias() += a.transpose() * go;
            Mat<S> da = go * vb.transpose();
            Mat<S> ds = a.cwiseProduct(da);
            Eigen::Matrix<S, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
            ds.noalias() -= rs.asDiagonal() * a;
            ds *= scale;
            dq.block(b * t, h * dh, t, dh).noalias() += ds * kb;
            dk.block(b * t, h * dh, t, dh).noalias() += ds.transpose() * qb;
          }
        }
        if (qn->requires_grad) detail::deposit(qn, dq, run);
        if (kn->requires_grad) detail::deposit(kn, dk, run);
        if (vn->requires_grad) detail::deposit(vn, dv, run);
      });
}

/// Splits flat CHW images into flattened non-overlapping patches.
/// x is [batch x c*h*w]; the result is [batch*np x c*ps*ps] with patches in
/// row-major grid order.
template <class S>
Tensor<S> patchify(const Tensor<S>& x, Eigen::Index c, Eigen::Index h, Eigen::Index w,
                   Eigen::Index ps) {
  detail::check_usable(x);
  if (c <= 0 || h <= 0 || w <= 0 || ps <= 0 || h % ps != 0 || w % ps != 0)
    throw ShapeError("patchify: patch size must divide height and width");
  if (x.cols() != c * h * w)
    throw ShapeError("patchify: columns must equal c*h*w");
  const Eigen::Index gh = h / ps, gw = w / ps, np = gh * gw, pd = c * ps * ps;
  const Eigen::Index batch = x.rows();

  Mat<S> out(batch * np, pd);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index pr = 0; pr < gh; ++pr) {
      for (Eigen::Index pc = 0; pc < gw; ++pc) {
        auto dst = out.row(b * np + pr * gw + pc);
        Eigen::Index j = 0;
        for (Eigen::Index ch = 0; ch < c; ++ch)
          for (Eigen::Index dy = 0; dy < ps; ++dy)
            for (Eigen::Index dx = 0; dx < ps; ++dx)
              dst(j++) = x.value()(b, ch * h * w + (pr * ps + dy) * w + (pc * ps + dx));
      }
    }
  }
  auto* xn = x.raw();
  return detail::make_op<S>(
      std::move(out), {x.shared()}, [xn, c, h, w, ps, gh, gw, np](detail::Node<S>& self) {
        Mat<S> dx = Mat<S>::Zero(xn->value.rows(), xn->value.cols());
        for (Eigen::Index b = 0; b < dx.rows(); ++b) {
          for (Eigen::Index pr = 0; pr < gh; ++pr) {
            for (Eigen::Index pc = 0; pc < gw; ++pc) {
              const auto src = self.grad.row(b * np + pr * gw + pc);
              Eigen::Index j = 0;
              for (Eigen::Index ch = 0; ch < c; ++ch)
                for (Eigen::Index dy = 0; dy < ps; ++dy)
                  for (Eigen::Index dx2 = 0; dx2 < ps; ++dx2)
                    dx(b, ch * h * w + (pr * ps + dy) * w + (pc * ps + dx2)) = src(j++);
            }
          }
        }
        detail::deposit(xn, dx, detail::current_run<S>());
      });
}

/// Builds per-example token blocks [cls; prompt; patches_b] stacked over the
/// batch. cls is [1 x d], prompt is [p x d] (p may be 0 via an empty tensor
/// overload below), patches is [batch*np x d].
template <class S>
Tensor<S> concat_tokens(const Tensor<S>& cls, const Tensor<S>& prompt,
                        const Tensor<S>& patches, Eigen::Index batch) {
  detail::check_usable(cls);
  detail::check_usable(prompt);
  detail::check_usable(patches);
  const Eigen::Index d = cls.cols();
  if (cls.rows() != 1) throw ShapeError("concat_tokens: cls must be [1 x d]");
  if (prompt.cols() != d && prompt.rows() != 0)
    throw ShapeError("concat_tokens: prompt width disagrees with cls");
  if (patches.cols() != d) throw ShapeError("concat_tokens: patch width disagrees with cls");
  if (batch <= 0 || patches.rows() % batch != 0)
    throw ShapeError("concat_tokens: patch rows must be a multiple of batch");
  const Eigen::Index np = patches.rows() / batch, p = prompt.rows(), t = 1 + p + np;

  Mat<S> out(batch * t, d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.row(b * t) = cls.value().row(0);
    if (p > 0) out.middleRows(b * t + 1, p) = prompt.value();
    out.middleRows(b * t + 1 + p, np) = patches.value().middleRows(b * np, np);
  }
  auto *cn = cls.raw(), *pn = prompt.raw(), *xn = patches.raw();
  return detail::make_op<S>(
      std::move(out), {cls.shared(), prompt.shared(), patches.shared()},
      [cn, pn, xn, batch, np, p, t, d](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (cn->requires_grad) {
          Mat<S> dc = Mat<S>::Zero(1, d);
          for (Eigen::Index b = 0; b < batch; ++b) dc.row(0) += self.grad.row(b * t);
          detail::deposit(cn, dc, run);
        }
        if (p > 0 && pn->requires_grad) {
          Mat<S> dp = Mat<S>::Zero(p, d);
          for (Eigen::Index b = 0; b < batch; ++b) dp += self.grad.middleRows(b * t + 1, p);
          detail::deposit(pn, dp, run);
        }
        if (xn->requires_grad) {
          Mat<S> dx(batch * np, d);
          for (Eigen::Index b = 0; b < batch; ++b)
            dx.middleRows(b * np, np) = self.grad.middleRows(b * t + 1 + p, np);
          detail::deposit(xn, dx, run);
        }
      });
}

template <class S>
Tensor<S> concat_tokens(const Tensor<S>& cls, const Tensor<S>& patches, Eigen::Index batch) {
  Tensor<S> none = Tensor<S>::constant(Mat<S>(0, patches.cols()));
  return concat_tokens(cls, none, patches, batch);
}

/// Adds learned positions to the cls row and the patch rows of each block,
/// skipping any prompt rows in between. pos is [(1+np) x d].
template <class S>
Tensor<S> add_pos(const Tensor<S>& tokens, const Tensor<S>& pos, Eigen::Index batch,
                  Eigen::Index n_prompt) {
  detail::check_usable(tokens);
  detail::check_usable(pos);
  const Eigen::Index d = tokens.cols();
  if (pos.cols() != d) throw ShapeError("add_pos: widths disagree");
  if (batch <= 0 || tokens.rows() % batch != 0)
    throw ShapeError("add_pos: token rows must be a multiple of batch");
  const Eigen::Index t = tokens.rows() / batch;
  const Eigen::Index np = t - 1 - n_prompt;
  if (n_prompt < 0 || np <= 0 || pos.rows() != 1 + np)
    throw ShapeError("add_pos: pos must be [(1 + patches) x d]");

  Mat<S> out = tokens.value();
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.row(b * t) += pos.value().row(0);
    out.middleRows(b * t + 1 + n_prompt, np) += pos.value().bottomRows(np);
  }
  auto *tn = tokens.raw(), *pn = pos.raw();
  return detail::make_op<S>(
      std::move(out), {tokens.shared(), pos.shared()},
      [tn, pn, batch, t, np, n_prompt, d](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (tn->requires_grad) detail::deposit(tn, self.grad, run);
        if (pn->requires_grad) {
          Mat<S> dp = Mat<S>::Zero(1 + np, d);
          for (Eigen::Index b = 0; b < batch; ++b) {
            dp.row(0) += self.grad.row(b * t);
            dp.bottomRows(np) += self.grad.middleRows(b * t + 1 + n_prompt, np);
          }
          detail::deposit(pn, dp, run);
        }
      });
}

/// Overwrites the prompt rows of each block with fresh learned rows. The
/// replaced activations receive no gradient; the new rows take it instead.
template <class S>
Tensor<S> replace_prompt_rows(const Tensor<S>& tokens, const Tensor<S>& prompt,
                              Eigen::Index batch) {
  detail::check_usable(tokens);
  detail::check_usable(prompt);
  const Eigen::Index d = tokens.cols(), p = prompt.rows();
  if (prompt.cols() != d) throw ShapeError("replace_prompt_rows: widths disagree");
  if (batch <= 0 || tokens.rows() % batch != 0)
    throw ShapeError("replace_prompt_rows: token rows must be a multiple of batch");
  const Eigen::Index t = tokens.rows() / batch;
  if (p <= 0 || p > t - 1) throw ShapeError("replace_prompt_rows: prompt rows out of range");

  Mat<S> out = tokens.value();
  for (Eigen::Index b = 0; b < batch; ++b) out.middleRows(b * t + 1, p) = prompt.value();
  auto *tn = tokens.raw(), *pn = prompt.raw();
  return detail::make_op<S>(
      std::move(out), {tokens.shared(), prompt.shared()},
      [tn, pn, batch, t, p, d](detail::Node<S>& self) {
        const auto run = detail::current_run<S>();
        if (tn->requires_grad) {
          Mat<S> dt = self.grad;
          for (Eigen::Index b = 0; b < batch; ++b)
            dt.middleRows(b * t + 1, p).setZero();
          detail::deposit(tn, dt, run);
        }
        if (pn->requires_grad) {
          Mat<S> dp = Mat<S>::Zero(p, d);
          for (Eigen::Index b = 0; b < batch; ++b) dp += self.grad.middleRows(b * t + 1, p);
          detail::deposit(pn, dp, run);
        }
      });
}

/// Gathers the cls row of every block: [batch*t x d] -> [batch x d].
template <class S>
Tensor<S> take_cls_rows(const Tensor<S>& tokens, Eigen::Index batch) {
  detail::check_usable(tokens);
  if (batch <= 0 || tokens.rows() % batch != 0)
    throw ShapeError("take_cls_rows: token rows must be a multiple of batch");
  const Eigen::Index t = tokens.rows() / batch, d = tokens.cols();
  Mat<S> out(batch, d);
  for (Eigen::Index b = 0; b < batch; ++b) out.row(b) = tokens.value().row(b * t);
  auto* tn = tokens.raw();
  return detail::make_op<S>(std::move(out), {tokens.shared()},
                            [tn, batch, t](detail::Node<S>& self) {
                              Mat<S> dt = Mat<S>::Zero(tn->value.rows(), tn->value.cols());
                              for (Eigen::Index b = 0; b < batch; ++b)
                                dt.row(b * t) = self.grad.row(b);
                              detail::deposit(tn, dt, detail::current_run<S>());
                            });
}

/// Convenience for evaluation code: row-wise argmax of a plain matrix.
template <class S>
std::vector<int> argmax_rows(const Mat<S>& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index j = 0;
    m.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<int>(j);
  }
  return out;
}

}  // namespace smoothcert

#endif  // SMOOTHCERT_TENSOR_HPP
