#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "apgcl/matrix.hpp"

namespace apgcl {

// Reverse-mode tape over Mat<T>. Nodes are created by the op functions
// below; backward() walks the tape in reverse creation order.
//
// A tape lives for one forward/backward pass (one training step); model
// parameters are bound as leaves each step.
template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr; }
  const Mat<T>& val() const;
  const Mat<T>& grad() const;
  T scalar() const;
};

template <class T>
class Tape {
 public:
  using scalar = T;

  struct Node {
    Mat<T> val;
    Mat<T> grad;
    std::function<void(Tape&)> back;  // empty for leaves
  };

  Var<T> leaf(Mat<T> value) {
    nodes_.push_back(Node{std::move(value), Mat<T>(), {}});
    auto& n = nodes_.back();
    n.grad = Mat<T>(n.val.rows, n.val.cols);
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> make(Mat<T> value, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Mat<T>(), std::move(back)});
    auto& n = nodes_.back();
    n.grad = Mat<T>(n.val.rows, n.val.cols);
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  const Mat<T>& val(int i) const { return nodes_[static_cast<std::size_t>(i)].val; }
  Mat<T>& grad(int i) { return nodes_[static_cast<std::size_t>(i)].grad; }

  // Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
  void backward(Var<T> root) {
    if (root.tape != this) throw std::invalid_argument("backward: var from another tape");
    const Mat<T>& rv = val(root.idx);
    if (rv.rows != 1 || rv.cols != 1)
      throw std::invalid_argument("backward: root must be scalar (1x1), got " + shape_str(rv));
    grad(root.idx)(0, 0) = T(1);
    for (int i = root.idx; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back) n.back(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <class T>
const Mat<T>& Var<T>::val() const {
  return tape->val(idx);
}
template <class T>
const Mat<T>& Var<T>::grad() const {
  return tape->grad(idx);
}
template <class T>
T Var<T>::scalar() const {
  const Mat<T>& m = val();
  if (m.rows != 1 || m.cols != 1)
    throw std::invalid_argument("scalar(): var is " + shape_str(m) + ", not 1x1");
  return m(0, 0);
}

namespace detail {
template <class T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument("op: vars from different tapes");
}
}  // namespace detail

// ---- elementwise / structural ops ----

// A backward closure cannot know its own node index at construction, so all
// ops are written through this helper: make_node() passes the new node's
// index into the backward closure.
template <class T, class Back>
Var<T> make_node(Tape<T>& t, Mat<T> value, Back&& back_with_self) {
  // two-phase: create node with empty back, then install closure that
  // captures the final index.
  Var<T> out = t.make(std::move(value), {});
  int self = out.idx;
  t.node(self).back = [self, back = std::forward<Back>(back_with_self)](Tape<T>& tp) {
    back(tp, self);
  };
  return out;
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  int ai = a.idx, bi = b.idx;
  return make_node(t, t.val(ai) + t.val(bi), [ai, bi](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(ai);
    Mat<T>& gb = tp.grad(bi);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      ga.v[i] += g.v[i];
      gb.v[i] += g.v[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  int ai = a.idx, bi = b.idx;
  return make_node(t, t.val(ai) - t.val(bi), [ai, bi](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(ai);
    Mat<T>& gb = tp.grad(bi);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      ga.v[i] += g.v[i];
      gb.v[i] -= g.v[i];
    }
  });
}

template <class T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  if (!t.val(a.idx).same_shape(t.val(b.idx)))
    throw std::invalid_argument("hadamard: shape mismatch");
  Mat<T> out = t.val(a.idx);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= t.val(b.idx).v[i];
  int ai = a.idx, bi = b.idx;
  return make_node(t, std::move(out), [ai, bi](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& av = tp.val(ai);
    const Mat<T>& bv = tp.val(bi);
    Mat<T>& ga = tp.grad(ai);
    Mat<T>& gb = tp.grad(bi);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      ga.v[i] += g.v[i] * bv.v[i];
      gb.v[i] += g.v[i] * av.v[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& t = *a.tape;
  int ai = a.idx;
  return make_node(t, t.val(ai) * s, [ai, s](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * s;
  });
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  int ai = a.idx, bi = b.idx;
  return make_node(t, matmul(t.val(ai), t.val(bi)), [ai, bi](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T> gA = matmul(g, transpose(tp.val(bi)));
    Mat<T> gB = matmul(transpose(tp.val(ai)), g);
    Mat<T>& ga = tp.grad(ai);
    Mat<T>& gb = tp.grad(bi);
    for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += gA.v[i];
    for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += gB.v[i];
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  Tape<T>& t = *a.tape;
  int ai = a.idx;
  return make_node(t, transpose(t.val(ai)), [ai](Tape<T>& tp, int self) {
    Mat<T> gT = transpose(tp.grad(self));
    Mat<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += gT.v[i];
  });
}

// broadcast a 1xC bias over all rows
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::check_same_tape(x, bias);
  Tape<T>& t = *x.tape;
  const Mat<T>& xv = t.val(x.idx);
  const Mat<T>& bv = t.val(bias.idx);
  if (bv.rows != 1 || bv.cols != xv.cols)
    throw std::invalid_argument("add_bias: bias " + shape_str(bv) + " vs input " + shape_str(xv));
  Mat<T> out = xv;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += bv(0, j);
  int xi = x.idx, bi = bias.idx;
  return make_node(t, std::move(out), [xi, bi](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& gx = tp.grad(xi);
    Mat<T>& gb = tp.grad(bi);
    for (std::size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += g.v[i];
    for (int i = 0; i < g.rows; ++i)
      for (int j = 0; j < g.cols; ++j) gb(0, j) += g(i, j);
  });
}

template <class T>
Var<T> gelu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a.idx);
  Mat<T> out = av;
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (auto& x : out.v) {
    double xd = static_cast<double>(x);
    x = static_cast<T>(xd * 0.5 * (1.0 + std::erf(xd * inv_sqrt2)));
  }
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& av2 = tp.val(ai);
    Mat<T>& ga = tp.grad(ai);
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      double x = static_cast<double>(av2.v[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ga.v[i] += g.v[i] * static_cast<T>(cdf + x * pdf);
    }
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> out = t.val(a.idx);
  for (auto& x : out.v)
    if (x < T(0)) x = T(0);
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& av = tp.val(ai);
    Mat<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i)
      if (av.v[i] > T(0)) ga.v[i] += g.v[i];
  });
}

template <class T>
Var<T> log_each(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> out = t.val(a.idx);
  for (auto& x : out.v) {
    if (!(x > T(0))) throw std::invalid_argument("log: non-positive entry");
    x = std::log(x);
  }
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& av = tp.val(ai);
    Mat<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] / av.v[i];
  });
}

template <class T>
Var<T> sqrt_each(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> out = t.val(a.idx);
  for (auto& x : out.v) {
    if (!(x > T(0))) throw std::invalid_argument("sqrt: non-positive entry");
    x = std::sqrt(x);
  }
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& ov = tp.val(self);
    Mat<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] / (T(2) * ov.v[i]);
  });
}

template <class T>
Var<T> divide(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = *a.tape;
  if (!t.val(a.idx).same_shape(t.val(b.idx)))
    throw std::invalid_argument("divide: shape mismatch");
  Mat<T> out = t.val(a.idx);
  for (std::size_t i = 0; i < out.v.size(); ++i) {
    if (t.val(b.idx).v[i] == T(0)) throw std::invalid_argument("divide: zero denominator");
    out.v[i] /= t.val(b.idx).v[i];
  }
  int ai = a.idx, bi = b.idx;
  return make_node(t, std::move(out), [ai, bi](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& bv = tp.val(bi);
    const Mat<T>& ov = tp.val(self);
    Mat<T>& ga = tp.grad(ai);
    Mat<T>& gb = tp.grad(bi);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      ga.v[i] += g.v[i] / bv.v[i];
      gb.v[i] -= g.v[i] * ov.v[i] / bv.v[i];
    }
  });
}

template <class T>
Var<T> abs_each(Var<T> a) {
  Tape<T>& t = *a.tape;
  Mat<T> out = t.val(a.idx);
  for (auto& x : out.v) x = std::abs(x);
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& av = tp.val(ai);
    Mat<T>& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      T s = av.v[i] > T(0) ? T(1) : (av.v[i] < T(0) ? T(-1) : T(0));
      ga.v[i] += g.v[i] * s;
    }
  });
}

template <class T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& t = *a.tape;
  T s = T(0);
  for (T x : t.val(a.idx).v) s += x;
  Mat<T> out(1, 1);
  out(0, 0) = s;
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    T g = tp.grad(self)(0, 0);
    Mat<T>& ga = tp.grad(ai);
    for (auto& x : ga.v) x += g;
  });
}

template <class T>
Var<T> mean_all(Var<T> a) {
  std::size_t n = a.val().size();
  return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// 1x1 view of a single element
template <class T>
Var<T> pick(Var<T> a, int i, int j) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a.idx);
  if (i < 0 || i >= av.rows || j < 0 || j >= av.cols)
    throw std::out_of_range("pick: index out of range");
  Mat<T> out(1, 1);
  out(0, 0) = av(i, j);
  int ai = a.idx;
  return make_node(t, std::move(out), [ai, i, j](Tape<T>& tp, int self) {
    tp.grad(ai)(i, j) += tp.grad(self)(0, 0);
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, int r0, int r1) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a.idx);
  if (r0 < 0 || r1 > av.rows || r0 >= r1)
    throw std::out_of_range("slice_rows: bad range");
  Mat<T> out(r1 - r0, av.cols);
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < av.cols; ++j) out(i - r0, j) = av(i, j);
  int ai = a.idx;
  return make_node(t, std::move(out), [ai, r0](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(ai);
    for (int i = 0; i < g.rows; ++i)
      for (int j = 0; j < g.cols; ++j) ga(r0 + i, j) += g(i, j);
  });
}

template <class T>
Var<T> slice_cols(Var<T> a, int c0, int c1) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a.idx);
  if (c0 < 0 || c1 > av.cols || c0 >= c1)
    throw std::out_of_range("slice_cols: bad range");
  Mat<T> out(av.rows, c1 - c0);
  for (int i = 0; i < av.rows; ++i)
    for (int j = c0; j < c1; ++j) out(i, j - c0) = av(i, j);
  int ai = a.idx;
  return make_node(t, std::move(out), [ai, c0](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(ai);
    for (int i = 0; i < g.rows; ++i)
      for (int j = 0; j < g.cols; ++j) ga(i, c0 + j) += g(i, j);
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Tape<T>& t = *parts[0].tape;
  int cols = t.val(parts[0].idx).cols;
  int rows = 0;
  for (auto p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat_rows: mixed tapes");
    if (t.val(p.idx).cols != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += t.val(p.idx).rows;
  }
  Mat<T> out(rows, cols);
  std::vector<int> idxs;
  std::vector<int> offsets;
  int r = 0;
  for (auto p : parts) {
    const Mat<T>& pv = t.val(p.idx);
    for (int i = 0; i < pv.rows; ++i)
      for (int j = 0; j < cols; ++j) out(r + i, j) = pv(i, j);
    idxs.push_back(p.idx);
    offsets.push_back(r);
    r += pv.rows;
  }
  return make_node(t, std::move(out),
                   [idxs, offsets](Tape<T>& tp, int self) {
                     const Mat<T>& g = tp.grad(self);
                     for (std::size_t k = 0; k < idxs.size(); ++k) {
                       Mat<T>& gp = tp.grad(idxs[k]);
                       int off = offsets[k];
                       for (int i = 0; i < gp.rows; ++i)
                         for (int j = 0; j < gp.cols; ++j) gp(i, j) += g(off + i, j);
                     }
                   });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape<T>& t = *parts[0].tape;
  int rows = t.val(parts[0].idx).rows;
  int cols = 0;
  for (auto p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat_cols: mixed tapes");
    if (t.val(p.idx).rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += t.val(p.idx).cols;
  }
  Mat<T> out(rows, cols);
  std::vector<int> idxs;
  std::vector<int> offsets;
  int c = 0;
  for (auto p : parts) {
    const Mat<T>& pv = t.val(p.idx);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < pv.cols; ++j) out(i, c + j) = pv(i, j);
    idxs.push_back(p.idx);
    offsets.push_back(c);
    c += pv.cols;
  }
  return make_node(t, std::move(out),
                   [idxs, offsets](Tape<T>& tp, int self) {
                     const Mat<T>& g = tp.grad(self);
                     for (std::size_t k = 0; k < idxs.size(); ++k) {
                       Mat<T>& gp = tp.grad(idxs[k]);
                       int off = offsets[k];
                       for (int i = 0; i < gp.rows; ++i)
                         for (int j = 0; j < gp.cols; ++j) gp(i, j) += g(i, off + j);
                     }
                   });
}

// row-wise softmax with max-subtraction
template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a.idx);
  if (!av.all_finite()) throw std::invalid_argument("softmax: non-finite input");
  Mat<T> out(av.rows, av.cols);
  for (int i = 0; i < av.rows; ++i) {
    T mx = av(i, 0);
    for (int j = 1; j < av.cols; ++j) mx = std::max(mx, av(i, j));
    T sum = T(0);
    for (int j = 0; j < av.cols; ++j) {
      out(i, j) = std::exp(av(i, j) - mx);
      sum += out(i, j);
    }
    for (int j = 0; j < av.cols; ++j) out(i, j) /= sum;
  }
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& y = tp.val(self);
    Mat<T>& ga = tp.grad(ai);
    for (int i = 0; i < y.rows; ++i) {
      T dot = T(0);
      for (int j = 0; j < y.cols; ++j) dot += g(i, j) * y(i, j);
      for (int j = 0; j < y.cols; ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

// fused log-softmax: stays finite where log(softmax(x)) would underflow
template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a.idx);
  if (!av.all_finite()) throw std::invalid_argument("log_softmax: non-finite input");
  Mat<T> out(av.rows, av.cols);
  for (int i = 0; i < av.rows; ++i) {
    T mx = av(i, 0);
    for (int j = 1; j < av.cols; ++j) mx = std::max(mx, av(i, j));
    T sum = T(0);
    for (int j = 0; j < av.cols; ++j) sum += std::exp(av(i, j) - mx);
    T lse = mx + std::log(sum);
    for (int j = 0; j < av.cols; ++j) out(i, j) = av(i, j) - lse;
  }
  int ai = a.idx;
  return make_node(t, std::move(out), [ai](Tape<T>& tp, int self) {
    const Mat<T>& g = tp.grad(self);
    const Mat<T>& y = tp.val(self);  // log-probs
    Mat<T>& ga = tp.grad(ai);
    for (int i = 0; i < y.rows; ++i) {
      T gsum = T(0);
      for (int j = 0; j < y.cols; ++j) gsum += g(i, j);
      for (int j = 0; j < y.cols; ++j)
        ga(i, j) += g(i, j) - std::exp(y(i, j)) * gsum;
    }
  });
}

// row-wise layer normalization with affine (gamma, beta are 1xC)
template <class T>
Var<T> layernorm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  detail::check_same_tape(x, gamma);
  detail::check_same_tape(x, beta);
  Tape<T>& t = *x.tape;
  const Mat<T>& xv = t.val(x.idx);
  const Mat<T>& gv = t.val(gamma.idx);
  const Mat<T>& bv = t.val(beta.idx);
  int C = xv.cols;
  if (gv.rows != 1 || gv.cols != C || bv.rows != 1 || bv.cols != C)
    throw std::invalid_argument("layernorm: gamma/beta must be 1x" + std::to_string(C));
  Mat<T> out(xv.rows, C);
  // xhat and 1/sigma are needed in backward; store them in the closure
  auto xhat = std::make_shared<Mat<T>>(xv.rows, C);
  auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xv.rows));
  for (int i = 0; i < xv.rows; ++i) {
    T mu = T(0);
    for (int j = 0; j < C; ++j) mu += xv(i, j);
    mu /= static_cast<T>(C);
    T var = T(0);
    for (int j = 0; j < C; ++j) {
      T d = xv(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<T>(C);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < C; ++j) {
      (*xhat)(i, j) = (xv(i, j) - mu) * is;
      out(i, j) = (*xhat)(i, j) * gv(0, j) + bv(0, j);
    }
  }
  int xi = x.idx, gi = gamma.idx, bi = beta.idx;
  return make_node(t, std::move(out),
                   [xi, gi, bi, xhat, inv_sigma](Tape<T>& tp, int self) {
                     const Mat<T>& g = tp.grad(self);
                     const Mat<T>& gv2 = tp.val(gi);
                     Mat<T>& gx = tp.grad(xi);
                     Mat<T>& gg = tp.grad(gi);
                     Mat<T>& gb = tp.grad(bi);
                     int C = g.cols;
                     for (int i = 0; i < g.rows; ++i) {
                       T m1 = T(0), m2 = T(0);
                       for (int j = 0; j < C; ++j) {
                         T dxh = g(i, j) * gv2(0, j);
                         m1 += dxh;
                         m2 += dxh * (*xhat)(i, j);
                         gg(0, j) += g(i, j) * (*xhat)(i, j);
                         gb(0, j) += g(i, j);
                       }
                       m1 /= static_cast<T>(C);
                       m2 /= static_cast<T>(C);
                       T is = (*inv_sigma)[static_cast<std::size_t>(i)];
                       for (int j = 0; j < C; ++j) {
                         T dxh = g(i, j) * gv2(0, j);
                         gx(i, j) += is * (dxh - m1 - (*xhat)(i, j) * m2);
                       }
                     }
                   });
}

// dot product of two same-shape vars flattened, as 1x1
template <class T>
Var<T> dot_all(Var<T> a, Var<T> b) {
  return sum_all(hadamard(a, b));
}

// cosine distance 1 - a.b/(|a||b|) of flattened matrices
template <class T>
Var<T> cosine_distance(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  T na = T(0), nb = T(0);
  for (T x : a.val().v) na += x * x;
  for (T x : b.val().v) nb += x * x;
  if (na == T(0) || nb == T(0))
    throw std::invalid_argument("cosine_distance: zero-norm input (degenerate prompt)");
  Var<T> d = dot_all(a, b);
  Var<T> denom = sqrt_each(hadamard(sum_all(hadamard(a, a)), sum_all(hadamard(b, b))));
  Var<T> one = t.leaf(Mat<T>(1, 1, {T(1)}));
  return sub(one, divide(d, denom));
}

}  // namespace apgcl
