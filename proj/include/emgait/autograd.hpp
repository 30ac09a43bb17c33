#pragma once

// Minimal reverse-mode differentiation over row-major dense matrices.
//
// Every tensor in the network is a 2-D matrix whose rows are tokens (pixels,
// points, frames, parts) and whose columns are channels. Batched structure is
// carried by the ops themselves through row offsets, so a whole minibatch is a
// single tape.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace emgait {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  std::size_t id = 0;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var constant(Mat<T> value) { return push(std::move(value), false, {}); }

  Var leaf(Parameter<T>& p) {
    if (!p.trainable) return push(p.value, false, {});
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    Parameter<T>* target = &p;
    return push(p.value, true, [target](Tape& t, std::size_t self) { target->grad += t.nodes_[self].grad; });
  }

  Var push(Mat<T> value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat<T>(), needs_grad, needs_grad ? std::move(backward) : Backward{}});
    return Var{nodes_.size() - 1};
  }

  const Mat<T>& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient accumulator of a node, allocated as zeros on first use.
  Mat<T>& grad(Var v) { return grad(v.id); }
  Mat<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var root) {
    if (nodes_[root.id].value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!nodes_[root.id].needs_grad) return;
    grad(root).setOnes();
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace ops {

namespace detail {

template <class T>
void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace detail

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  detail::require<T>(t.value(a).cols() == t.value(b).rows(), "matmul: inner dimension mismatch");
  Mat<T> out = t.value(a) * t.value(b);
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.grad(a).noalias() += g * tp.value(b).transpose();
    if (tp.needs_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * g;
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  detail::require<T>(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                     "add: shape mismatch");
  Mat<T> out = t.value(a) + t.value(b);
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b](Tape<T>& tp, std::size_t self) {
    if (tp.needs_grad(a)) tp.grad(a) += tp.grad(self);
    if (tp.needs_grad(b)) tp.grad(b) += tp.grad(self);
  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  detail::require<T>(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                     "sub: shape mismatch");
  Mat<T> out = t.value(a) - t.value(b);
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a, b](Tape<T>& tp, std::size_t self) {
    if (tp.needs_grad(a)) tp.grad(a) += tp.grad(self);
    if (tp.needs_grad(b)) tp.grad(b) -= tp.grad(self);
  });
}

// Adds a 1×c row to every row of a.
template <class T>
Var add_row(Tape<T>& t, Var a, Var row) {
  detail::require<T>(t.value(row).rows() == 1 && t.value(row).cols() == t.value(a).cols(), "add_row: shape mismatch");
  Mat<T> out = t.value(a).rowwise() + t.value(row).row(0);
  bool ng = t.needs_grad(a) || t.needs_grad(row);
  return t.push(std::move(out), ng, [a, row](Tape<T>& tp, std::size_t self) {
    if (tp.needs_grad(a)) tp.grad(a) += tp.grad(self);
    if (tp.needs_grad(row)) tp.grad(row) += tp.grad(self).colwise().sum();
  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
  Mat<T> out = t.value(a) * s;
  return t.push(std::move(out), t.needs_grad(a), [a, s](Tape<T>& tp, std::size_t self) { tp.grad(a) += tp.grad(self) * s; });
}

// Multiplies row i by the constant s[i].
template <class T>
Var scale_rows(Tape<T>& t, Var a, std::vector<T> s) {
  detail::require<T>(static_cast<Eigen::Index>(s.size()) == t.value(a).rows(), "scale_rows: size mismatch");
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> sv(s.data(), static_cast<Eigen::Index>(s.size()));
  Mat<T> out = sv.asDiagonal() * t.value(a);
  return t.push(std::move(out), t.needs_grad(a), [a, s = std::move(s)](Tape<T>& tp, std::size_t self) {
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> m(s.data(), static_cast<Eigen::Index>(s.size()));
    tp.grad(a) += m.asDiagonal() * tp.grad(self);
  });
}

template <class T>
Var leaky_relu(Tape<T>& t, Var a, T slope) {
  const Mat<T>& x = t.value(a);
  Mat<T> out = x.unaryExpr([slope](T v) { return v > T(0) ? v : v * slope; });
  return t.push(std::move(out), t.needs_grad(a), [a, slope](Tape<T>& tp, std::size_t self) {
    const Mat<T>& xv = tp.value(a);
    tp.grad(a) += tp.grad(self).binaryExpr(xv, [slope](T g, T v) { return v > T(0) ? g : g * slope; });
  });
}

// Row-wise layer normalization with a learned affine (gamma, beta are 1×c).
template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const Mat<T>& xv = t.value(x);
  const Eigen::Index n = xv.rows(), c = xv.cols();
  Mat<T> xhat(n, c);
  std::vector<T> inv_sigma(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    T mu = xv.row(i).mean();
    T var = (xv.row(i).array() - mu).square().mean();
    T is = T(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(i)] = is;
    xhat.row(i) = (xv.row(i).array() - mu) * is;
  }
  Mat<T> out = (xhat.array().rowwise() * t.value(gamma).row(0).array()).rowwise() + t.value(beta).row(0).array();
  bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.push(std::move(out), ng,
                [x, gamma, beta, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Tape<T>& tp, std::size_t self) {
                  const Mat<T>& g = tp.grad(self);
                  if (tp.needs_grad(gamma)) tp.grad(gamma) += (g.array() * xhat.array()).colwise().sum().matrix();
                  if (tp.needs_grad(beta)) tp.grad(beta) += g.colwise().sum();
                  if (!tp.needs_grad(x)) return;
                  Mat<T> dxhat = g.array().rowwise() * tp.value(gamma).row(0).array();
                  Mat<T>& gx = tp.grad(x);
                  for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                    T m1 = dxhat.row(i).mean();
                    T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
                    gx.row(i).array() +=
                        inv_sigma[static_cast<std::size_t>(i)] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                  }
                });
}

// out.row(i) = a.row(index[i]); backward scatters.
template <class T>
Var gather_rows(Tape<T>& t, Var a, std::vector<Eigen::Index> index) {
  const Mat<T>& av = t.value(a);
  Mat<T> out(static_cast<Eigen::Index>(index.size()), av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require<T>(index[i] >= 0 && index[i] < av.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = av.row(index[i]);
  }
  return t.push(std::move(out), t.needs_grad(a), [a, index = std::move(index)](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(a);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

// Copy of `base` whose rows at `positions` are replaced by the rows of `src`.
template <class T>
Var scatter_rows(Tape<T>& t, Var base, Var src, std::vector<Eigen::Index> positions) {
  const Mat<T>& bv = t.value(base);
  const Mat<T>& sv = t.value(src);
  detail::require<T>(static_cast<Eigen::Index>(positions.size()) == sv.rows() && sv.cols() == bv.cols(),
                     "scatter_rows: shape mismatch");
  Mat<T> out = bv;
  std::vector<char> replaced(static_cast<std::size_t>(bv.rows()), 0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    detail::require<T>(positions[i] >= 0 && positions[i] < bv.rows(), "scatter_rows: position out of range");
    detail::require<T>(!replaced[static_cast<std::size_t>(positions[i])], "scatter_rows: duplicate position");
    replaced[static_cast<std::size_t>(positions[i])] = 1;
    out.row(positions[i]) = sv.row(static_cast<Eigen::Index>(i));
  }
  bool ng = t.needs_grad(base) || t.needs_grad(src);
  return t.push(std::move(out), ng,
                [base, src, positions = std::move(positions), replaced = std::move(replaced)](Tape<T>& tp, std::size_t self) {
                  const Mat<T>& g = tp.grad(self);
                  if (tp.needs_grad(base)) {
                    Mat<T>& gb = tp.grad(base);
                    for (Eigen::Index r = 0; r < g.rows(); ++r)
                      if (!replaced[static_cast<std::size_t>(r)]) gb.row(r) += g.row(r);
                  }
                  if (tp.needs_grad(src)) {
                    Mat<T>& gs = tp.grad(src);
                    for (std::size_t i = 0; i < positions.size(); ++i) gs.row(static_cast<Eigen::Index>(i)) += g.row(positions[i]);
                  }
                });
}

// Vertical concatenation.
template <class T>
Var concat_rows(Tape<T>& t, const std::vector<Var>& parts) {
  detail::require<T>(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts.front()).cols();
  bool ng = false;
  for (Var p : parts) {
    detail::require<T>(t.value(p).cols() == cols, "concat_rows: width mismatch");
    rows += t.value(p).rows();
    ng = ng || t.needs_grad(p);
  }
  Mat<T> out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  return t.push(std::move(out), ng, [parts](Tape<T>& tp, std::size_t self) {
    Eigen::Index r0 = 0;
    for (Var p : parts) {
      const Eigen::Index n = tp.value(p).rows();
      if (tp.needs_grad(p)) tp.grad(p) += tp.grad(self).middleRows(r0, n);
      r0 += n;
    }
  });
}

// Contiguous row block [first, first + count).
template <class T>
Var slice_rows(Tape<T>& t, Var a, Eigen::Index first, Eigen::Index count) {
  detail::require<T>(first >= 0 && count >= 0 && first + count <= t.value(a).rows(), "slice_rows: out of range");
  Mat<T> out = t.value(a).middleRows(first, count);
  return t.push(std::move(out), t.needs_grad(a), [a, first, count](Tape<T>& tp, std::size_t self) {
    tp.grad(a).middleRows(first, count) += tp.grad(self);
  });
}

// Rows laid out as [outer][group][inner]; reduces the group axis with max.
template <class T>
Var group_max(Tape<T>& t, Var a, Eigen::Index outer, Eigen::Index group, Eigen::Index inner) {
  const Mat<T>& av = t.value(a);
  detail::require<T>(outer * group * inner == av.rows() && group >= 1, "group_max: shape mismatch");
  const Eigen::Index c = av.cols();
  Mat<T> out(outer * inner, c);
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(outer * inner * c));
  for (Eigen::Index o = 0; o < outer; ++o)
    for (Eigen::Index i = 0; i < inner; ++i) {
      const Eigen::Index orow = o * inner + i;
      for (Eigen::Index j = 0; j < c; ++j) {
        Eigen::Index best = o * group * inner + i;
        T bv = av(best, j);
        for (Eigen::Index g = 1; g < group; ++g) {
          const Eigen::Index r = (o * group + g) * inner + i;
          if (av(r, j) > bv) {
            bv = av(r, j);
            best = r;
          }
        }
        out(orow, j) = bv;
        arg[static_cast<std::size_t>(orow * c + j)] = best;
      }
    }
  return t.push(std::move(out), t.needs_grad(a), [a, c, arg = std::move(arg)](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(a);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      for (Eigen::Index j = 0; j < c; ++j) ga(arg[static_cast<std::size_t>(r * c + j)], j) += g(r, j);
  });
}

// Mean over contiguous row segments [offsets[s], offsets[s+1]).
template <class T>
Var segment_mean(Tape<T>& t, Var a, std::vector<Eigen::Index> offsets) {
  const Mat<T>& av = t.value(a);
  detail::require<T>(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == av.rows(),
                     "segment_mean: offsets do not cover input");
  const Eigen::Index segs = static_cast<Eigen::Index>(offsets.size()) - 1;
  Mat<T> out(segs, av.cols());
  for (Eigen::Index s = 0; s < segs; ++s) {
    const Eigen::Index b = offsets[static_cast<std::size_t>(s)], e = offsets[static_cast<std::size_t>(s) + 1];
    detail::require<T>(e > b, "segment_mean: empty segment");
    out.row(s) = av.middleRows(b, e - b).colwise().sum() / T(e - b);
  }
  return t.push(std::move(out), t.needs_grad(a), [a, offsets = std::move(offsets)](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& ga = tp.grad(a);
    for (Eigen::Index s = 0; s < g.rows(); ++s) {
      const Eigen::Index b = offsets[static_cast<std::size_t>(s)], e = offsets[static_cast<std::size_t>(s) + 1];
      ga.middleRows(b, e - b).rowwise() += g.row(s) / T(e - b);
    }
  });
}

struct ConvGeometry {
  Eigen::Index batch = 1;
  Eigen::Index height = 1;
  Eigen::Index width = 1;
  Eigen::Index kernel = 3;
  Eigen::Index stride = 1;

  Eigen::Index pad() const { return kernel / 2; }
  Eigen::Index out_height() const { return (height + 2 * pad() - kernel) / stride + 1; }
  Eigen::Index out_width() const { return (width + 2 * pad() - kernel) / stride + 1; }
};

// Zero-padded 2-D convolution over NHWC rows: input (batch·H·W)×C_in,
// weight (k·k·C_in)×C_out with rows ordered (ky, kx, c_in), bias 1×C_out.
template <class T>
Var conv2d(Tape<T>& t, Var x, Var weight, Var bias, ConvGeometry geo) {
  const Mat<T>& xv = t.value(x);
  const Eigen::Index cin = xv.cols();
  const Eigen::Index k = geo.kernel, pad = geo.pad();
  const Eigen::Index ho = geo.out_height(), wo = geo.out_width();
  detail::require<T>(xv.rows() == geo.batch * geo.height * geo.width, "conv2d: input rows do not match geometry");
  detail::require<T>(t.value(weight).rows() == k * k * cin, "conv2d: weight rows do not match kernel·C_in");
  Mat<T> cols = Mat<T>::Zero(geo.batch * ho * wo, k * k * cin);
  for (Eigen::Index b = 0; b < geo.batch; ++b)
    for (Eigen::Index oy = 0; oy < ho; ++oy)
      for (Eigen::Index ox = 0; ox < wo; ++ox) {
        const Eigen::Index orow = (b * ho + oy) * wo + ox;
        for (Eigen::Index ky = 0; ky < k; ++ky) {
          const Eigen::Index iy = oy * geo.stride + ky - pad;
          if (iy < 0 || iy >= geo.height) continue;
          for (Eigen::Index kx = 0; kx < k; ++kx) {
            const Eigen::Index ix = ox * geo.stride + kx - pad;
            if (ix < 0 || ix >= geo.width) continue;
            cols.block(orow, (ky * k + kx) * cin, 1, cin) = xv.row((b * geo.height + iy) * geo.width + ix);
          }
        }
      }
  Mat<T> out = cols * t.value(weight);
  out.rowwise() += t.value(bias).row(0);
  bool ng = t.needs_grad(x) || t.needs_grad(weight) || t.needs_grad(bias);
  return t.push(std::move(out), ng, [x, weight, bias, geo, cin, cols = std::move(cols)](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    if (tp.needs_grad(bias)) tp.grad(bias) += g.colwise().sum();
    if (tp.needs_grad(weight)) tp.grad(weight).noalias() += cols.transpose() * g;
    if (!tp.needs_grad(x)) return;
    Mat<T> dcols = g * tp.value(weight).transpose();
    Mat<T>& gx = tp.grad(x);
    const Eigen::Index k = geo.kernel, pad = geo.pad(), ho = geo.out_height(), wo = geo.out_width();
    for (Eigen::Index b = 0; b < geo.batch; ++b)
      for (Eigen::Index oy = 0; oy < ho; ++oy)
        for (Eigen::Index ox = 0; ox < wo; ++ox) {
          const Eigen::Index orow = (b * ho + oy) * wo + ox;
          for (Eigen::Index ky = 0; ky < k; ++ky) {
            const Eigen::Index iy = oy * geo.stride + ky - pad;
            if (iy < 0 || iy >= geo.height) continue;
            for (Eigen::Index kx = 0; kx < k; ++kx) {
              const Eigen::Index ix = ox * geo.stride + kx - pad;
              if (ix < 0 || ix >= geo.width) continue;
              gx.row((b * geo.height + iy) * geo.width + ix) += dcols.block(orow, (ky * k + kx) * cin, 1, cin);
            }
          }
        }
  });
}

// Scaled dot-product attention over independent groups, without projections.
// Group g pairs query rows [q_off[g], q_off[g+1]) with key/value rows
// [kv_off[g], kv_off[g+1]). Columns are split into `heads` equal slices and
// each slice uses the 1/sqrt(d_head) scale.
template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::vector<Eigen::Index> q_off, std::vector<Eigen::Index> kv_off,
              Eigen::Index heads) {
  const Mat<T>& qv = t.value(q);
  const Mat<T>& kv = t.value(k);
  const Mat<T>& vv = t.value(v);
  detail::require<T>(qv.cols() == kv.cols() && kv.cols() == vv.cols(), "attention: width mismatch");
  detail::require<T>(kv.rows() == vv.rows(), "attention: key/value row mismatch");
  detail::require<T>(heads >= 1 && qv.cols() % heads == 0, "attention: width not divisible by heads");
  detail::require<T>(q_off.size() == kv_off.size() && q_off.size() >= 2, "attention: group offsets mismatch");
  detail::require<T>(q_off.back() == qv.rows() && kv_off.back() == kv.rows(), "attention: offsets do not cover input");
  const Eigen::Index groups = static_cast<Eigen::Index>(q_off.size()) - 1;
  const Eigen::Index dh = qv.cols() / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  Mat<T> out(qv.rows(), qv.cols());
  std::vector<Mat<T>> probs(static_cast<std::size_t>(groups * heads));
  for (Eigen::Index g = 0; g < groups; ++g) {
    const Eigen::Index qb = q_off[static_cast<std::size_t>(g)], qn = q_off[static_cast<std::size_t>(g) + 1] - qb;
    const Eigen::Index kb = kv_off[static_cast<std::size_t>(g)], kn = kv_off[static_cast<std::size_t>(g) + 1] - kb;
    detail::require<T>(kn >= 1, "attention: empty context group");
    for (Eigen::Index h = 0; h < heads; ++h) {
      Mat<T> s = (qv.block(qb, h * dh, qn, dh) * kv.block(kb, h * dh, kn, dh).transpose()) * sc;
      for (Eigen::Index i = 0; i < qn; ++i) {
        T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      out.block(qb, h * dh, qn, dh).noalias() = s * vv.block(kb, h * dh, kn, dh);
      probs[static_cast<std::size_t>(g * heads + h)] = std::move(s);
    }
  }
  bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
  return t.push(std::move(out), ng,
                [q, k, v, heads, dh, sc, q_off = std::move(q_off), kv_off = std::move(kv_off),
                 probs = std::move(probs)](Tape<T>& tp, std::size_t self) {
                  const Mat<T>& g = tp.grad(self);
                  const bool gq = tp.needs_grad(q), gk = tp.needs_grad(k), gv = tp.needs_grad(v);
                  const Eigen::Index groups = static_cast<Eigen::Index>(q_off.size()) - 1;
                  for (Eigen::Index gi = 0; gi < groups; ++gi) {
                    const auto gs = static_cast<std::size_t>(gi);
                    const Eigen::Index qb = q_off[gs], qn = q_off[gs + 1] - qb;
                    const Eigen::Index kb = kv_off[gs], kn = kv_off[gs + 1] - kb;
                    for (Eigen::Index h = 0; h < heads; ++h) {
                      const Mat<T>& p = probs[static_cast<std::size_t>(gi * heads + h)];
                      Mat<T> go = g.block(qb, h * dh, qn, dh);
                      if (gv) tp.grad(v).block(kb, h * dh, kn, dh).noalias() += p.transpose() * go;
                      if (!gq && !gk) continue;
                      Mat<T> dp = go * tp.value(v).block(kb, h * dh, kn, dh).transpose();
                      Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dp.array() * p.array()).rowwise().sum();
                      Mat<T> ds = (p.array() * (dp.colwise() - rs).array()) * sc;
                      if (gq) tp.grad(q).block(qb, h * dh, qn, dh).noalias() += ds * tp.value(k).block(kb, h * dh, kn, dh);
                      if (gk) tp.grad(k).block(kb, h * dh, kn, dh).noalias() += ds.transpose() * tp.value(q).block(qb, h * dh, qn, dh);
                    }
                  }
                });
}

// Per-part affine maps. Rows are [sample][part]; part j uses rows
// [j·d_in, (j+1)·d_in) of `weight` and row j of `bias`.
template <class T>
Var part_linear(Tape<T>& t, Var x, Var weight, Var bias, Eigen::Index parts) {
  const Mat<T>& xv = t.value(x);
  const Eigen::Index din = xv.cols();
  const Mat<T>& w = t.value(weight);
  detail::require<T>(parts >= 1 && xv.rows() % parts == 0, "part_linear: rows not divisible by parts");
  detail::require<T>(w.rows() == parts * din && t.value(bias).rows() == parts && t.value(bias).cols() == w.cols(),
                     "part_linear: weight shape mismatch");
  const Eigen::Index samples = xv.rows() / parts;
  Mat<T> out(xv.rows(), w.cols());
  for (Eigen::Index s = 0; s < samples; ++s)
    for (Eigen::Index j = 0; j < parts; ++j)
      out.row(s * parts + j).noalias() = xv.row(s * parts + j) * w.middleRows(j * din, din) + t.value(bias).row(j);
  bool ng = t.needs_grad(x) || t.needs_grad(weight) || t.needs_grad(bias);
  return t.push(std::move(out), ng, [x, weight, bias, parts, din, samples](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    const bool gx = tp.needs_grad(x), gw = tp.needs_grad(weight), gb = tp.needs_grad(bias);
    for (Eigen::Index s = 0; s < samples; ++s)
      for (Eigen::Index j = 0; j < parts; ++j) {
        const Eigen::Index r = s * parts + j;
        if (gb) tp.grad(bias).row(j) += g.row(r);
        if (gw) tp.grad(weight).middleRows(j * din, din).noalias() += tp.value(x).row(r).transpose() * g.row(r);
        if (gx) tp.grad(x).row(r).noalias() += g.row(r) * tp.value(weight).middleRows(j * din, din).transpose();
      }
  });
}

// Standardizes every column over the samples of a batch, separately per part
// (rows [sample][part]), using the batch's own mean and biased variance.
template <class T>
Var batch_standardize(Tape<T>& t, Var x, Eigen::Index parts, T eps = T(1e-5)) {
  const Mat<T>& xv = t.value(x);
  detail::require<T>(parts >= 1 && xv.rows() % parts == 0, "batch_standardize: rows not divisible by parts");
  const Eigen::Index samples = xv.rows() / parts, c = xv.cols();
  Mat<T> out(xv.rows(), c);
  Mat<T> inv_std(parts, c);
  for (Eigen::Index j = 0; j < parts; ++j) {
    Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>> rows(xv.data() + j * c, samples, c, Eigen::OuterStride<>(parts * c));
    const Eigen::Matrix<T, 1, Eigen::Dynamic> mu = rows.colwise().mean();
    const Eigen::Matrix<T, 1, Eigen::Dynamic> var = (rows.rowwise() - mu).array().square().colwise().mean();
    inv_std.row(j) = (var.array() + eps).rsqrt();
    for (Eigen::Index s = 0; s < samples; ++s)
      out.row(s * parts + j) = (xv.row(s * parts + j) - mu).cwiseProduct(inv_std.row(j));
  }
  Mat<T> y = out;
  return t.push(std::move(out), t.needs_grad(x), [x, parts, samples, c, y = std::move(y), inv_std = std::move(inv_std)](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    Mat<T>& gx = tp.grad(x);
    for (Eigen::Index j = 0; j < parts; ++j) {
      Eigen::Matrix<T, 1, Eigen::Dynamic> mg = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(c), mgy = mg;
      for (Eigen::Index s = 0; s < samples; ++s) {
        mg += g.row(s * parts + j);
        mgy += g.row(s * parts + j).cwiseProduct(y.row(s * parts + j));
      }
      mg /= T(samples);
      mgy /= T(samples);
      for (Eigen::Index s = 0; s < samples; ++s) {
        const Eigen::Index r = s * parts + j;
        gx.row(r) += (g.row(r) - mg - y.row(r).cwiseProduct(mgy)).cwiseProduct(inv_std.row(j));
      }
    }
  });
}

// Scalar Σ a∘w against a fixed weight matrix; used to reduce outputs to a loss.
template <class T>
Var weighted_sum(Tape<T>& t, Var a, Mat<T> w) {
  detail::require<T>(t.value(a).rows() == w.rows() && t.value(a).cols() == w.cols(), "weighted_sum: shape mismatch");
  Mat<T> out(1, 1);
  out(0, 0) = (t.value(a).array() * w.array()).sum();
  return t.push(std::move(out), t.needs_grad(a), [a, w = std::move(w)](Tape<T>& tp, std::size_t self) {
    tp.grad(a) += w * tp.grad(self)(0, 0);
  });
}

}  // namespace ops
}  // namespace emgait
