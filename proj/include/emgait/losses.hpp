#pragma once

// Metric-learning objective on part embeddings: batch-all triplet loss per
// part, per-part softmax cross-entropy, and their weighted sum.

#include <cmath>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/error.hpp"

namespace emgait {

struct LossConfig {
  double alpha = 1.0;  // triplet weight
  double beta = 2.0;   // cross-entropy weight
  double margin = 0.2;
  double ce_label_smoothing = 0.0;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw Error(ErrorCode::config, "loss weights alpha and beta must be >= 0");
    if (!(margin >= 0.0)) throw Error(ErrorCode::config, "triplet margin must be >= 0");
    if (!(ce_label_smoothing >= 0.0 && ce_label_smoothing < 1.0))
      throw Error(ErrorCode::config, "ce_label_smoothing must be in [0, 1)");
  }
};

struct TripletStats {
  double loss = 0.0;
  long active = 0;  // triplets with positive hinge, summed over parts
  long total = 0;
  bool single_identity = false;
};

namespace ops {

// Rows of `x` are [sample][part]. For each part: all (a, p, n) with
// label(a) = label(p), a ≠ p, label(n) ≠ label(a); hinge on Euclidean
// distances; mean over triplets with positive hinge (0 if none). The result
// is the mean over parts.
template <class T>
Var triplet_loss(Tape<T>& t, Var x, const std::vector<int>& labels, Eigen::Index parts, T margin,
                 TripletStats* stats = nullptr) {
  const Mat<T>& xv = t.value(x);
  const auto b = static_cast<Eigen::Index>(labels.size());
  detail::require<T>(parts >= 1 && xv.rows() == b * parts, "triplet_loss: rows must equal batch × parts");
  const Eigen::Index d = xv.cols();
  TripletStats st;
  st.single_identity = true;
  for (Eigen::Index i = 1; i < b; ++i) st.single_identity = st.single_identity && labels[static_cast<std::size_t>(i)] == labels[0];

  // Per part: pairwise distances, then the coefficient every active triplet
  // contributes to ∂L/∂d_ij.
  Mat<T> coef = Mat<T>::Zero(parts * b, b);
  std::vector<Mat<T>> dist(static_cast<std::size_t>(parts));
  T total = 0;
  for (Eigen::Index p = 0; p < parts; ++p) {
    Mat<T>& dm = dist[static_cast<std::size_t>(p)];
    dm.resize(b, b);
    for (Eigen::Index i = 0; i < b; ++i)
      for (Eigen::Index j = 0; j < b; ++j) dm(i, j) = (xv.row(i * parts + p) - xv.row(j * parts + p)).norm();
    T sum = 0;
    long active = 0;
    Mat<T> c = Mat<T>::Zero(b, b);
    for (Eigen::Index a = 0; a < b; ++a)
      for (Eigen::Index q = 0; q < b; ++q) {
        if (q == a || labels[static_cast<std::size_t>(q)] != labels[static_cast<std::size_t>(a)]) continue;
        for (Eigen::Index n = 0; n < b; ++n) {
          if (labels[static_cast<std::size_t>(n)] == labels[static_cast<std::size_t>(a)]) continue;
          ++st.total;
          const T h = dm(a, q) - dm(a, n) + margin;
          if (h > T(0)) {
            sum += h;
            ++active;
            c(a, q) += T(1);
            c(a, n) -= T(1);
          }
        }
      }
    st.active += active;
    if (active > 0) {
      total += sum / T(active);
      coef.middleRows(p * b, b) = c / T(active);
    }
  }
  total /= T(parts);
  st.loss = static_cast<double>(total);
  if (stats) *stats = st;
  Mat<T> out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), t.needs_grad(x),
                [x, parts, b, d, coef = std::move(coef), dist = std::move(dist)](Tape<T>& tp, std::size_t self) {
                  const T g = tp.grad(self)(0, 0) / T(parts);
                  const Mat<T>& xv = tp.value(x);
                  Mat<T>& gx = tp.grad(x);
                  Eigen::Matrix<T, 1, Eigen::Dynamic> diff(d);
                  for (Eigen::Index p = 0; p < parts; ++p)
                    for (Eigen::Index i = 0; i < b; ++i)
                      for (Eigen::Index j = 0; j < b; ++j) {
                        const T c = coef(p * b + i, j);
                        const T dij = dist[static_cast<std::size_t>(p)](i, j);
                        if (c == T(0) || dij == T(0)) continue;
                        diff = (xv.row(i * parts + p) - xv.row(j * parts + p)) * (g * c / dij);
                        gx.row(i * parts + p) += diff;
                        gx.row(j * parts + p) -= diff;
                      }
                });
}

// Softmax cross-entropy averaged over all rows of `logits`; row r belongs to
// sample r / parts. Label smoothing ε mixes the one-hot target with uniform.
template <class T>
Var cross_entropy(Tape<T>& t, Var logits, const std::vector<int>& labels, Eigen::Index parts, T smoothing = T(0)) {
  const Mat<T>& z = t.value(logits);
  const Eigen::Index rows = z.rows(), classes = z.cols();
  detail::require<T>(parts >= 1 && rows == static_cast<Eigen::Index>(labels.size()) * parts,
                     "cross_entropy: rows must equal batch × parts");
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw Error(ErrorCode::usage, "cross_entropy: label " + std::to_string(y) + " outside classifier range [0, " +
                                        std::to_string(classes) + ")");
  Mat<T> prob(rows, classes);
  Mat<T> target = Mat<T>::Constant(rows, classes, smoothing / T(classes));
  T loss = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mx = z.row(r).maxCoeff();
    prob.row(r) = (z.row(r).array() - mx).exp();
    const T s = prob.row(r).sum();
    prob.row(r) /= s;
    const T lse = mx + std::log(s);
    target(r, labels[static_cast<std::size_t>(r / parts)]) += T(1) - smoothing;
    loss += (target.row(r).array() * (lse - z.row(r).array())).sum();
  }
  Mat<T> out(1, 1);
  out(0, 0) = loss / T(rows);
  return t.push(std::move(out), t.needs_grad(logits),
                [logits, rows, prob = std::move(prob), target = std::move(target)](Tape<T>& tp, std::size_t self) {
                  tp.grad(logits) += (prob - target) * (tp.grad(self)(0, 0) / T(rows));
                });
}

}  // namespace ops

template <class T>
struct LossBreakdown {
  Var total;
  double triplet = 0.0;
  double ce = 0.0;
  double value = 0.0;
  TripletStats stats;
};

// L = α·L_tri + β·L_ce. `logits` may be omitted when β = 0.
template <class T>
LossBreakdown<T> combined_loss(Tape<T>& t, Var parts_embed, const Var* logits, const std::vector<int>& labels,
                               Eigen::Index parts, const LossConfig& cfg) {
  LossBreakdown<T> out;
  Var tri = ops::triplet_loss(t, parts_embed, labels, parts, T(cfg.margin), &out.stats);
  out.triplet = static_cast<double>(t.value(tri)(0, 0));
  Var total = ops::scale(t, tri, T(cfg.alpha));
  if (logits) {
    Var ce = ops::cross_entropy(t, *logits, labels, parts, T(cfg.ce_label_smoothing));
    out.ce = static_cast<double>(t.value(ce)(0, 0));
    total = ops::add(t, total, ops::scale(t, ce, T(cfg.beta)));
  } else if (cfg.beta != 0.0) {
    throw Error(ErrorCode::usage, "combined_loss: beta > 0 needs classifier logits");
  }
  out.total = total;
  out.value = static_cast<double>(t.value(total)(0, 0));
  return out;
}

}  // namespace emgait
