#pragma once

// Per-frame unimodal encoders: a 9-conv residual CNN for images and a stack
// of dynamic-graph edge convolutions for point clouds.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/data.hpp"
#include "emgait/error.hpp"
#include "emgait/nn.hpp"

namespace emgait {

// h×w×d grid stored as (h·w)×d rows in row-major spatial order.
template <class T>
struct FeatureMap2D {
  int height = 0;
  int width = 0;
  Mat<T> grid;
};

template <class T>
struct PointFeatureSet {
  Mat<T> features;  // N×d
  Mat<T> coords;    // N×3
};

// ---------------------------------------------------------------------------
// Image backbone

struct ResNet9Config {
  int input_size = 64;
  std::array<int, 4> channels{16, 32, 64, 64};  // per stage; the last is the model width d
};

template <class T>
class ResNet9 {
 public:
  struct Conv {
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
    int kernel = 3;
    int stride = 1;
  };
  struct Block {
    Conv first, second, shortcut;
    bool has_shortcut = false;
  };

  ResNet9() = default;
  ResNet9(ParamStore<T>& store, const std::string& name, const ResNet9Config& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    stem_ = make_conv(store, name + ".stem", 3, cfg.channels[0], 3, 1, rng, std::sqrt(2.0));
    const std::array<int, 4> strides{1, 2, 2, 1};
    int cin = cfg.channels[0];
    for (int s = 0; s < 4; ++s) {
      const int cout = cfg.channels[static_cast<std::size_t>(s)];
      const std::string bn = name + ".stage" + std::to_string(s + 1);
      Block b;
      b.first = make_conv(store, bn + ".conv1", cin, cout, 3, strides[static_cast<std::size_t>(s)], rng, std::sqrt(2.0));
      b.second = make_conv(store, bn + ".conv2", cout, cout, 3, 1, rng, 0.5);
      if (cin != cout || strides[static_cast<std::size_t>(s)] != 1) {
        b.has_shortcut = true;
        b.shortcut = make_conv(store, bn + ".shortcut", cin, cout, 1, strides[static_cast<std::size_t>(s)], rng, 1.0);
      }
      blocks_[static_cast<std::size_t>(s)] = b;
      cin = cout;
    }
  }

  int width() const { return cfg_.channels[3]; }
  static int output_size(int input) { return ((input + 1) / 2 + 1) / 2; }

  // images: (batch·H·W)×3 with H = W = input size. Returns (batch·h·w)×d.
  Var forward(Tape<T>& t, Var images, Eigen::Index batch) const {
    const Eigen::Index size = cfg_.input_size;
    if (size < 4) throw Error(ErrorCode::usage, "image backbone: input smaller than the stride-4 budget");
    if (t.value(images).rows() != batch * size * size || t.value(images).cols() != 3)
      throw Error(ErrorCode::usage, "image backbone: input is not batch×" + std::to_string(size) + "×" +
                                        std::to_string(size) + "×3");
    Eigen::Index hw = size;
    Var x = apply(t, stem_, images, batch, hw);
    x = ops::leaky_relu(t, x, T(kLeakySlope));
    for (const Block& b : blocks_) {
      Eigen::Index hw_out = hw;
      Var y = apply(t, b.first, x, batch, hw, &hw_out);
      y = ops::leaky_relu(t, y, T(kLeakySlope));
      y = apply(t, b.second, y, batch, hw_out);
      Var skip = b.has_shortcut ? apply(t, b.shortcut, x, batch, hw) : x;
      x = ops::leaky_relu(t, ops::add(t, y, skip), T(kLeakySlope));
      hw = hw_out;
    }
    return x;
  }

 private:
  static Conv make_conv(ParamStore<T>& store, const std::string& name, int cin, int cout, int k, int stride,
                        std::mt19937_64& rng, double gain) {
    Conv c;
    c.kernel = k;
    c.stride = stride;
    c.weight = &store.add(name + ".weight", k * k * cin, cout, gain / std::sqrt(static_cast<double>(k * k * cin)), rng);
    c.bias = &store.add(name + ".bias", 1, cout, 0.0, rng);
    return c;
  }

  static Var apply(Tape<T>& t, const Conv& c, Var x, Eigen::Index batch, Eigen::Index hw, Eigen::Index* hw_out = nullptr) {
    ops::ConvGeometry g{batch, hw, hw, c.kernel, c.stride};
    if (hw_out) *hw_out = g.out_height();
    return ops::conv2d(t, x, t.leaf(*c.weight), t.leaf(*c.bias), g);
  }

  ResNet9Config cfg_;
  Conv stem_;
  std::array<Block, 4> blocks_;
};

template <class T>
Mat<T> frame_to_rows(const RgbFrame& f) {
  Mat<T> m(static_cast<Eigen::Index>(f.height) * f.width, 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (int c = 0; c < 3; ++c) m(i, c) = T(f.pixels[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(c)]);
  return m;
}

template <class T>
FeatureMap2D<T> extract_2d(const ResNet9<T>& net, const RgbFrame& frame, int input_size) {
  if (frame.height != input_size || frame.width != input_size)
    throw Error(ErrorCode::usage, "extract_2d: frame must be resized to the configured input size first");
  Tape<T> t;
  Var out = net.forward(t, t.constant(frame_to_rows<T>(frame)), 1);
  const int s = ResNet9<T>::output_size(input_size);
  return FeatureMap2D<T>{s, s, t.value(out)};
}

// ---------------------------------------------------------------------------
// Point backbone

template <class T>
T cosine_similarity(const Eigen::Ref<const Mat<T>>& a, const Eigen::Ref<const Mat<T>>& b) {
  const T na = a.norm(), nb = b.norm();
  if (na == T(0) || nb == T(0)) return T(0);
  return a.cwiseProduct(b).sum() / (na * nb);
}

// For each row, the k most cosine-similar other rows (ties → lowest index).
// k is clamped to N − 1.
template <class T>
std::vector<std::vector<Eigen::Index>> knn_cosine(const Mat<T>& features, int k) {
  const Eigen::Index n = features.rows();
  if (n < 2) throw Error(ErrorCode::degenerate, "knn_cosine: need at least 2 points");
  const Eigen::Index kk = std::min<Eigen::Index>(std::max(k, 1), n - 1);
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = features.rowwise().norm();
  Mat<T> unit = features;
  for (Eigen::Index i = 0; i < n; ++i) unit.row(i) = norms(i) > T(0) ? Mat<T>(features.row(i) / norms(i)) : Mat<T>::Zero(1, features.cols());
  const Mat<T> sim = unit * unit.transpose();
  std::vector<std::vector<Eigen::Index>> out(static_cast<std::size_t>(n));
  // Insertion into a sorted window of size kk; scanning j upward makes the
  // strict comparison keep the lower index on ties.
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& best = out[static_cast<std::size_t>(i)];
    best.reserve(static_cast<std::size_t>(kk));
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const T s = sim(i, j);
      if (static_cast<Eigen::Index>(best.size()) == kk && !(s > sim(i, best.back()))) continue;
      if (static_cast<Eigen::Index>(best.size()) == kk) best.pop_back();
      auto pos = best.end();
      while (pos != best.begin() && s > sim(i, *(pos - 1))) --pos;
      best.insert(pos, j);
    }
  }
  return out;
}

// Edge (k, u) → [coord_u − coord_k, feat_k, feat_u]; rows ordered [point][neighbor].
template <class T>
Mat<T> edge_features(const Mat<T>& coords, const Mat<T>& features, const std::vector<std::vector<Eigen::Index>>& neighbors) {
  const Eigen::Index d = features.cols();
  Eigen::Index rows = 0;
  for (const auto& nb : neighbors) rows += static_cast<Eigen::Index>(nb.size());
  Mat<T> out(rows, 3 + 2 * d);
  Eigen::Index r = 0;
  for (std::size_t k = 0; k < neighbors.size(); ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    for (Eigen::Index u : neighbors[k]) {
      if (u < 0 || u >= coords.rows()) throw Error(ErrorCode::usage, "edge_features: neighbor index out of range");
      out.block(r, 0, 1, 3) = coords.row(u) - coords.row(ki);
      out.block(r, 3, 1, d) = features.row(ki);
      out.block(r, 3 + d, 1, d) = features.row(u);
      ++r;
    }
  }
  return out;
}

template <class T>
struct GraphConvLayer {
  Parameter<T>* w1 = nullptr;  // (3 + 2·d_in) × hidden, row blocks [Δcoord | center | neighbor]
  Parameter<T>* b1 = nullptr;
  Parameter<T>* w2 = nullptr;  // hidden × d_out
  Parameter<T>* b2 = nullptr;
  int d_in = 3;
  int d_out = 32;

  static GraphConvLayer make(ParamStore<T>& store, const std::string& name, int din, int dout, std::mt19937_64& rng) {
    GraphConvLayer l;
    l.d_in = din;
    l.d_out = dout;
    l.w1 = &store.add(name + ".mlp.0.weight", 3 + 2 * din, dout, std::sqrt(2.0 / (3 + 2 * din)), rng);
    l.b1 = &store.add(name + ".mlp.0.bias", 1, dout, 0.0, rng);
    l.w2 = &store.add(name + ".mlp.1.weight", dout, dout, 1.0 / std::sqrt(static_cast<double>(dout)), rng);
    l.b2 = &store.add(name + ".mlp.1.bias", 1, dout, 0.0, rng);
    return l;
  }
};

struct GraphConvConfig {
  int k = 8;
  std::vector<int> channels{32, 64, 64};  // per layer; the last is the model width d
};

// Neighbor lists over a batch of clouds (row ranges given by offsets), as
// global row indices, k per point. Clouds with fewer than k + 1 points repeat
// their last neighbor, which leaves the max aggregation unchanged.
template <class T>
std::vector<Eigen::Index> batched_neighbors(const Mat<T>& features, const std::vector<Eigen::Index>& offsets, int k) {
  std::vector<Eigen::Index> out;
  out.reserve(static_cast<std::size_t>(features.rows() * k));
  for (std::size_t f = 0; f + 1 < offsets.size(); ++f) {
    const Eigen::Index b = offsets[f], n = offsets[f + 1] - b;
    if (n < 2) throw Error(ErrorCode::degenerate, "degenerate cloud: need at least 2 points per frame");
    const auto nb = knn_cosine<T>(features.middleRows(b, n), k);
    for (const auto& row : nb)
      for (int j = 0; j < k; ++j) out.push_back(b + row[std::min<std::size_t>(static_cast<std::size_t>(j), row.size() - 1)]);
  }
  return out;
}

// One edge convolution: per point, max over its neighbors of MLP(edge).
// The first affine layer is split by edge block and applied per point before
// gathering, which equals applying it to the concatenated edge vector.
template <class T>
Var graph_conv_layer(Tape<T>& t, Var coords, Var features, const std::vector<Eigen::Index>& offsets, int k,
                     const GraphConvLayer<T>& layer) {
  const Eigen::Index din = t.value(features).cols();
  if (din != layer.d_in) throw Error(ErrorCode::usage, "graph_conv_layer: feature width mismatch");
  const std::vector<Eigen::Index> nb = batched_neighbors(t.value(features), offsets, k);
  std::vector<Eigen::Index> center(nb.size());
  for (std::size_t i = 0; i < center.size(); ++i) center[i] = static_cast<Eigen::Index>(i) / k;
  Var w1 = t.leaf(*layer.w1);
  Var w_delta = ops::slice_rows(t, w1, 0, 3);
  Var w_center = ops::slice_rows(t, w1, 3, din);
  Var w_neigh = ops::slice_rows(t, w1, 3 + din, din);
  Var c_delta = ops::matmul(t, coords, w_delta);
  Var from_neighbor = ops::add(t, c_delta, ops::matmul(t, features, w_neigh));
  Var from_center = ops::sub(t, ops::matmul(t, features, w_center), c_delta);
  Var h = ops::add(t, ops::gather_rows(t, from_neighbor, nb), ops::gather_rows(t, from_center, std::move(center)));
  h = ops::leaky_relu(t, ops::add_row(t, h, t.leaf(*layer.b1)), T(kLeakySlope));
  h = ops::add_row(t, ops::matmul(t, h, t.leaf(*layer.w2)), t.leaf(*layer.b2));
  return ops::group_max(t, h, t.value(features).rows(), k, 1);
}

template <class T>
class PointBackbone {
 public:
  PointBackbone() = default;
  PointBackbone(ParamStore<T>& store, const std::string& name, const GraphConvConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    int din = 3;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      layers_.push_back(GraphConvLayer<T>::make(store, name + ".layer" + std::to_string(i), din, cfg.channels[i], rng));
      din = cfg.channels[i];
    }
  }

  int width() const { return cfg_.channels.empty() ? 3 : cfg_.channels.back(); }
  const std::vector<GraphConvLayer<T>>& layers() const { return layers_; }

  // coords: (Σ N_f)×3 for a batch of clouds split by offsets. Features start
  // as the coordinates; each layer rebuilds the neighbor graph from them.
  Var forward(Tape<T>& t, Var coords, const std::vector<Eigen::Index>& offsets) const {
    Var f = coords;
    for (const auto& l : layers_) f = graph_conv_layer(t, coords, f, offsets, cfg_.k, l);
    return f;
  }

 private:
  GraphConvConfig cfg_;
  std::vector<GraphConvLayer<T>> layers_;
};

template <class T>
PointFeatureSet<T> extract_3d(const PointBackbone<T>& net, const PointCloudFrame& cloud) {
  if (cloud.coords.rows() < 2) throw Error(ErrorCode::degenerate, "degenerate cloud: need at least 2 points");
  Tape<T> t;
  Mat<T> c = cloud.coords.template cast<T>();
  Var out = net.forward(t, t.constant(c), {0, c.rows()});
  return PointFeatureSet<T>{t.value(out), c};
}

}  // namespace emgait
