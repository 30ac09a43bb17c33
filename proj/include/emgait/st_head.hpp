#pragma once

// Sequence-level aggregation: temporal max over image frames, spatial mean
// over points, bidirectional cross-attention between the two, and horizontal
// pyramid pooling into part embeddings.

#include <numeric>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/error.hpp"
#include "emgait/fusion.hpp"
#include "emgait/nn.hpp"

namespace emgait {

// seq2d rows ordered [sequence][frame][token] → [sequence][token].
template <class T>
Var temporal_maxpool(Tape<T>& t, Var seq2d, Eigen::Index sequences, Eigen::Index frames, Eigen::Index tokens) {
  if (frames < 1) throw Error(ErrorCode::usage, "temporal_maxpool: need at least one frame");
  return ops::group_max(t, seq2d, sequences, frames, tokens);
}

// Mean over the points of each frame; point_offsets delimit frames.
template <class T>
Var spatial_avgpool(Tape<T>& t, Var seq3d, std::vector<Eigen::Index> point_offsets) {
  return ops::segment_mean(t, seq3d, std::move(point_offsets));
}

template <class T>
struct StFusionParams {
  AttentionParams<T> points_query;  // frame descriptors attend to the temporal grid
  AttentionParams<T> grid_query;    // grid cells attend to refined frame descriptors
  Mlp2<T> mlp;

  // hidden = 0 picks the width (random init) or twice the width (identity init).
  static StFusionParams make(ParamStore<T>& store, int width, std::mt19937_64& rng, int hidden = 0, bool identity_mlp = false) {
    if (hidden <= 0) hidden = identity_mlp ? 2 * width : width;
    // Small value paths: frame descriptors drift with range and density, so
    // the cross terms start as a light correction to the temporal grid.
    StFusionParams p{AttentionParams<T>::make(store, "st.ca_sp", width, 1, false, rng, 0.1),
                     AttentionParams<T>::make(store, "st.ca_tp", width, 1, false, rng, 0.1),
                     Mlp2<T>::make(store, "st.mlp", width, hidden, width, rng)};
    if (identity_mlp) p.mlp.init_identity();
    return p;
  }
};

// F̃_sp = CA(F_sp, F_tp) + F_sp; out = MLP(CA(F_tp, F̃_sp) + F_tp).
// f_tp: (S·hw)×d, f_sp: (S·n)×d. Returns (S·hw)×d.
template <class T>
Var st_fuse(Tape<T>& t, Var f_tp, Var f_sp, Eigen::Index sequences, Eigen::Index tokens, Eigen::Index frames,
            const StFusionParams<T>& p) {
  const auto grid_off = uniform_offsets(sequences, tokens);
  const auto frame_off = uniform_offsets(sequences, frames);
  Var sp = ops::add(t, cross_attention(t, f_sp, f_tp, frame_off, grid_off, p.points_query), f_sp);
  Var tp = ops::add(t, cross_attention(t, f_tp, sp, grid_off, frame_off, p.grid_query), f_tp);
  return p.mlp(t, tp);
}

template <class T>
struct HppHead {
  std::vector<int> bins{1, 2, 4};
  Parameter<T>* weight = nullptr;  // (p·d)×d, one affine map per part
  Parameter<T>* bias = nullptr;    // p×d

  int parts() const { return std::accumulate(bins.begin(), bins.end(), 0); }

  static HppHead make(ParamStore<T>& store, std::vector<int> bins, int width, std::mt19937_64& rng) {
    HppHead h;
    h.bins = std::move(bins);
    if (h.bins.empty()) throw Error(ErrorCode::config, "hpp: bin list is empty");
    for (int b : h.bins)
      if (b < 1) throw Error(ErrorCode::config, "hpp: bin counts must be >= 1");
    h.weight = &store.add("hpp.heads.weight", static_cast<Eigen::Index>(h.parts()) * width, width,
                          1.0 / std::sqrt(static_cast<double>(width)), rng);
    h.bias = &store.add("hpp.heads.bias", h.parts(), width, 0.0, rng);
    return h;
  }
};

// Unprojected strip pooling: for each bin count b, b horizontal strips, each
// pooled as max + mean over its cells. Rows ordered [sequence][part].
template <class T>
Var hpp_pool(Tape<T>& t, Var fused, Eigen::Index sequences, Eigen::Index height, Eigen::Index width,
             const std::vector<int>& bins) {
  std::vector<Var> per_bin;
  for (int b : bins) {
    if (b < 1 || height % b != 0)
      throw Error(ErrorCode::config, "hpp: bin count " + std::to_string(b) + " does not divide grid height " + std::to_string(height));
    const Eigen::Index strip = (height / b) * width;
    Var mx = ops::group_max(t, fused, sequences * b, strip, 1);
    Var mean = ops::segment_mean(t, fused, uniform_offsets(sequences * b, strip));
    per_bin.push_back(ops::add(t, mx, mean));
  }
  const Eigen::Index parts = std::accumulate(bins.begin(), bins.end(), Eigen::Index{0});
  std::vector<Eigen::Index> order;
  order.reserve(static_cast<std::size_t>(sequences * parts));
  for (Eigen::Index s = 0; s < sequences; ++s) {
    Eigen::Index base = 0;
    for (int b : bins) {
      for (Eigen::Index i = 0; i < b; ++i) order.push_back(base + s * b + i);
      base += sequences * b;
    }
  }
  return ops::gather_rows(t, ops::concat_rows(t, per_bin), std::move(order));
}

template <class T>
Var hpp(Tape<T>& t, Var fused, Eigen::Index sequences, Eigen::Index height, Eigen::Index width, const HppHead<T>& head) {
  Var pooled = hpp_pool(t, fused, sequences, height, width, head.bins);
  return ops::part_linear(t, pooled, t.leaf(*head.weight), t.leaf(*head.bias), head.parts());
}

}  // namespace emgait
