#pragma once

// Semantic-guided alignment of each modality against the part semantics, then
// symmetric cross-attention between the image token stream and the point
// stream.

#include <cmath>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/error.hpp"
#include "emgait/nn.hpp"

namespace emgait {

template <class T>
struct AttentionParams {
  Parameter<T>* wq = nullptr;  // d × d, heads laid out as consecutive column slices of width d_h
  Parameter<T>* wk = nullptr;
  Parameter<T>* wv = nullptr;
  Parameter<T>* wo = nullptr;  // (heads·d_h) × d; absent for the single-head alignment form
  int heads = 1;

  // value_gain scales the W_V init, so a residual branch can start small.
  static AttentionParams make(ParamStore<T>& store, const std::string& name, int width, int heads, bool output_proj,
                              std::mt19937_64& rng, double value_gain = 1.0) {
    if (heads < 1 || width % heads != 0) throw Error(ErrorCode::config, "attention width must be divisible by head count");
    const double s = 1.0 / std::sqrt(static_cast<double>(width));
    AttentionParams p;
    p.heads = heads;
    p.wq = &store.add(name + ".wq", width, width, s, rng);
    p.wk = &store.add(name + ".wk", width, width, s, rng);
    p.wv = &store.add(name + ".wv", width, width, s * value_gain, rng);
    if (output_proj) p.wo = &store.add(name + ".wo", width, width, s, rng);
    return p;
  }

  int width() const { return static_cast<int>(wq->value.rows()); }
  int head_width() const { return width() / heads; }
};

// Softmax(Q·Kᵀ/√d_h)·V per group and head with Q = query·W_Q, K = context·W_K,
// V = context·W_V, followed by W_O when present.
template <class T>
Var cross_attention(Tape<T>& t, Var query, Var context, std::vector<Eigen::Index> q_off, std::vector<Eigen::Index> kv_off,
                    const AttentionParams<T>& p) {
  if (t.value(query).cols() != p.width() || t.value(context).cols() != p.width())
    throw Error(ErrorCode::usage, "cross_attention: input width does not match projections");
  Var q = ops::matmul(t, query, t.leaf(*p.wq));
  Var k = ops::matmul(t, context, t.leaf(*p.wk));
  Var v = ops::matmul(t, context, t.leaf(*p.wv));
  Var o = ops::attention(t, q, k, v, std::move(q_off), std::move(kv_off), static_cast<Eigen::Index>(p.heads));
  return p.wo ? ops::matmul(t, o, t.leaf(*p.wo)) : o;
}

// Single-group convenience form on plain matrices.
template <class T>
Mat<T> cross_attention(const Mat<T>& query, const Mat<T>& context, const AttentionParams<T>& p) {
  Tape<T> t;
  Var out = cross_attention(t, t.constant(query), t.constant(context), {0, query.rows()}, {0, context.rows()}, p);
  return t.value(out);
}

inline std::vector<Eigen::Index> uniform_offsets(Eigen::Index groups, Eigen::Index size) {
  std::vector<Eigen::Index> off(static_cast<std::size_t>(groups) + 1);
  for (Eigen::Index g = 0; g <= groups; ++g) off[static_cast<std::size_t>(g)] = g * size;
  return off;
}

template <class T>
struct SgaBlock {
  AttentionParams<T> attn;
  LayerNormParams<T> norm1;
  Mlp2<T> ffn;
  LayerNormParams<T> norm2;

  static SgaBlock make(ParamStore<T>& store, const std::string& name, int width, std::mt19937_64& rng) {
    // Backbone features start far smaller than the mined semantics; a full
    // scale value path would let the normalized sum forget the spatial input.
    return SgaBlock{AttentionParams<T>::make(store, name + ".attn", width, 1, false, rng, 0.1),
                    LayerNormParams<T>::make(store, name + ".norm1", width), Mlp2<T>::make(store, name + ".ffn", width, width, width, rng),
                    LayerNormParams<T>::make(store, name + ".norm2", width)};
  }
};

// x̃ = LN(x + CA(x, t*)); out = LN(x̃ + FFN(x̃)). Group g of `features`
// attends to group g of `semantics`.
template <class T>
Var sga_align(Tape<T>& t, Var features, Var semantics, std::vector<Eigen::Index> feat_off, std::vector<Eigen::Index> sem_off,
              const SgaBlock<T>& b) {
  Var att = cross_attention(t, features, semantics, std::move(feat_off), std::move(sem_off), b.attn);
  Var x = b.norm1(t, ops::add(t, features, att));
  return b.norm2(t, ops::add(t, x, b.ffn(t, x)));
}

template <class T>
struct ScafLayer {
  AttentionParams<T> image_query;  // image tokens attend to points
  AttentionParams<T> point_query;  // points attend to image tokens; same storage when tied
  bool residual = true;

  bool tied() const { return image_query.wq == point_query.wq && image_query.wo == point_query.wo; }
};

template <class T>
std::pair<Var, Var> scaf_layer(Tape<T>& t, Var f2d, Var f3d, const std::vector<Eigen::Index>& off2d,
                               const std::vector<Eigen::Index>& off3d, const ScafLayer<T>& l) {
  if (t.value(f2d).cols() != t.value(f3d).cols()) throw Error(ErrorCode::usage, "scaf_layer: stream widths differ");
  Var img = cross_attention(t, f2d, f3d, off2d, off3d, l.image_query);
  Var pts = cross_attention(t, f3d, f2d, off3d, off2d, l.point_query);
  if (l.residual) {
    img = ops::add(t, f2d, img);
    pts = ops::add(t, f3d, pts);
  }
  return {img, pts};
}

struct FusionConfig {
  int heads = 4;
  int scaf_layers = 2;
  bool residual = true;
  bool tie_directions = true;
  bool tie_sga = false;
};

template <class T>
struct FusionStack {
  SgaBlock<T> sga_2d;
  SgaBlock<T> sga_3d;
  std::vector<ScafLayer<T>> scaf;

  static FusionStack make(ParamStore<T>& store, const FusionConfig& cfg, int width, bool with_sga, std::mt19937_64& rng) {
    FusionStack s;
    if (with_sga) {
      s.sga_2d = SgaBlock<T>::make(store, "fusion.sga_2d", width, rng);
      s.sga_3d = cfg.tie_sga ? s.sga_2d : SgaBlock<T>::make(store, "fusion.sga_3d", width, rng);
    }
    for (int i = 0; i < cfg.scaf_layers; ++i) {
      const std::string n = "fusion.scaf" + std::to_string(i);
      ScafLayer<T> l;
      l.residual = cfg.residual;
      l.image_query = AttentionParams<T>::make(store, n + ".attn", width, cfg.heads, true, rng);
      l.point_query = cfg.tie_directions ? l.image_query : AttentionParams<T>::make(store, n + ".attn_points", width, cfg.heads, true, rng);
      s.scaf.push_back(l);
    }
    return s;
  }
};

// Runs every SCAF layer in order; an empty stack is the identity.
template <class T>
std::pair<Var, Var> fuse(Tape<T>& t, Var f2d, Var f3d, const std::vector<Eigen::Index>& off2d,
                         const std::vector<Eigen::Index>& off3d, const FusionStack<T>& stack) {
  for (const auto& l : stack.scaf) std::tie(f2d, f3d) = scaf_layer(t, f2d, f3d, off2d, off3d, l);
  return {f2d, f3d};
}

}  // namespace emgait
