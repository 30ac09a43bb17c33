#pragma once

// Small in-memory datasets and model configs for tests that train.

#include <string>
#include <vector>

#include "emgait/emgait.hpp"

namespace emgait::testing {

inline ModelConfig tiny_model(int classes) {
  ModelConfig m;
  m.image = ResNet9Config{16, {4, 8, 8, 8}};
  m.points = GraphConvConfig{4, {8, 8}};
  m.semi.d_visual = 8;
  m.semi.d_text = 8;
  m.semi.visual_grid = 4;
  m.fusion.heads = 2;
  m.fusion.scaf_layers = 1;
  m.hpp_bins = {1, 2};
  m.num_classes = classes;
  m.ce_neck = "batch";
  return m;
}

inline DataConfig tiny_data() { return DataConfig{16, 24, 0}; }

// `ids` walkers × the given views at level 1, rendered and prepared in memory.
inline std::vector<PreparedSequence> tiny_sequences(int ids, std::vector<int> views, int frames, std::uint64_t noise = 0) {
  SynthConfig sc;
  sc.image_size = 16;
  sc.base_points = 48;
  std::vector<PreparedSequence> out;
  for (int i = 0; i < ids; ++i)
    for (int v : views) {
      GaitSequence g = render_sequence(generate_walker(walker_seed(3, i), sc),
                                       RenderSpec{v, 1, Condition::clean, frames, mix_seed({noise, static_cast<std::uint64_t>(i * 8 + v)})}, sc);
      g.identity = identity_label(i);
      g.seq_id = g.identity + "_v" + std::to_string(v);
      out.push_back(prepare_sequence(g, tiny_data()));
    }
  return out;
}

inline std::vector<int> labels_of(const std::vector<PreparedSequence>& seqs) {
  const auto cls = class_index(seqs);
  std::vector<int> y;
  for (const auto& s : seqs) y.push_back(cls.at(s.identity));
  return y;
}

inline TrainConfig tiny_train(int iters) {
  TrainConfig t;
  t.lr = 3e-3;
  t.weight_decay = 0;
  t.milestones = {};
  t.total_iters = iters;
  t.frames_per_seq = 2;
  t.P = 2;
  t.K = 2;
  return t;
}

}  // namespace emgait::testing
