// Central-difference gradient checks in double precision, for every op and
// every trainable block, on several random instances each.

#include <gtest/gtest.h>

#include "emgait/emgait.hpp"
#include "support.hpp"

namespace {

using namespace emgait;
using emgait::testing::grad_check;
using emgait::testing::project;
using emgait::testing::random_mat;

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;
constexpr int kInstances = 3;

Parameter<double>& input(ParamStore<double>& s, const std::string& name, Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  Parameter<double>& p = s.add(name, r, c, 1.0, rng);
  return p;
}

#define EXPECT_GRAD_OK(rep) EXPECT_LT((rep).max_rel, kTol) << (rep).worst

TEST(OpGradients, MatmulAddSubScale) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(100 + inst);
    ParamStore<double> s;
    auto& a = input(s, "a", 4, 3, rng);
    auto& b = input(s, "b", 3, 5, rng);
    auto& c = input(s, "c", 4, 5, rng);
    auto& r = input(s, "r", 1, 5, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) {
      Var y = ops::matmul(t, t.leaf(a), t.leaf(b));
      y = ops::sub(t, ops::add(t, y, t.leaf(c)), ops::scale(t, t.leaf(c), 0.3));
      y = ops::add_row(t, y, t.leaf(r));
      y = ops::scale_rows(t, y, std::vector<double>{1.0, -2.0, 0.5, 3.0});
      return project(t, y, 7);
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(OpGradients, LeakyReluAndLayerNorm) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(200 + inst);
    ParamStore<double> s;
    auto& x = input(s, "x", 5, 6, rng);
    auto& g = input(s, "gamma", 1, 6, rng);
    auto& b = input(s, "beta", 1, 6, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) {
      Var y = ops::layer_norm(t, ops::leaky_relu(t, t.leaf(x), 0.1), t.leaf(g), t.leaf(b));
      return project(t, y, 3);
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(OpGradients, RowOps) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(300 + inst);
    ParamStore<double> s;
    auto& x = input(s, "x", 6, 3, rng);
    auto& y = input(s, "y", 2, 3, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) {
      Var a = ops::gather_rows(t, t.leaf(x), {5, 0, 0, 3, 2});
      Var b = ops::scatter_rows(t, a, t.leaf(y), {1, 4});
      Var c = ops::concat_rows(t, {b, ops::slice_rows(t, t.leaf(x), 2, 3)});
      Var m = ops::group_max(t, c, 2, 2, 2);
      Var mean = ops::segment_mean(t, c, {0, 3, 8});
      return ops::add(t, project(t, m, 1), project(t, mean, 2));
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(OpGradients, Conv2d) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(400 + inst);
    ParamStore<double> s;
    auto& x = input(s, "x", 2 * 5 * 5, 2, rng);
    auto& w = input(s, "w", 9 * 2, 3, rng);
    auto& b = input(s, "b", 1, 3, rng);
    const Eigen::Index stride = inst == 0 ? 1 : 2;
    auto rep = grad_check(s, [&](Tape<double>& t) {
      return project(t, ops::conv2d(t, t.leaf(x), t.leaf(w), t.leaf(b), ops::ConvGeometry{2, 5, 5, 3, stride}), 5);
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(OpGradients, GroupedAttention) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(500 + inst);
    ParamStore<double> s;
    auto& q = input(s, "q", 5, 4, rng);
    auto& k = input(s, "k", 7, 4, rng);
    auto& v = input(s, "v", 7, 4, rng);
    const Eigen::Index heads = inst == 0 ? 1 : 2;
    auto rep = grad_check(s, [&](Tape<double>& t) {
      return project(t, ops::attention(t, t.leaf(q), t.leaf(k), t.leaf(v), {0, 2, 5}, {0, 4, 7}, heads), 9);
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(OpGradients, PartLinear) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(600 + inst);
    ParamStore<double> s;
    auto& x = input(s, "x", 3 * 4, 5, rng);
    auto& w = input(s, "w", 4 * 5, 2, rng);
    auto& b = input(s, "b", 4, 2, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) { return project(t, ops::part_linear(t, t.leaf(x), t.leaf(w), t.leaf(b), 4), 11); });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(OpGradients, BatchStandardize) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(650 + inst);
    ParamStore<double> s;
    auto& x = input(s, "x", 4 * 3, 5, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) { return project(t, ops::batch_standardize(t, t.leaf(x), 3), 12); });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(LossGradients, TripletAndCrossEntropy) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(700 + inst);
    ParamStore<double> s;
    auto& x = input(s, "x", 6 * 2, 3, rng);
    auto& z = input(s, "z", 6 * 2, 4, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    auto rep = grad_check(s, [&](Tape<double>& t) {
      Var tri = ops::triplet_loss(t, t.leaf(x), labels, 2, 0.5);
      Var ce = ops::cross_entropy(t, t.leaf(z), labels, 2, inst == 2 ? 0.1 : 0.0);
      return ops::add(t, tri, ce);
    });
    EXPECT_GRAD_OK(rep);
  }
}

// ---------------------------------------------------------------------------
// Blocks

TEST(BlockGradients, GraphConv) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(800 + inst);
    ParamStore<double> s;
    auto layer = GraphConvLayer<double>::make(s, "gc", 3, 4, rng);
    auto layer2 = GraphConvLayer<double>::make(s, "gc2", 4, 4, rng);
    const Mat<double> coords = random_mat(2 * 7, 3, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) {
      Var c = t.constant(coords);
      Var f = graph_conv_layer(t, c, c, {0, 7, 14}, 3, layer);
      f = graph_conv_layer(t, c, f, {0, 7, 14}, 3, layer2);
      return project(t, f, 13);
    }, kStep, 24, 1e-4, inst);
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, ImageBackbone) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(900 + inst);
    ParamStore<double> s;
    ResNet9<double> net(s, "img", ResNet9Config{8, {2, 3, 4, 4}}, rng);
    const Mat<double> x = random_mat(2 * 64, 3, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) { return project(t, net.forward(t, t.constant(x), 2), 17); }, kStep, 12);
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, SemanticGuidedAlignment) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(1000 + inst);
    ParamStore<double> s;
    auto blk = SgaBlock<double>::make(s, "sga", 4, rng);
    const Mat<double> f = random_mat(6, 4, rng);
    const Mat<double> sem = random_mat(10, 4, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) {
      return project(t, sga_align(t, t.constant(f), t.constant(sem), {0, 2, 6}, {0, 5, 10}, blk), 19);
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, SymmetricCrossAttentionFusion) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(1100 + inst);
    ParamStore<double> s;
    FusionConfig cfg;
    cfg.heads = 2;
    cfg.scaf_layers = 2;
    cfg.tie_directions = inst != 1;
    auto stack = FusionStack<double>::make(s, cfg, 4, false, rng);
    const Mat<double> a = random_mat(6, 4, rng);
    const Mat<double> b = random_mat(5, 4, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) {
      auto [x, y] = fuse(t, t.constant(a), t.constant(b), {0, 3, 6}, {0, 2, 5}, stack);
      return ops::add(t, project(t, x, 23), project(t, y, 29));
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, SpatioTemporalFusion) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(1200 + inst);
    ParamStore<double> s;
    auto st = StFusionParams<double>::make(s, 4, rng, 0, inst == 2);
    const Mat<double> seq2d = random_mat(2 * 3 * 4, 4, rng);  // S=2, n=3, hw=4
    const Mat<double> seq3d = random_mat(2 * 3 * 5, 4, rng);  // 5 points per frame
    auto rep = grad_check(s, [&](Tape<double>& t) {
      Var tp = temporal_maxpool(t, t.constant(seq2d), 2, 3, 4);
      Var sp = spatial_avgpool(t, t.constant(seq3d), uniform_offsets(6, 5));
      return project(t, st_fuse(t, tp, sp, 2, 4, 3, st), 31);
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, HorizontalPyramidHeads) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(1300 + inst);
    ParamStore<double> s;
    auto head = HppHead<double>::make(s, {1, 2, 4}, 3, rng);
    const Mat<double> grid = random_mat(2 * 4 * 4, 3, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) { return project(t, hpp(t, t.constant(grid), 2, 4, 4, head), 37); });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, InversionNetAndAdapter) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(1400 + inst);
    ParamStore<double> s;
    SemiConfig cfg;
    cfg.d_visual = 6;
    cfg.d_text = 5;
    cfg.visual_grid = 2;
    cfg.stub_seed = 40 + static_cast<std::uint64_t>(inst);
    SemanticMiner<double> miner(s, cfg, 4, rng);
    const Mat<double> visual = random_mat(3, 6, rng);
    auto rep = grad_check(s, [&](Tape<double>& t) { return project(t, miner.mine(t, t.constant(visual)), 41); });
    EXPECT_GRAD_OK(rep);
    // The frozen encoder never collects gradient.
    for (const auto& p : s.all()) {
      if (!p.trainable) {
        EXPECT_EQ(p.grad.cwiseAbs().sum(), 0.0) << p.name;
      }
    }
  }
}

TEST(BlockGradients, ClassifierHeads) {
  for (int inst = 0; inst < kInstances; ++inst) {
    std::mt19937_64 rng(1500 + inst);
    ModelConfig mc;
    mc.image = ResNet9Config{8, {2, 4, 4, 4}};
    mc.points = GraphConvConfig{3, {4, 4}};
    mc.semi.d_visual = 4;
    mc.semi.d_text = 4;
    mc.semi.visual_grid = 2;
    mc.fusion.heads = 2;
    mc.fusion.scaf_layers = 1;
    mc.hpp_bins = {1, 2};
    mc.num_classes = 3;
    mc.ce_neck = inst == 1 ? "batch" : "none";
    mc.init_seed = static_cast<std::uint64_t>(inst);
    GaitModel<double> model(mc);
    const Mat<double> parts = random_mat(3 * model.parts(), 4, rng);
    const std::vector<int> labels{0, 2, 1};
    // Only the classifier is exercised here; the full-model test covers the rest.
    for (auto& p : model.params().all()) p.trainable = p.name.rfind("classifier.", 0) == 0;
    auto rep = grad_check(model.params(), [&](Tape<double>& t) {
      return ops::cross_entropy(t, model.classify(t, t.constant(parts)), labels, model.parts());
    });
    EXPECT_GRAD_OK(rep);
  }
}

TEST(BlockGradients, FullModelEndToEnd) {
  for (int inst = 0; inst < kInstances; ++inst) {
    ModelConfig mc;
    mc.image = ResNet9Config{8, {2, 4, 4, 4}};
    mc.points = GraphConvConfig{3, {4, 4}};
    mc.semi.d_visual = 4;
    mc.semi.d_text = 4;
    mc.semi.visual_grid = 2;
    mc.fusion.heads = 2;
    mc.fusion.scaf_layers = 1;
    mc.hpp_bins = {1, 2};
    mc.num_classes = 2;
    mc.ce_neck = "batch";
    mc.init_seed = 50 + static_cast<std::uint64_t>(inst);
    GaitModel<double> model(mc);
    std::mt19937_64 rng(1600 + inst);
    Batch<double> b;
    b.sequences = 2;
    b.frames = 2;
    b.image_size = 8;
    b.images = random_mat(4 * 64, 3, rng, 0.5);
    b.visual = random_mat(4, 4, rng);
    b.points = random_mat(4 * 6, 3, rng);
    b.point_offsets = uniform_offsets(4, 6);
    const std::vector<int> labels{0, 1};
    auto rep = grad_check(model.params(), [&](Tape<double>& t) {
      Var parts = model.forward(t, b);
      return ops::add(t, project(t, parts, 43), ops::cross_entropy(t, model.classify(t, parts), labels, model.parts()));
    }, kStep, 6);
    EXPECT_GRAD_OK(rep);
  }
}

}  // namespace
