#include <gtest/gtest.h>

#include <random>

#include "emgait/semi.hpp"
#include "emgait/training.hpp"
#include "support.hpp"

namespace {

using namespace emgait;
using emgait::testing::random_mat;

SemiConfig small() {
  SemiConfig c;
  c.d_visual = 12;
  c.d_text = 10;
  c.visual_grid = 4;
  return c;
}

TEST(StubBackend, ConstantImageGivesTheBias) {
  std::mt19937_64 rng(1);
  ParamStore<double> store;
  StubBackend<double> b(store, small(), rng);
  const Mat<double> v = b.encode_visual(RgbFrame(16, 16));
  ASSERT_EQ(v.cols(), 12);
  EXPECT_LT((v - b.visual_bias().value).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((b.encode_visual(RgbFrame(16, 16, 0.6f)) - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(StubBackend, BrightnessInvariant) {
  std::mt19937_64 rng(2);
  ParamStore<double> store;
  StubBackend<double> b(store, small(), rng);
  RgbFrame f(8, 8);
  std::uniform_real_distribution<float> ud(0.1f, 0.5f);
  for (auto& p : f.pixels) p = ud(rng);
  RgbFrame dim = f;
  for (auto& p : dim.pixels) p = 0.4f * p + 0.05f;
  EXPECT_LT((b.encode_visual(f) - b.encode_visual(dim)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(StubBackend, TextIsMeanTokenTimesWeight) {
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  StubBackend<double> b(store, small(), rng);
  const Mat<double> rows = b.token_embeddings({"a", "photo", "of"});
  ASSERT_EQ(rows.rows(), 5);
  Tape<double> t;
  const Mat<double> got = t.value(b.encode_text(t, t.constant(rows), {0, 5}));
  Mat<double> mean = Mat<double>::Zero(1, 10);
  for (Eigen::Index r = 0; r < 5; ++r) mean += rows.row(r) / 5.0;
  EXPECT_LT((got - mean * b.text_weight().value).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(b.token_embeddings({"zebra"}), Error);
}

TEST(SemanticBackend, UnknownBackendIsUnavailable) {
  std::mt19937_64 rng(4);
  ParamStore<double> store;
  SemiConfig c = small();
  c.backend = "clip-vit-b16";
  try {
    make_semantic_backend<double>(store, c, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::backend_unavailable);
  }
}

TEST(PromptTemplate, Validation) {
  PromptTemplate p;
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(p.tokens("legs"), (std::vector<std::string>{"a", "photo", "of", "the", "legs", "of", "a", "[X]", "person"}));
  p.text = "A photo of the [PART] of a person";
  EXPECT_THROW(p.validate(), Error);
  p.text = "[X] [X] [PART]";
  EXPECT_THROW(p.validate(), Error);
  p = PromptTemplate{};
  p.parts.pop_back();
  EXPECT_THROW(p.validate(), Error);
}

TEST(SemanticMiner, FivePartRowsInPromptOrder) {
  std::mt19937_64 rng(5);
  ParamStore<double> store;
  SemanticMiner<double> miner(store, small(), 8, rng);
  const Mat<double> pseudo = random_mat(2, 10, rng);
  Tape<double> t;
  const Mat<double> all = t.value(miner.encode_text(t, t.constant(pseudo)));
  ASSERT_EQ(all.rows(), 10);
  ASSERT_EQ(all.cols(), 8);
  const auto& b = miner.backend();
  const auto* adapter_w = &store.get("semi.adapter.weight");
  const auto* adapter_b = &store.get("semi.adapter.bias");
  for (Eigen::Index f = 0; f < 2; ++f)
    for (std::size_t p = 0; p < 5; ++p) {
      auto toks = miner.prompt().tokens(miner.prompt().parts[p]);
      Mat<double> rows = b.token_embeddings(toks);
      for (std::size_t i = 0; i < toks.size(); ++i)
        if (toks[i] == "[X]") rows.row(static_cast<Eigen::Index>(i) + 1) = pseudo.row(f);
      Tape<double> u;
      const Mat<double> pooled = u.value(b.encode_text(u, u.constant(rows), {0, rows.rows()}));
      const Mat<double> want = pooled * adapter_w->value + adapter_b->value;
      EXPECT_LT((all.row(f * 5 + static_cast<Eigen::Index>(p)) - want).cwiseAbs().maxCoeff(), 1e-12);
    }
  EXPECT_GT((all.row(0) - all.row(5)).norm(), 1e-6);  // different pseudo words, different tokens
}

TEST(SemanticMiner, TrainingLeavesTheEncoderFrozen) {
  std::mt19937_64 rng(6);
  ParamStore<double> store;
  SemanticMiner<double> miner(store, small(), 8, rng);
  std::vector<Mat<double>> before;
  for (const auto& p : store.all()) before.push_back(p.value);
  TrainConfig tc;
  Adam<double> opt(store, tc);
  RgbFrame frame(8, 8);
  std::uniform_real_distribution<float> ud(0, 1);
  for (auto& v : frame.pixels) v = ud(rng);
  const Mat<double> target = random_mat(5, 8, rng);
  for (int it = 0; it < 5; ++it) {
    store.zero_grad();
    Tape<double> t;
    Var out = miner.mine(t, t.constant(miner.encode_visual(frame)));
    t.backward(ops::weighted_sum(t, out, target));
    opt.step(1e-2);
  }
  std::size_t i = 0;
  bool trained = false;
  for (const auto& p : store.all()) {
    if (!p.trainable) {
      EXPECT_EQ(p.value, before[i]) << p.name;
    } else {
      trained = trained || p.value != before[i];
    }
    ++i;
  }
  EXPECT_TRUE(trained);
}

}  // namespace
