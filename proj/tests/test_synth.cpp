#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "emgait/synth.hpp"

namespace {

using namespace emgait;

SynthConfig quiet() {
  SynthConfig c;
  c.image_noise = 0;
  c.point_noise = 0;
  return c;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TEST(Walker, SeedDeterminesIdentity) {
  const WalkerModel a = generate_walker(42), b = generate_walker(42);
  EXPECT_EQ(a.limb_lengths, b.limb_lengths);
  EXPECT_EQ(a.phase_offsets, b.phase_offsets);
  EXPECT_EQ(a.gait_period, b.gait_period);

  int differing = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto x = generate_walker(walker_seed(1, static_cast<int>(s))), y = generate_walker(walker_seed(2, static_cast<int>(s)));
    differing += x.limb_lengths != y.limb_lengths;
  }
  EXPECT_EQ(differing, 100);
}

TEST(Walker, ProportionsStayInBounds) {
  for (std::uint64_t s = 0; s < 500; ++s)
    for (double l : generate_walker(s).limb_lengths) {
      EXPECT_GE(l, 0.5);
      EXPECT_LE(l, 1.5);
    }
}

TEST(Render, SameSpecSameFrames) {
  const auto w = generate_walker(7);
  RenderSpec spec{2, 2, Condition::night, 4, 99};
  const auto a = render_sequence(w, spec), b = render_sequence(w, spec);
  for (std::size_t f = 0; f < a.frames.size(); ++f) {
    EXPECT_EQ(a.frames[f].image.pixels, b.frames[f].image.pixels);
    EXPECT_EQ(a.frames[f].cloud.coords, b.frames[f].cloud.coords);
    EXPECT_TRUE(a.frames[f].image.valid());
  }
}

TEST(Render, FarLevelsAreSparse) {
  const auto w = generate_walker(3);
  SynthConfig cfg;
  const auto near = render_sequence(w, {0, 1, Condition::clean, 3, 1}, cfg);
  const auto far = render_sequence(w, {0, 5, Condition::clean, 3, 1}, cfg);
  for (std::size_t f = 0; f < near.frames.size(); ++f)
    EXPECT_LE(far.frames[f].cloud.coords.rows(), near.frames[f].cloud.coords.rows() / 4);
  EXPECT_LT(far.frames[0].image.source_size.first, near.frames[0].image.source_size.first);
}

TEST(Render, OppositeViewsAreMirrored) {
  const auto w = generate_walker(11);
  const auto cfg = quiet();
  const auto front = render_sequence(w, {0, 1, Condition::clean, 3, 5}, cfg);
  const auto back = render_sequence(w, {4, 1, Condition::clean, 3, 5}, cfg);
  for (std::size_t f = 0; f < front.frames.size(); ++f) {
    const RgbFrame& a = front.frames[f].image;
    const RgbFrame& b = back.frames[f].image;
    long mismatched = 0, covered = 0;
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        const bool in_a = a.at(y, x, 0) > 0.3f, in_b = b.at(y, a.width - 1 - x, 0) > 0.3f;
        covered += in_a;
        mismatched += in_a != in_b;
      }
    ASSERT_GT(covered, 50);
    EXPECT_LE(mismatched, covered / 100) << "frame " << f;
  }
}

// Cloud height tracks body size, which must not depend on the distance level.
TEST(Render, IdentityIsStableAcrossDistance) {
  const auto w = generate_walker(21);
  const auto cfg = quiet();
  auto height = [&](int level) {
    const auto s = render_sequence(w, {2, level, Condition::clean, 1, 4}, cfg);
    const auto z = s.frames[0].cloud.coords.col(2);
    return static_cast<double>(z.maxCoeff() - z.minCoeff());
  };
  const double h1 = height(1);
  for (int level = 2; level <= 5; ++level) EXPECT_NEAR(height(level), h1, 0.05 * h1) << "level " << level;
}

TEST(Render, RejectsBadSpec) {
  const auto w = generate_walker(1);
  EXPECT_THROW(render_sequence(w, {0, 6, Condition::clean, 2, 0}), Error);
  EXPECT_THROW(render_sequence(w, {8, 1, Condition::clean, 2, 0}), Error);
  EXPECT_THROW(render_sequence(w, {0, 1, Condition::clean, 0, 0}), Error);
}

// Mean silhouette per sequence, nearest centroid against a second rendering.
TEST(Render, SilhouettesCarryIdentity) {
  SynthConfig cfg;
  cfg.image_size = 32;
  auto mean_image = [&](int id, std::uint64_t noise) {
    const auto s = render_sequence(generate_walker(walker_seed(5, id), cfg), {2, 1, Condition::clean, 16, noise}, cfg);
    Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.frames[0].image.pixels.size()));
    for (const auto& f : s.frames)
      for (std::size_t i = 0; i < f.image.pixels.size(); ++i) m[static_cast<Eigen::Index>(i)] += f.image.pixels[i];
    return Eigen::VectorXd(m / static_cast<double>(s.frames.size()));
  };
  const int n = 12;
  std::vector<Eigen::VectorXd> gallery, probe;
  for (int i = 0; i < n; ++i) {
    gallery.push_back(mean_image(i, 100 + static_cast<std::uint64_t>(i)));
    probe.push_back(mean_image(i, 900 + static_cast<std::uint64_t>(i)));
  }
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < n; ++j)
      if ((probe[static_cast<std::size_t>(i)] - gallery[static_cast<std::size_t>(j)]).norm() <
          (probe[static_cast<std::size_t>(i)] - gallery[static_cast<std::size_t>(best)]).norm())
        best = j;
    correct += best == i;
  }
  EXPECT_GE(correct, 10) << correct << "/" << n;
}

TEST(Dataset, CountsSplitAndFingerprint) {
  const fs::path a = fs::temp_directory_path() / "emgait_synth_a", b = fs::temp_directory_path() / "emgait_synth_b";
  DatasetConfig cfg;
  cfg.frames_per_seq = 2;
  cfg.synth.image_size = 16;
  cfg.synth.base_points = 32;
  const Manifest m = build_dataset(cfg, a, 2);
  EXPECT_EQ(m.entries.size(), 96u);
  EXPECT_EQ(m.identities("train").size(), 6u);
  EXPECT_EQ(m.identities("test").size(), 6u);
  build_dataset(cfg, b, 1);
  EXPECT_EQ(fnv1a(file_bytes(a / "manifest.jsonl")), fnv1a(file_bytes(b / "manifest.jsonl")));
  EXPECT_EQ(file_bytes(a / m.entries[5].frames[1].image), file_bytes(b / m.entries[5].frames[1].image));
  const Manifest back = load_manifest(a / "manifest.jsonl");
  EXPECT_EQ(back.entries.size(), 96u);
  fs::remove_all(a);
  fs::remove_all(b);

  cfg.split_ratio = 1.5;
  EXPECT_THROW(build_dataset(cfg, a), Error);
}

}  // namespace
