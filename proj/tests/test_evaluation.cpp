#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "emgait/evaluation.hpp"
#include "oracles.hpp"

namespace {

using namespace emgait;

EmbeddingRecord rec(std::string id, std::string identity, int view, int dist, std::string cond, Mat<float> parts) {
  return EmbeddingRecord{std::move(id), std::move(identity), view, dist, std::move(cond), std::move(parts)};
}

Mat<float> row(std::initializer_list<float> v) {
  Mat<float> m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (float x : v) m(0, i++) = x;
  return m;
}

TEST(PairwiseDistance, SumsPartNorms) {
  Mat<float> a = Mat<float>::Zero(2, 2), b(2, 2);
  b << 3, 4, 12, 0;
  const auto d = pairwise_distance({rec("p", "a", 0, 10, "clean", a)}, {rec("g", "a", 0, 10, "clean", b)});
  EXPECT_NEAR(d(0, 0), 17.0, 1e-9);
  const auto single = pairwise_distance({rec("p", "a", 0, 10, "clean", row({0, 0}))}, {rec("g", "a", 0, 10, "clean", row({3, 4}))});
  EXPECT_NEAR(single(0, 0), 5.0, 1e-9);
  EXPECT_THROW(pairwise_distance({rec("p", "a", 0, 10, "clean", a)}, {rec("g", "a", 0, 10, "clean", row({1, 1}))}), Error);
}

TEST(Retrieval, HandFixture) {
  // Probe a finds a first; probe b finds b second; probe c finds c fifth.
  DistMatrix d(3, 5);
  d << 0.1, 0.5, 0.6, 0.7, 0.8,  //
      0.2, 0.9, 0.3, 0.4, 0.5,   //
      0.1, 0.2, 0.3, 0.4, 0.5;
  const std::vector<std::string> pl{"a", "b", "c"}, gl{"a", "b", "d", "e", "c"};
  EXPECT_NEAR(rank_k(d, pl, gl, 1), 1.0 / 3.0, 1e-15);
  d(1, 1) = 0.15;
  EXPECT_NEAR(rank_k(d, pl, gl, 1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(rank_k(d, pl, gl, 5), 1.0, 1e-15);
  EXPECT_THROW(rank_k(d, pl, gl, 0), Error);
}

TEST(Retrieval, AveragePrecisionExamples) {
  DistMatrix one(1, 3);
  one << 0.1, 0.2, 0.3;
  EXPECT_NEAR(mean_ap(one, {"a"}, {"a", "x", "y"}), 1.0, 1e-15);
  EXPECT_NEAR(mean_ap(one, {"a"}, {"x", "a", "y"}), 0.5, 1e-15);
  EXPECT_NEAR(mean_ap(one, {"a"}, {"a", "x", "a"}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(mean_ap_stats(one, {"z"}, {"a", "x", "y"}).skipped, 1);
}

std::vector<std::vector<bool>> to_nested(const ExclusionMask& m) {
  std::vector<std::vector<bool>> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out.emplace_back();
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.back().push_back(m(i, j));
  }
  return out;
}

TEST(Retrieval, MatchesBruteForceOracles) {
  std::mt19937_64 rng(1);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (int trial = 0; trial < 100; ++trial) {
    const int P = pick(1, 20), G = pick(1, 20), ids = pick(1, 6);
    DistMatrix d(P, G);
    // Coarse values so ties occur.
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = pick(0, 9) * 0.5;
    std::vector<std::string> pl, gl;
    for (int i = 0; i < P; ++i) pl.push_back("id" + std::to_string(pick(0, ids - 1)));
    for (int j = 0; j < G; ++j) gl.push_back("id" + std::to_string(pick(0, ids - 1)));
    ExclusionMask mask;
    if (trial % 2) {
      mask.resize(P, G);
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = pick(0, 3) == 0;
    }
    const auto nested = mask.size() ? to_nested(mask) : std::vector<std::vector<bool>>{};
    for (int k : {1, 3, 5, 20}) ASSERT_NEAR(rank_k(d, pl, gl, k, mask), oracle::rank_k(d, pl, gl, k, nested), 1e-12) << trial;
    ASSERT_NEAR(mean_ap(d, pl, gl, mask), oracle::mean_ap(d, pl, gl, nested), 1e-12) << trial;
  }
}

TEST(Retrieval, MonotoneInvariantAndNondecreasingInK) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ud(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    DistMatrix d(8, 12);
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = ud(rng);
    std::vector<std::string> pl, gl;
    for (int i = 0; i < 8; ++i) pl.push_back(std::to_string(i % 4));
    for (int j = 0; j < 12; ++j) gl.push_back(std::to_string(j % 4));
    const DistMatrix warped = d.array().exp() * 3.0 + 1.0;
    double prev = 0;
    for (int k = 1; k <= 12; ++k) {
      const double r = rank_k(d, pl, gl, k);
      EXPECT_EQ(r, rank_k(warped, pl, gl, k));
      EXPECT_GE(r, prev);
      prev = r;
    }
    EXPECT_EQ(mean_ap(d, pl, gl), mean_ap(warped, pl, gl));
  }
}

std::vector<EmbeddingRecord> protocol_fixture(std::mt19937_64& rng) {
  std::normal_distribution<float> nd;
  std::vector<EmbeddingRecord> out;
  for (int id = 0; id < 4; ++id) {
    Mat<float> center(2, 3);
    for (Eigen::Index i = 0; i < center.size(); ++i) center.data()[i] = 3 * nd(rng);
    for (int view : {0, 2})
      for (int dist : {10, 20})
        for (std::string cond : {"clean", "night"}) {
          Mat<float> p = center;
          for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += 0.3f * nd(rng);
          out.push_back(rec("id" + std::to_string(id) + "_v" + std::to_string(view) + "_d" + std::to_string(dist) + "_" + cond,
                            "id" + std::to_string(id), view, dist, cond, p));
        }
  }
  return out;
}

TEST(Protocol, IndependentOfRecordOrder) {
  std::mt19937_64 rng(3);
  auto recs = protocol_fixture(rng);
  for (auto mode : {ProtocolMode::cross_view, ProtocolMode::cross_distance}) {
    ProtocolSpec spec;
    spec.mode = mode;
    const std::string a = metrics_csv(run_protocol(recs, spec, "h"));
    auto shuffled = recs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_EQ(metrics_csv(run_protocol(shuffled, spec, "h")), a);
  }
}

TEST(Protocol, SelfRetrievalWithoutExclusionIsPerfect) {
  std::mt19937_64 rng(4);
  const auto recs = protocol_fixture(rng);
  ProtocolSpec spec;
  spec.gallery_conditions = {"clean", "night"};
  spec.probe_conditions = {"clean", "night"};
  spec.exclude_same_view = false;
  const auto t = run_protocol(recs, spec);
  EXPECT_EQ(t.overall.rank.at(1), 1.0);
}

TEST(Protocol, TableShapeAndEmptyPartitions) {
  std::mt19937_64 rng(5);
  const auto recs = protocol_fixture(rng);
  ProtocolSpec view;
  const auto tv = run_protocol(recs, view, "cafe");
  ASSERT_EQ(tv.rows.size(), 3u);
  EXPECT_EQ(tv.rows[0].name, "NM");
  EXPECT_TRUE(tv.find("BG")->empty);  // no carry sequences
  const std::string csv = metrics_csv(tv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "protocol,metric,NM,BG,NT,Overall,config_hash");
  EXPECT_NE(csv.find("cross-view,R-1,"), std::string::npos);
  EXPECT_NE(csv.find(",N/A,"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);  // header, R-1, R-5, mAP, probes

  ProtocolSpec dist;
  dist.mode = ProtocolMode::cross_distance;
  const auto td = run_protocol(recs, dist);
  std::vector<std::string> names;
  for (const auto& r : td.rows) names.push_back(r.name);
  EXPECT_EQ(names, (std::vector<std::string>{"D-20", "B-10", "B-20", "N-10", "N-20"}));
  EXPECT_FALSE(td.find("N-20")->empty);
  EXPECT_EQ(td.find("D-20")->probes, 8);

  const auto none = run_protocol({}, dist);
  EXPECT_TRUE(none.overall.empty);
  EXPECT_NE(metrics_csv(none).find("N/A"), std::string::npos);
}

TEST(Protocol, CrossViewExcludesSameView) {
  // Each probe's only same-identity gallery entry shares its view, so
  // exclusion leaves nothing to find.
  std::vector<EmbeddingRecord> recs{rec("a0", "a", 0, 10, "clean", row({0, 0})), rec("b2", "b", 2, 10, "clean", row({5, 5}))};
  ProtocolSpec spec;
  spec.probe_conditions = {"clean"};
  const auto t = run_protocol(recs, spec);
  EXPECT_EQ(t.overall.rank.at(1), 0.0);
  spec.exclude_same_view = false;
  EXPECT_EQ(run_protocol(recs, spec).overall.rank.at(1), 1.0);
}

TEST(Embeddings, TextRoundTrip) {
  std::mt19937_64 rng(6);
  const auto recs = protocol_fixture(rng);
  std::istringstream is(embeddings_text(recs, "beef"));
  std::string hash;
  const auto back = parse_embeddings(is, &hash);
  EXPECT_EQ(hash, "beef");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].seq_id, recs[i].seq_id);
    EXPECT_EQ(back[i].parts, recs[i].parts);
  }
  std::istringstream bad("{\"format\":\"other\"}\n");
  EXPECT_THROW(parse_embeddings(bad), Error);
}

}  // namespace
