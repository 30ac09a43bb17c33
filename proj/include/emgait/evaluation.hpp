#pragma once

// Embedding extraction, probe/gallery retrieval metrics, and the cross-view
// and cross-distance protocols with CSV, JSON and SVG emitters.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emgait/error.hpp"
#include "emgait/io.hpp"
#include "emgait/model.hpp"

namespace emgait {

struct EmbeddingRecord {
  std::string seq_id;
  std::string identity;
  int view = 0;
  int distance_m = 0;
  std::string condition;
  Mat<float> parts;  // p×d
};

// Deterministic forward over `frames` uniformly spaced frames (0 = all).
inline EmbeddingRecord embed_sequence(const GaitModel<float>& model, const PreparedSequence& seq, int frames = 0) {
  if (seq.images.empty()) throw Error(ErrorCode::empty_input, "embed_sequence: sequence '" + seq.seq_id + "' has no frames");
  const std::size_t n = frames > 0 ? static_cast<std::size_t>(frames) : seq.images.size();
  const auto idx = sample_frame_indices(seq.images.size(), n, SampleMode::uniform, 0);
  Tape<float> t;
  Var out = model.forward(t, model.make_batch({&seq}, {idx}));
  return EmbeddingRecord{seq.seq_id, seq.identity, seq.view, seq.distance_m, seq.condition, t.value(out)};
}

inline std::vector<EmbeddingRecord> embed_all(const GaitModel<float>& model, const std::vector<PreparedSequence>& seqs,
                                              int frames = 0, unsigned threads = 1) {
  std::vector<EmbeddingRecord> out(seqs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::string err;
  ErrorCode code = ErrorCode::io;
  auto worker = [&] {
    for (std::size_t i = next++; i < seqs.size(); i = next++) {
      try {
        out[i] = embed_sequence(model, seqs[i], frames);
      } catch (const Error& e) {
        std::lock_guard lk(mu);
        if (err.empty()) err = e.what(), code = e.code();
      } catch (const std::exception& e) {
        std::lock_guard lk(mu);
        if (err.empty()) err = e.what(), code = ErrorCode::io;
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < std::max(1u, threads); ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (!err.empty()) throw Error(code, err);
  return out;
}

// Embedding file: JSON lines, one record per sequence with the part matrix
// as nested arrays, preceded by a header carrying the config hash.
inline std::string embeddings_text(const std::vector<EmbeddingRecord>& recs, const std::string& config_hash) {
  std::string out = json{{"format", "emgait-embeddings"}, {"version", 1}, {"config_hash", config_hash}}.dump() + "\n";
  for (const auto& r : recs) {
    json parts = json::array();
    for (Eigen::Index i = 0; i < r.parts.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index j = 0; j < r.parts.cols(); ++j) row.push_back(r.parts(i, j));
      parts.push_back(std::move(row));
    }
    out += json{{"seq_id", r.seq_id}, {"identity", r.identity}, {"view", r.view}, {"distance_m", r.distance_m},
                {"condition", r.condition}, {"parts", parts}}
               .dump() +
           "\n";
  }
  return out;
}

inline std::vector<EmbeddingRecord> parse_embeddings(std::istream& is, std::string* config_hash = nullptr) {
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [lineno](const std::string& m) { return Error(ErrorCode::schema, "embeddings line " + std::to_string(lineno) + ": " + m); };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw fail(e.what());
    }
    if (!header) {
      if (!j.is_object() || j.value("format", "") != "emgait-embeddings") throw fail("missing embeddings header");
      if (config_hash) *config_hash = j.value("config_hash", "");
      header = true;
      continue;
    }
    try {
      EmbeddingRecord r{j.at("seq_id"), j.at("identity"), j.at("view"), j.at("distance_m"), j.at("condition"), {}};
      const auto& p = j.at("parts");
      if (!p.is_array() || p.empty() || !p[0].is_array() || p[0].empty()) throw fail("parts must be a nonempty matrix");
      r.parts.resize(static_cast<Eigen::Index>(p.size()), static_cast<Eigen::Index>(p[0].size()));
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i].size() != p[0].size()) throw fail("ragged parts matrix");
        for (std::size_t k = 0; k < p[i].size(); ++k) r.parts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = p[i][k].get<float>();
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw fail(e.what());
    }
  }
  if (!header) throw Error(ErrorCode::schema, "embeddings file is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

using DistMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ExclusionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;  // empty = nothing excluded

// Sum over parts of the Euclidean distance between matching part vectors.
inline DistMatrix pairwise_distance(const std::vector<EmbeddingRecord>& probe, const std::vector<EmbeddingRecord>& gallery) {
  DistMatrix d(static_cast<Eigen::Index>(probe.size()), static_cast<Eigen::Index>(gallery.size()));
  for (std::size_t i = 0; i < probe.size(); ++i)
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      const Mat<float>& a = probe[i].parts;
      const Mat<float>& b = gallery[j].parts;
      if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(ErrorCode::usage, "pairwise_distance: part shape mismatch between '" + probe[i].seq_id + "' and '" +
                                          gallery[j].seq_id + "'");
      double s = 0;
      for (Eigen::Index p = 0; p < a.rows(); ++p) s += (a.row(p).cast<double>() - b.row(p).cast<double>()).norm();
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s;
    }
  return d;
}

namespace detail {

// Non-excluded gallery columns of probe row i, nearest first, ties by index.
inline std::vector<Eigen::Index> ranked_candidates(const DistMatrix& d, const ExclusionMask& mask, Eigen::Index i) {
  std::vector<Eigen::Index> c;
  for (Eigen::Index j = 0; j < d.cols(); ++j)
    if (mask.size() == 0 || !mask(i, j)) c.push_back(j);
  std::stable_sort(c.begin(), c.end(), [&](Eigen::Index a, Eigen::Index b) { return d(i, a) < d(i, b); });
  return c;
}

inline void check_shapes(const DistMatrix& d, const std::vector<std::string>& pl, const std::vector<std::string>& gl,
                         const ExclusionMask& mask) {
  if (d.rows() != static_cast<Eigen::Index>(pl.size()) || d.cols() != static_cast<Eigen::Index>(gl.size()))
    throw Error(ErrorCode::usage, "retrieval: label counts do not match the distance matrix");
  if (mask.size() != 0 && (mask.rows() != d.rows() || mask.cols() != d.cols()))
    throw Error(ErrorCode::usage, "retrieval: exclusion mask shape does not match the distance matrix");
}

}  // namespace detail

struct RetrievalStats {
  double value = 0.0;  // fraction in [0, 1]
  long evaluated = 0;  // probes in the denominator
  long skipped = 0;    // probes with no usable candidate
};

// Fraction of probes whose k nearest non-excluded gallery entries contain the
// probe identity. Probes without any candidate are skipped.
inline RetrievalStats rank_k_stats(const DistMatrix& d, const std::vector<std::string>& probe_labels,
                                   const std::vector<std::string>& gallery_labels, int k, const ExclusionMask& mask = {}) {
  detail::check_shapes(d, probe_labels, gallery_labels, mask);
  if (k < 1) throw Error(ErrorCode::usage, "rank_k: k must be >= 1");
  RetrievalStats s;
  long hits = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const auto c = detail::ranked_candidates(d, mask, i);
    if (c.empty()) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    for (std::size_t r = 0; r < c.size() && r < static_cast<std::size_t>(k); ++r)
      if (gallery_labels[static_cast<std::size_t>(c[r])] == probe_labels[static_cast<std::size_t>(i)]) {
        ++hits;
        break;
      }
  }
  s.value = s.evaluated ? static_cast<double>(hits) / static_cast<double>(s.evaluated) : 0.0;
  return s;
}

inline double rank_k(const DistMatrix& d, const std::vector<std::string>& probe_labels, const std::vector<std::string>& gallery_labels,
                     int k, const ExclusionMask& mask = {}) {
  return rank_k_stats(d, probe_labels, gallery_labels, k, mask).value;
}

// Mean over probes of average precision along the ranked candidate list.
// Probes with no relevant candidate are skipped.
inline RetrievalStats mean_ap_stats(const DistMatrix& d, const std::vector<std::string>& probe_labels,
                                    const std::vector<std::string>& gallery_labels, const ExclusionMask& mask = {}) {
  detail::check_shapes(d, probe_labels, gallery_labels, mask);
  RetrievalStats s;
  double total = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const auto c = detail::ranked_candidates(d, mask, i);
    long rel = 0;
    double ap = 0;
    for (std::size_t r = 0; r < c.size(); ++r)
      if (gallery_labels[static_cast<std::size_t>(c[r])] == probe_labels[static_cast<std::size_t>(i)]) {
        ++rel;
        ap += static_cast<double>(rel) / static_cast<double>(r + 1);
      }
    if (rel == 0) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    total += ap / static_cast<double>(rel);
  }
  s.value = s.evaluated ? total / static_cast<double>(s.evaluated) : 0.0;
  return s;
}

inline double mean_ap(const DistMatrix& d, const std::vector<std::string>& probe_labels, const std::vector<std::string>& gallery_labels,
                      const ExclusionMask& mask = {}) {
  return mean_ap_stats(d, probe_labels, gallery_labels, mask).value;
}

// ---------------------------------------------------------------------------
// Protocols

enum class ProtocolMode { cross_view, cross_distance };

inline ProtocolMode protocol_from_string(const std::string& s) {
  if (s == "cross-view") return ProtocolMode::cross_view;
  if (s == "cross-distance") return ProtocolMode::cross_distance;
  throw Error(ErrorCode::config, "unknown protocol '" + s + "' (expected cross-view or cross-distance)");
}

inline const char* to_string(ProtocolMode m) { return m == ProtocolMode::cross_view ? "cross-view" : "cross-distance"; }

struct ProtocolSpec {
  ProtocolMode mode = ProtocolMode::cross_view;
  std::vector<int> ranks{1, 5};
  bool with_map = true;
  // cross-view: gallery conditions (all views, all distances); probe
  // partitions are conditions; same (identity, view) pairs are excluded.
  std::vector<std::string> gallery_conditions{"clean"};
  std::vector<std::string> probe_conditions{"clean", "carry", "night"};
  bool exclude_same_view = true;
  // cross-distance: gallery is one condition at one distance; probes are
  // partitioned by (condition, distance) over everything else.
  std::string gallery_condition = "clean";
  int gallery_distance_m = 10;
  std::vector<int> probe_distances_m{10, 20};
  bool exclude_same_view_cross_distance = false;
};

inline std::string condition_code(ProtocolMode mode, const std::string& condition) {
  static const std::map<std::string, std::string> view_codes{{"clean", "NM"}, {"carry", "BG"}, {"night", "NT"}};
  static const std::map<std::string, std::string> dist_codes{{"clean", "D"}, {"carry", "B"}, {"night", "N"}};
  const auto& table = mode == ProtocolMode::cross_view ? view_codes : dist_codes;
  auto it = table.find(condition);
  return it == table.end() ? condition : it->second;
}

struct PartitionRow {
  std::string name;
  long probes = 0;
  bool empty = true;
  std::map<int, double> rank;  // k → fraction
  double map = 0.0;
};

struct MetricTable {
  ProtocolMode mode = ProtocolMode::cross_view;
  std::vector<int> ranks;
  bool with_map = true;
  std::vector<PartitionRow> rows;
  PartitionRow overall;
  std::string config_hash;

  const PartitionRow* find(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return &r;
    return name == "Overall" ? &overall : nullptr;
  }
};

namespace detail {

inline ExclusionMask same_identity_view_mask(const std::vector<const EmbeddingRecord*>& probe,
                                             const std::vector<const EmbeddingRecord*>& gallery) {
  ExclusionMask m(static_cast<Eigen::Index>(probe.size()), static_cast<Eigen::Index>(gallery.size()));
  for (std::size_t i = 0; i < probe.size(); ++i)
    for (std::size_t j = 0; j < gallery.size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          probe[i]->identity == gallery[j]->identity && probe[i]->view == gallery[j]->view;
  return m;
}

inline std::vector<EmbeddingRecord> copy_of(const std::vector<const EmbeddingRecord*>& v) {
  std::vector<EmbeddingRecord> out;
  for (auto* r : v) out.push_back(*r);
  return out;
}

inline std::vector<std::string> labels_of(const std::vector<const EmbeddingRecord*>& v) {
  std::vector<std::string> out;
  for (auto* r : v) out.push_back(r->identity);
  return out;
}

// Metrics for one probe group against the gallery.
inline PartitionRow score_group(const std::string& name, const std::vector<const EmbeddingRecord*>& probe,
                                const std::vector<const EmbeddingRecord*>& gallery, bool exclude_same_view,
                                const ProtocolSpec& spec) {
  PartitionRow row;
  row.name = name;
  if (probe.empty() || gallery.empty()) return row;
  const DistMatrix d = pairwise_distance(copy_of(probe), copy_of(gallery));
  const ExclusionMask mask = exclude_same_view ? same_identity_view_mask(probe, gallery) : ExclusionMask{};
  const auto pl = labels_of(probe), gl = labels_of(gallery);
  for (int k : spec.ranks) {
    const auto s = rank_k_stats(d, pl, gl, k, mask);
    row.rank[k] = s.value;
    row.probes = s.evaluated;
  }
  if (spec.with_map) row.map = mean_ap_stats(d, pl, gl, mask).value;
  row.empty = row.probes == 0;
  return row;
}

}  // namespace detail

// Runs the protocol over embeddings of every sequence in the evaluation set.
// Records are ordered by seq_id first, so the result does not depend on
// input order.
inline MetricTable run_protocol(const std::vector<EmbeddingRecord>& records, const ProtocolSpec& spec, const std::string& config_hash = "") {
  std::vector<const EmbeddingRecord*> all;
  for (const auto& r : records) all.push_back(&r);
  std::stable_sort(all.begin(), all.end(), [](auto* a, auto* b) { return a->seq_id < b->seq_id; });
  auto has = [](const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); };

  MetricTable table;
  table.mode = spec.mode;
  table.ranks = spec.ranks;
  table.with_map = spec.with_map;
  table.config_hash = config_hash;
  std::vector<const EmbeddingRecord*> gallery;

  if (spec.mode == ProtocolMode::cross_view) {
    for (auto* r : all)
      if (has(spec.gallery_conditions, r->condition)) gallery.push_back(r);
    for (const auto& cond : spec.probe_conditions) {
      std::map<int, std::vector<const EmbeddingRecord*>> by_view;
      for (auto* r : all)
        if (r->condition == cond) by_view[r->view].push_back(r);
      // Mean over probe views of each view's metrics.
      PartitionRow row;
      row.name = condition_code(spec.mode, cond);
      int views = 0;
      for (const auto& [v, probes] : by_view) {
        PartitionRow vr = detail::score_group(row.name, probes, gallery, spec.exclude_same_view, spec);
        if (vr.empty) continue;
        ++views;
        row.probes += vr.probes;
        for (const auto& [k, x] : vr.rank) row.rank[k] += x;
        row.map += vr.map;
      }
      if (views > 0) {
        for (auto& [k, x] : row.rank) x /= views;
        row.map /= views;
        row.empty = false;
      }
      table.rows.push_back(row);
    }
  } else {
    for (auto* r : all)
      if (r->condition == spec.gallery_condition && r->distance_m == spec.gallery_distance_m) gallery.push_back(r);
    std::vector<std::string> conds{spec.gallery_condition};
    for (const auto& c : spec.probe_conditions)
      if (!has(conds, c)) conds.push_back(c);
    for (const auto& cond : conds)
      for (int dist : spec.probe_distances_m) {
        if (cond == spec.gallery_condition && dist == spec.gallery_distance_m) continue;
        std::vector<const EmbeddingRecord*> probes;
        for (auto* r : all)
          if (r->condition == cond && r->distance_m == dist) probes.push_back(r);
        table.rows.push_back(detail::score_group(condition_code(spec.mode, cond) + "-" + std::to_string(dist), probes, gallery,
                                                 spec.exclude_same_view_cross_distance, spec));
      }
  }

  PartitionRow& ov = table.overall;
  ov.name = "Overall";
  for (const auto& r : table.rows) {
    if (r.empty) continue;
    ov.probes += r.probes;
    for (const auto& [k, x] : r.rank) ov.rank[k] += x * static_cast<double>(r.probes);
    ov.map += r.map * static_cast<double>(r.probes);
  }
  if (ov.probes > 0) {
    for (auto& [k, x] : ov.rank) x /= static_cast<double>(ov.probes);
    ov.map /= static_cast<double>(ov.probes);
    ov.empty = false;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Emitters

namespace detail {

inline std::string pct(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", 100.0 * x);
  return buf;
}

}  // namespace detail

// Wide table: one column per probe partition plus Overall; one row per metric.
inline std::string metrics_csv(const MetricTable& t) {
  std::ostringstream os;
  os << "protocol,metric";
  for (const auto& r : t.rows) os << ',' << r.name;
  os << ",Overall,config_hash\n";
  auto line = [&](const std::string& metric, auto value_of) {
    os << to_string(t.mode) << ',' << metric;
    for (const auto& r : t.rows) os << ',' << (r.empty ? std::string("N/A") : value_of(r));
    os << ',' << (t.overall.empty ? std::string("N/A") : value_of(t.overall)) << ',' << t.config_hash << '\n';
  };
  for (int k : t.ranks) line("R-" + std::to_string(k), [k](const PartitionRow& r) { return detail::pct(r.rank.at(k)); });
  if (t.with_map) line("mAP", [](const PartitionRow& r) { return detail::pct(r.map); });
  os << to_string(t.mode) << ",probes";
  for (const auto& r : t.rows) os << ',' << r.probes;
  os << ',' << t.overall.probes << ',' << t.config_hash << '\n';
  return os.str();
}

inline json metrics_json(const MetricTable& t) {
  auto row_json = [&](const PartitionRow& r) {
    json j{{"name", r.name}, {"probes", r.probes}};
    for (int k : t.ranks) j["rank" + std::to_string(k)] = r.empty ? json(nullptr) : json(100.0 * r.rank.at(k));
    if (t.with_map) j["mAP"] = r.empty ? json(nullptr) : json(100.0 * r.map);
    return j;
  };
  json parts = json::array();
  for (const auto& r : t.rows) parts.push_back(row_json(r));
  return json{{"protocol", to_string(t.mode)}, {"config_hash", t.config_hash}, {"partitions", parts}, {"overall", row_json(t.overall)}};
}

// Bar chart of Rank-1 per partition and Overall.
inline std::string metrics_svg(const MetricTable& t) {
  const int k = t.ranks.empty() ? 1 : t.ranks.front();
  std::vector<const PartitionRow*> rows;
  for (const auto& r : t.rows) rows.push_back(&r);
  rows.push_back(&t.overall);
  const int bar = 48, gap = 24, left = 48, top = 32, h = 200;
  const int w = left + static_cast<int>(rows.size()) * (bar + gap) + gap;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << top + h + 48 << "\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << to_string(t.mode) << " Rank-" << k
     << " (%)</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + h << "\" x2=\"" << w - gap / 2 << "\" y2=\"" << top + h
     << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int x = left + gap / 2 + static_cast<int>(i) * (bar + gap);
    const PartitionRow& r = *rows[i];
    if (!r.empty) {
      const double v = r.rank.count(k) ? r.rank.at(k) : 0.0;
      const int bh = static_cast<int>(std::lround(v * h));
      os << "<rect x=\"" << x << "\" y=\"" << top + h - bh << "\" width=\"" << bar << "\" height=\"" << bh
         << "\" fill=\"#4a78b0\"/>\n";
      os << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + h - bh - 4
         << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << detail::pct(v).substr(0, detail::pct(v).size() - 2)
         << "</text>\n";
    } else {
      os << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + h - 4
         << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">N/A</text>\n";
    }
    os << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + h + 16
       << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">" << r.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace emgait
