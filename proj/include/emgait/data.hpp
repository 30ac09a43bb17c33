#pragma once

// Domain types and deterministic preprocessing for paired image / point-cloud
// gait sequences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "emgait/error.hpp"

namespace emgait {

template <class T>
using Points = Eigen::Matrix<T, Eigen::Dynamic, 3, Eigen::RowMajor>;

// H×W×3 image, channel-interleaved row-major, values in [0, 1].
struct RgbFrame {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  std::pair<int, int> source_size{0, 0};

  RgbFrame() = default;
  RgbFrame(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill), source_size(h, w) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool valid() const {
    if (height < 1 || width < 1 || pixels.size() != static_cast<std::size_t>(height) * width * 3) return false;
    return std::all_of(pixels.begin(), pixels.end(), [](float v) { return std::isfinite(v) && v >= 0.0f && v <= 1.0f; });
  }
};

struct PointCloudFrame {
  Points<float> coords;  // meters, sensor frame

  std::size_t size() const { return static_cast<std::size_t>(coords.rows()); }
  bool valid() const { return coords.rows() >= 1 && coords.allFinite(); }
};

struct FramePair {
  RgbFrame image;
  PointCloudFrame cloud;
};

struct GaitSequence {
  std::string seq_id;
  std::string identity;
  int view = 0;
  int distance_m = 10;
  std::string condition = "clean";
  std::vector<FramePair> frames;
};

// Greedy max-min subsampling. Returns all indices when the cloud already has
// at most `target` points; otherwise `target` distinct indices in selection
// order, starting from `start`, ties going to the lowest index.
template <class T>
std::vector<std::size_t> farthest_point_sample(const Points<T>& points, std::size_t target, std::size_t start = 0) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n == 0) throw Error(ErrorCode::empty_input, "empty point cloud");
  if (target < 1) throw Error(ErrorCode::usage, "farthest_point_sample: target must be >= 1");
  if (start >= n) throw Error(ErrorCode::usage, "farthest_point_sample: start index out of range");
  std::vector<std::size_t> out;
  if (n <= target) {
    out.resize(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  out.reserve(target);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t cur = start;
  for (std::size_t step = 0; step < target; ++step) {
    out.push_back(cur);
    taken[cur] = 1;
    if (step + 1 == target) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (taken[j]) continue;
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff = static_cast<double>(points(static_cast<Eigen::Index>(j), c)) -
                            static_cast<double>(points(static_cast<Eigen::Index>(cur), c));
        d2 += diff * diff;
      }
      if (d2 < min_d2[j]) min_d2[j] = d2;
      if (min_d2[j] > best_d) {
        best_d = min_d2[j];
        best = j;
      }
    }
    cur = best;
  }
  return out;
}

template <class T>
Points<T> select_points(const Points<T>& points, const std::vector<std::size_t>& index) {
  Points<T> out(static_cast<Eigen::Index>(index.size()), 3);
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(static_cast<Eigen::Index>(index[i]));
  return out;
}

// Centers on the centroid and scales into the unit ball. A cloud whose
// points all coincide maps to the origin.
template <class T>
Points<T> normalize_points(const Points<T>& points) {
  if (points.rows() == 0) throw Error(ErrorCode::empty_input, "empty point cloud");
  Eigen::Matrix<T, 1, 3> centroid = points.colwise().mean();
  Points<T> out = points.rowwise() - centroid;
  T max_norm = out.rowwise().norm().maxCoeff();
  if (max_norm > T(0)) out /= max_norm;
  return out;
}

// Bilinear resampling with half-pixel centers and edge clamping.
inline RgbFrame resize_frame(const RgbFrame& frame, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw Error(ErrorCode::usage, "resize_frame: target dims must be >= 1");
  RgbFrame out(out_h, out_w);
  out.source_size = frame.source_size;
  const double sy = static_cast<double>(frame.height) / out_h;
  const double sx = static_cast<double>(frame.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(frame.height - 1));
    int y0 = static_cast<int>(std::floor(fy));
    int y1 = std::min(y0 + 1, frame.height - 1);
    double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(frame.width - 1));
      int x0 = static_cast<int>(std::floor(fx));
      int x1 = std::min(x0 + 1, frame.width - 1);
      double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        double v = (1 - wy) * ((1 - wx) * frame.at(y0, x0, c) + wx * frame.at(y0, x1, c)) +
                   wy * ((1 - wx) * frame.at(y1, x0, c) + wx * frame.at(y1, x1, c));
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

enum class SampleMode { random, uniform };

// `uniform` picks floor(j·n/count); `random` draws without replacement when
// n >= count (returned in ascending order) and with replacement otherwise.
inline std::vector<std::size_t> sample_frame_indices(std::size_t n, std::size_t count, SampleMode mode,
                                                     std::uint64_t seed) {
  if (n == 0) throw Error(ErrorCode::empty_input, "sample_frames: empty sequence");
  if (count < 1) throw Error(ErrorCode::usage, "sample_frames: count must be >= 1");
  std::vector<std::size_t> idx(count);
  if (mode == SampleMode::uniform) {
    for (std::size_t j = 0; j < count; ++j) idx[j] = j * n / count;
    return idx;
  }
  std::mt19937_64 rng(seed);
  if (n >= count) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t j = 0; j < count; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, n - 1);
      std::swap(all[j], all[pick(rng)]);
    }
    std::copy_n(all.begin(), count, idx.begin());
    std::sort(idx.begin(), idx.end());
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (auto& i : idx) i = pick(rng);
  }
  return idx;
}

inline GaitSequence sample_frames(const GaitSequence& seq, std::size_t count, SampleMode mode, std::uint64_t seed) {
  GaitSequence out = seq;
  out.frames.clear();
  for (std::size_t i : sample_frame_indices(seq.frames.size(), count, mode, seed)) out.frames.push_back(seq.frames[i]);
  return out;
}

}  // namespace emgait
