#pragma once

// Procedural paired image / point-cloud gait sequences.
//
// A walker is a set of capsules (segments with a radius) animated by
// sinusoidal joint phases. Images are orthographic silhouette-style
// renderings; clouds are samples of the sensor-facing capsule surfaces.
// Distance level L in 1..5 lowers the native render resolution and the point
// density (level 1 → 100 %, level 5 → 20 %).

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "emgait/data.hpp"
#include "emgait/error.hpp"
#include "emgait/io.hpp"
#include "emgait/nn.hpp"

namespace emgait {

inline constexpr double kPi = 3.14159265358979323846;

enum class BodyPart : int { head = 0, arms = 1, torso = 2, legs = 3, feet = 4, carried = 5 };

enum class Condition { clean, carry, night };

inline const char* to_string(Condition c) {
  switch (c) {
    case Condition::clean: return "clean";
    case Condition::carry: return "carry";
    case Condition::night: return "night";
  }
  return "clean";
}

inline Condition condition_from_string(const std::string& s) {
  if (s == "clean") return Condition::clean;
  if (s == "carry") return Condition::carry;
  if (s == "night") return Condition::night;
  throw Error(ErrorCode::config, "unknown condition '" + s + "' (expected clean, carry or night)");
}

struct WalkerModel {
  std::uint64_t identity_seed = 0;
  std::array<double, 5> limb_lengths{1, 1, 1, 1, 1};  // head, arms, torso, legs, feet proportions
  int gait_period = 12;                                // frames per stride cycle
  double stride_amplitude = 0.45;                      // hip swing, radians
  std::array<double, 5> phase_offsets{};               // per limb group, radians
};

struct RenderSpec {
  int view = 0;            // azimuth index, view·45°
  int distance_level = 1;  // 1..5
  Condition condition = Condition::clean;
  int n_frames = 16;
  std::uint64_t noise_seed = 0;
};

struct SynthConfig {
  int image_size = 64;
  int base_points = 640;
  double image_noise = 0.02;
  double night_brightness = 0.35;
  double night_noise = 0.08;
  double point_noise = 0.01;  // meters per distance level
  double frame_height_m = 2.6;
  double proportion_sigma = 0.15;
  double min_proportion = 0.5;
  double max_proportion = 1.5;
};

inline double point_density(int level) { return 1.0 - 0.2 * (level - 1); }
inline double render_scale(int level) { return 1.0 / (1.0 + 0.5 * (level - 1)); }

inline WalkerModel generate_walker(std::uint64_t identity_seed, const SynthConfig& cfg = {}) {
  std::mt19937_64 rng(mix_seed({identity_seed, 0x5741'4c4bULL}));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  WalkerModel w;
  w.identity_seed = identity_seed;
  for (auto& l : w.limb_lengths) l = std::clamp(1.0 + cfg.proportion_sigma * nd(rng), cfg.min_proportion, cfg.max_proportion);
  w.gait_period = 10 + static_cast<int>(ud(rng) * 7.0);
  w.stride_amplitude = 0.3 + 0.3 * ud(rng);
  for (auto& p : w.phase_offsets) p = (ud(rng) - 0.5);
  return w;
}

struct Capsule {
  Eigen::Vector3d a;
  Eigen::Vector3d b;
  double radius = 0.05;
  BodyPart part = BodyPart::torso;
};

// Body capsules in the walker frame (x forward, y left, z up) at gait phase `phase`.
inline std::vector<Capsule> pose_capsules(const WalkerModel& w, double phase, bool carry) {
  const auto& L = w.limb_lengths;
  const auto& off = w.phase_offsets;
  const double amp = w.stride_amplitude;
  const double head_d = 0.24 * L[0], arm = 0.62 * L[1], torso = 0.55 * L[2], leg = 0.85 * L[3], foot = 0.2 * L[4];
  std::vector<Capsule> caps;
  const double leg_phase = phase + off[3];
  const double bob = 0.02 * amp * std::cos(2.0 * leg_phase);
  Eigen::Vector3d pelvis(0, 0, leg + bob);
  const double lean = 0.08 * amp * std::sin(phase + off[2]);
  Eigen::Vector3d up(std::sin(lean), 0, std::cos(lean));
  Eigen::Vector3d neck = pelvis + torso * up;
  caps.push_back({pelvis, neck, 0.12 * L[2], BodyPart::torso});
  const double nod = 0.1 * amp * std::sin(2.0 * phase + off[0]);
  Eigen::Vector3d head_dir(std::sin(lean + nod), 0, std::cos(lean + nod));
  caps.push_back({neck + 0.35 * head_d * head_dir, neck + 0.65 * head_d * head_dir, 0.4 * head_d, BodyPart::head});
  const double hip_w = 0.09 * L[2], shoulder_w = 0.19 * L[2];
  Eigen::Vector3d hand_right = neck;
  for (int side : {1, -1}) {
    const double ph = leg_phase + (side > 0 ? 0.0 : kPi);
    const double hip = amp * std::sin(ph);
    const double knee = 0.9 * amp * 0.5 * (1.0 - std::cos(ph));
    Eigen::Vector3d hip_pt = pelvis + Eigen::Vector3d(0, side * hip_w, 0);
    Eigen::Vector3d knee_pt = hip_pt + 0.5 * leg * Eigen::Vector3d(std::sin(hip), 0, -std::cos(hip));
    Eigen::Vector3d ankle = knee_pt + 0.5 * leg * Eigen::Vector3d(std::sin(hip - knee), 0, -std::cos(hip - knee));
    caps.push_back({hip_pt, knee_pt, 0.07, BodyPart::legs});
    caps.push_back({knee_pt, ankle, 0.055, BodyPart::legs});
    const double fa = 0.3 * amp * std::sin(ph + off[4]);
    caps.push_back({ankle, ankle + foot * Eigen::Vector3d(std::cos(fa), 0, std::sin(fa)), 0.035, BodyPart::feet});

    const double arm_phase = ph + kPi + off[1];
    const double swing = 0.8 * amp * std::sin(arm_phase);
    const double elbow = swing + 0.25 + 0.3 * amp * std::max(0.0, std::sin(arm_phase));
    Eigen::Vector3d shoulder = neck + Eigen::Vector3d(0, side * shoulder_w, -0.04);
    Eigen::Vector3d elbow_pt = shoulder + 0.5 * arm * Eigen::Vector3d(std::sin(swing), 0, -std::cos(swing));
    Eigen::Vector3d hand = elbow_pt + 0.5 * arm * Eigen::Vector3d(std::sin(elbow), 0, -std::cos(elbow));
    caps.push_back({shoulder, elbow_pt, 0.045, BodyPart::arms});
    caps.push_back({elbow_pt, hand, 0.04, BodyPart::arms});
    if (side < 0) hand_right = hand;
  }
  if (carry)
    caps.push_back({hand_right + Eigen::Vector3d(0, -0.06, -0.08), hand_right + Eigen::Vector3d(0, -0.06, -0.3), 0.1,
                    BodyPart::carried});
  return caps;
}

namespace detail {

inline std::array<float, 3> part_color(BodyPart p) {
  switch (p) {
    case BodyPart::head: return {0.92f, 0.78f, 0.64f};
    case BodyPart::arms: return {0.80f, 0.80f, 0.86f};
    case BodyPart::torso: return {0.86f, 0.86f, 0.92f};
    case BodyPart::legs: return {0.70f, 0.72f, 0.82f};
    case BodyPart::feet: return {0.60f, 0.60f, 0.62f};
    case BodyPart::carried: return {0.90f, 0.62f, 0.30f};
  }
  return {1, 1, 1};
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

struct Camera {
  Eigen::Vector3d toward;  // unit vector from walker to sensor
  Eigen::Vector3d right;   // image-right direction

  explicit Camera(int view) {
    const double th = view * kPi / 4.0;
    toward = Eigen::Vector3d(std::cos(th), std::sin(th), 0);
    right = Eigen::Vector3d(-std::sin(th), std::cos(th), 0);
  }
};

}  // namespace detail

// Silhouette-style rendering at a native resolution of size·scale pixels;
// no noise, no resize.
inline RgbFrame rasterize(const std::vector<Capsule>& caps, int view, int native, double frame_height_m) {
  detail::Camera cam(view);
  RgbFrame img(native, native);
  const double px_per_m = native / frame_height_m;
  const double ground = native * 0.98;
  struct Flat {
    double ax, ay, bx, by, r, depth;
    BodyPart part;
  };
  std::vector<Flat> flat;
  for (const auto& c : caps) {
    flat.push_back({native / 2.0 + c.a.dot(cam.right) * px_per_m, ground - c.a.z() * px_per_m,
                    native / 2.0 + c.b.dot(cam.right) * px_per_m, ground - c.b.z() * px_per_m, c.radius * px_per_m,
                    0.5 * (c.a + c.b).dot(cam.toward), c.part});
  }
  std::stable_sort(flat.begin(), flat.end(), [](const Flat& x, const Flat& y) { return x.depth < y.depth; });
  for (int y = 0; y < native; ++y)
    for (int x = 0; x < native; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      for (const auto& f : flat) {
        const double d = detail::segment_distance(px, py, f.ax, f.ay, f.bx, f.by);
        const double cov = std::clamp(f.r - d + 0.5, 0.0, 1.0);
        if (cov <= 0.0) continue;
        const auto col = detail::part_color(f.part);
        for (int ch = 0; ch < 3; ++ch)
          img.at(y, x, ch) = static_cast<float>(img.at(y, x, ch) * (1.0 - cov) + col[static_cast<std::size_t>(ch)] * cov);
      }
    }
  return img;
}

// Surface samples of the sensor-facing side of the capsules, in the walker frame.
inline Points<double> sample_surface(const std::vector<Capsule>& caps, const Eigen::Vector3d& toward, int count,
                                     std::mt19937_64& rng) {
  std::vector<double> cdf;
  double total = 0;
  for (const auto& c : caps) {
    const double len = (c.b - c.a).norm();
    total += 2 * kPi * c.radius * len + 4 * kPi * c.radius * c.radius;
    cdf.push_back(total);
  }
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  Points<double> out(count, 3);
  int got = 0;
  for (long attempt = 0; got < count && attempt < 200L * count + 1000; ++attempt) {
    const double u = ud(rng) * total;
    const std::size_t ci = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    const Capsule& c = caps[std::min(ci, caps.size() - 1)];
    Eigen::Vector3d axis = c.b - c.a;
    const double len = axis.norm();
    const double cyl = 2 * kPi * c.radius * len;
    Eigen::Vector3d p, n;
    if (len > 0 && ud(rng) * (cyl + 4 * kPi * c.radius * c.radius) < cyl) {
      axis /= len;
      Eigen::Vector3d helper = std::abs(axis.z()) < 0.9 ? Eigen::Vector3d::UnitZ() : Eigen::Vector3d::UnitX();
      Eigen::Vector3d e1 = axis.cross(helper).normalized();
      Eigen::Vector3d e2 = axis.cross(e1);
      const double psi = 2 * kPi * ud(rng);
      n = std::cos(psi) * e1 + std::sin(psi) * e2;
      p = c.a + ud(rng) * len * axis + c.radius * n;
    } else {
      n = Eigen::Vector3d(nd(rng), nd(rng), nd(rng));
      if (n.norm() == 0) continue;
      n.normalize();
      const bool at_b = len > 0 && n.dot(axis) > 0;
      p = (at_b ? c.b : c.a) + c.radius * n;
    }
    if (n.dot(toward) <= 0) continue;
    out.row(got++) = p.transpose();
  }
  out.conservativeResize(got, 3);
  return out;
}

inline GaitSequence render_sequence(const WalkerModel& w, const RenderSpec& spec, const SynthConfig& cfg = {}) {
  if (spec.n_frames < 1) throw Error(ErrorCode::usage, "render_sequence: n_frames must be >= 1");
  if (spec.distance_level < 1 || spec.distance_level > 5) throw Error(ErrorCode::usage, "render_sequence: distance level must be in 1..5");
  if (spec.view < 0 || spec.view > 7) throw Error(ErrorCode::usage, "render_sequence: view must be in 0..7");
  std::mt19937_64 rng(mix_seed({spec.noise_seed, 0x52454e44ULL}));
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double phase0 = 2 * kPi * ud(rng);
  const int level = spec.distance_level;
  const int native = std::max(8, static_cast<int>(std::lround(cfg.image_size * render_scale(level))));
  const int count = std::max(1, static_cast<int>(std::lround(cfg.base_points * point_density(level))));
  detail::Camera cam(spec.view);
  const Eigen::Vector3d sensor = cam.toward * (10.0 * level) + Eigen::Vector3d(0, 0, 1.0);
  const Eigen::Vector3d forward = -cam.toward;
  const Eigen::Vector3d left = -cam.right;

  GaitSequence seq;
  seq.view = spec.view;
  seq.distance_m = 10 * level;
  seq.condition = to_string(spec.condition);
  for (int t = 0; t < spec.n_frames; ++t) {
    const double phase = phase0 + 2 * kPi * t / w.gait_period;
    const auto caps = pose_capsules(w, phase, spec.condition == Condition::carry);
    RgbFrame native_img = rasterize(caps, spec.view, native, cfg.frame_height_m);
    RgbFrame img = native == cfg.image_size ? native_img : resize_frame(native_img, cfg.image_size, cfg.image_size);
    img.source_size = {native, native};
    const bool night = spec.condition == Condition::night;
    const double sigma = night ? cfg.night_noise : cfg.image_noise;
    const double gain = night ? cfg.night_brightness : 1.0;
    for (auto& v : img.pixels) {
      double x = v * gain;
      if (sigma > 0) x += sigma * nd(rng);
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
    Points<double> body = sample_surface(caps, cam.toward, count, rng);
    PointCloudFrame cloud;
    cloud.coords.resize(body.rows(), 3);
    const double pn = cfg.point_noise * level;
    for (Eigen::Index i = 0; i < body.rows(); ++i) {
      Eigen::Vector3d p = body.row(i).transpose() - sensor;
      if (pn > 0) p += pn * Eigen::Vector3d(nd(rng), nd(rng), nd(rng));
      cloud.coords(i, 0) = static_cast<float>(p.dot(forward));
      cloud.coords(i, 1) = static_cast<float>(p.dot(left));
      cloud.coords(i, 2) = static_cast<float>(p.z());
    }
    seq.frames.push_back(FramePair{std::move(img), std::move(cloud)});
  }
  return seq;
}

struct DatasetConfig {
  int identities = 12;
  std::vector<int> views{0, 2, 4, 6};
  std::vector<int> distances{1, 2};
  std::vector<std::string> conditions{"clean"};
  int frames_per_seq = 16;
  std::uint64_t master_seed = 1;
  std::uint64_t render_seed = 0;
  double split_ratio = 0.5;
  SynthConfig synth;
};

inline std::string identity_label(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "id%03d", i);
  return buf;
}

inline std::uint64_t walker_seed(std::uint64_t master_seed, int identity) {
  return mix_seed({master_seed, static_cast<std::uint64_t>(identity), 0x1D1DULL});
}

// Renders every identity × view × distance × condition combination, writes
// frames and `manifest.jsonl` under `out_dir`, and returns the manifest.
inline Manifest build_dataset(const DatasetConfig& cfg, const fs::path& out_dir, unsigned threads = 1) {
  if (cfg.identities < 1 || cfg.views.empty() || cfg.distances.empty() || cfg.conditions.empty() || cfg.frames_per_seq < 1)
    throw Error(ErrorCode::config, "dataset config selects no sequences");
  if (cfg.split_ratio < 0 || cfg.split_ratio > 1) throw Error(ErrorCode::config, "split_ratio must be in [0, 1]");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + out_dir.string() + ": " + ec.message());

  const int n_train = static_cast<int>(std::lround(cfg.split_ratio * cfg.identities));
  struct Job {
    int identity, view, level;
    std::string condition;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < cfg.identities; ++i)
    for (int v : cfg.views)
      for (int d : cfg.distances)
        for (const auto& c : cfg.conditions) jobs.push_back({i, v, d, c});

  Manifest m;
  m.root = out_dir;
  m.entries.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::string first_error;
  ErrorCode first_code = ErrorCode::io;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      try {
        const Job& j = jobs[k];
        const Condition cond = condition_from_string(j.condition);
        WalkerModel w = generate_walker(walker_seed(cfg.master_seed, j.identity), cfg.synth);
        RenderSpec spec{j.view, j.level, cond, cfg.frames_per_seq,
                        mix_seed({cfg.master_seed, cfg.render_seed, static_cast<std::uint64_t>(j.identity),
                                  static_cast<std::uint64_t>(j.view), static_cast<std::uint64_t>(j.level),
                                  static_cast<std::uint64_t>(cond)})};
        GaitSequence seq = render_sequence(w, spec, cfg.synth);
        ManifestEntry e;
        e.identity = identity_label(j.identity);
        e.view = j.view;
        e.distance_m = 10 * j.level;
        e.condition = j.condition;
        e.split = j.identity < n_train ? "train" : "test";
        e.seq_id = e.identity + "_v" + std::to_string(j.view) + "_d" + std::to_string(e.distance_m) + "_" + j.condition;
        fs::path dir = out_dir / e.seq_id;
        fs::create_directories(dir);
        for (std::size_t f = 0; f < seq.frames.size(); ++f) {
          char name[32];
          std::snprintf(name, sizeof name, "%04zu", f);
          const std::string img = e.seq_id + "/img_" + name + ".png";
          const std::string pc = e.seq_id + "/pc_" + name + ".bin";
          write_png(out_dir / img, seq.frames[f].image);
          write_cloud(out_dir / pc, seq.frames[f].cloud);
          e.frames.push_back({img, pc});
        }
        m.entries[k] = std::move(e);
      } catch (const Error& ex) {
        std::lock_guard lk(err_mu);
        if (first_error.empty()) {
          first_error = ex.what();
          first_code = ex.code();
        }
      } catch (const std::exception& ex) {
        std::lock_guard lk(err_mu);
        if (first_error.empty()) first_error = ex.what();
      }
    }
  };
  const unsigned n = std::max(1u, threads);
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (!first_error.empty()) throw Error(first_code, first_error);
  save_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace emgait
