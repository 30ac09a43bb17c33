#pragma once

// The assembled network: image and point backbones, semantic mining,
// alignment, symmetric fusion, spatio-temporal aggregation and part heads.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/backbones.hpp"
#include "emgait/data.hpp"
#include "emgait/fusion.hpp"
#include "emgait/nn.hpp"
#include "emgait/semi.hpp"
#include "emgait/st_head.hpp"

namespace emgait {

struct DataConfig {
  int image_size = 64;
  int num_points = 128;
  int fps_start = 0;
};

struct ModelConfig {
  ResNet9Config image;
  GraphConvConfig points;
  SemiConfig semi;
  FusionConfig fusion;
  std::vector<int> hpp_bins{1, 2, 4};
  bool use_sga = true;
  bool use_semi = true;
  bool use_st = true;
  int st_hidden = 0;  // hidden width of the spatio-temporal output MLP; 0 = automatic
  std::string st_mlp_init = "identity";  // "identity" (starts as a pass-through) or "random"
  int num_classes = 0;  // per-part classifier heads; 0 leaves them out
  std::string ce_neck = "none";  // "none" or "batch" (per-batch standardization before the classifier)
  std::uint64_t init_seed = 0;

  int width() const { return image.channels[3]; }
};

// One sequence after resizing, FPS and point normalization.
struct PreparedSequence {
  std::string seq_id;
  std::string identity;
  int view = 0;
  int distance_m = 0;
  std::string condition;
  std::vector<RgbFrame> images;
  std::vector<Points<float>> clouds;
};

inline PreparedSequence prepare_sequence(const GaitSequence& seq, const DataConfig& cfg) {
  if (seq.frames.empty()) throw Error(ErrorCode::empty_input, "sequence '" + seq.seq_id + "' has no frames");
  PreparedSequence p{seq.seq_id, seq.identity, seq.view, seq.distance_m, seq.condition, {}, {}};
  for (const auto& f : seq.frames) {
    p.images.push_back(f.image.height == cfg.image_size && f.image.width == cfg.image_size
                           ? f.image
                           : resize_frame(f.image, cfg.image_size, cfg.image_size));
    const auto& pts = f.cloud.coords;
    if (pts.rows() == 0) throw Error(ErrorCode::empty_input, "empty point cloud in sequence '" + seq.seq_id + "'");
    const auto start = static_cast<std::size_t>(std::min<Eigen::Index>(cfg.fps_start, pts.rows() - 1));
    p.clouds.push_back(normalize_points<float>(select_points<float>(pts, farthest_point_sample<float>(pts, static_cast<std::size_t>(cfg.num_points), start))));
  }
  return p;
}

// A minibatch of S sequences × n frames each, flattened for the tape.
template <class T>
struct Batch {
  Eigen::Index sequences = 0;
  Eigen::Index frames = 0;
  Eigen::Index image_size = 0;
  Mat<T> images;                            // (S·n·H·W)×3
  Mat<T> visual;                            // (S·n)×d_visual from the frozen encoder
  Mat<T> points;                            // (Σ N_f)×3
  std::vector<Eigen::Index> point_offsets;  // S·n + 1 entries
};

template <class T>
class GaitModel {
 public:
  explicit GaitModel(const ModelConfig& cfg) : cfg_(cfg) {
    const int d = cfg.width();
    if (cfg.points.channels.empty() || cfg.points.channels.back() != d)
      throw Error(ErrorCode::config, "image and point backbones must end at the same width");
    if (d % cfg.fusion.heads != 0) throw Error(ErrorCode::config, "model width must be divisible by fusion heads");
    const int grid = ResNet9<T>::output_size(cfg.image.input_size);
    for (int b : cfg.hpp_bins)
      if (b < 1 || grid % b != 0)
        throw Error(ErrorCode::config, "hpp bin " + std::to_string(b) + " does not divide feature grid height " + std::to_string(grid));
    std::mt19937_64 rng(mix_seed({cfg.init_seed, 0x4d4f44454cULL}));
    image_net_ = ResNet9<T>(params_, "image", cfg.image, rng);
    point_net_ = PointBackbone<T>(params_, "points", cfg.points, rng);
    if (cfg.use_sga) {
      if (cfg.use_semi)
        semi_ = std::make_unique<SemanticMiner<T>>(params_, cfg.semi, d, rng);
      else
        static_tokens_ = &params_.add("semi.static_tokens", SemanticMiner<T>::parts(), d, 1.0, rng);
    }
    fusion_ = FusionStack<T>::make(params_, cfg.fusion, d, cfg.use_sga, rng);
    if (cfg.use_st) st_ = StFusionParams<T>::make(params_, d, rng, cfg.st_hidden, cfg.st_mlp_init == "identity");
    hpp_ = HppHead<T>::make(params_, cfg.hpp_bins, d, rng);
    if (cfg.num_classes > 0) {
      classifier_w_ = &params_.add("classifier.weight", static_cast<Eigen::Index>(hpp_.parts()) * d, cfg.num_classes,
                                   1.0 / std::sqrt(static_cast<double>(d)), rng);
      classifier_b_ = &params_.add("classifier.bias", hpp_.parts(), cfg.num_classes, 0.0, rng);
    }
  }

  GaitModel(const GaitModel&) = delete;
  GaitModel& operator=(const GaitModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int parts() const { return hpp_.parts(); }
  int width() const { return cfg_.width(); }
  int grid_size() const { return ResNet9<T>::output_size(cfg_.image.input_size); }

  const ResNet9<T>& image_net() const { return image_net_; }
  const PointBackbone<T>& point_net() const { return point_net_; }
  const SemanticMiner<T>* semantic_miner() const { return semi_.get(); }
  const FusionStack<T>& fusion() const { return fusion_; }
  const StFusionParams<T>& st() const { return st_; }
  const HppHead<T>& hpp_head() const { return hpp_; }

  int visual_width() const { return semi_ ? semi_->backend().visual_width() : 0; }

  Batch<T> make_batch(const std::vector<const PreparedSequence*>& seqs,
                      const std::vector<std::vector<std::size_t>>& frame_index) const {
    Batch<T> b;
    b.sequences = static_cast<Eigen::Index>(seqs.size());
    b.frames = seqs.empty() ? 0 : static_cast<Eigen::Index>(frame_index.front().size());
    const Eigen::Index size = cfg_.image.input_size;
    b.image_size = size;
    const Eigen::Index px = size * size;
    b.images.resize(b.sequences * b.frames * px, 3);
    if (semi_) b.visual.resize(b.sequences * b.frames, visual_width());
    Eigen::Index total_points = 0;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      if (static_cast<Eigen::Index>(frame_index[s].size()) != b.frames)
        throw Error(ErrorCode::usage, "make_batch: every sequence needs the same frame count");
      for (std::size_t f : frame_index[s]) total_points += seqs[s]->clouds.at(f).rows();
    }
    b.points.resize(total_points, 3);
    b.point_offsets.assign(1, 0);
    Eigen::Index frame_row = 0;
    for (std::size_t s = 0; s < seqs.size(); ++s)
      for (std::size_t f : frame_index[s]) {
        const RgbFrame& img = seqs[s]->images.at(f);
        if (img.height != size || img.width != size) throw Error(ErrorCode::usage, "make_batch: frame not prepared at model input size");
        b.images.middleRows(frame_row * px, px) = frame_to_rows<T>(img);
        if (semi_) b.visual.row(frame_row) = semi_->encode_visual(img).row(0);
        const Points<float>& c = seqs[s]->clouds.at(f);
        b.points.middleRows(b.point_offsets.back(), c.rows()) = c.template cast<T>();
        b.point_offsets.push_back(b.point_offsets.back() + c.rows());
        ++frame_row;
      }
    return b;
  }

  // Returns the part embeddings, (S·p)×d with rows ordered [sequence][part].
  Var forward(Tape<T>& t, const Batch<T>& b) const {
    const Eigen::Index frames_total = b.sequences * b.frames;
    const Eigen::Index g = grid_size();
    const Eigen::Index tokens = g * g;
    Var f2d = image_net_.forward(t, t.constant(b.images), frames_total);
    Var f3d = point_net_.forward(t, t.constant(b.points), b.point_offsets);
    const auto tok_off = uniform_offsets(frames_total, tokens);
    const auto& pt_off = b.point_offsets;
    if (cfg_.use_sga) {
      Var sem = semantics(t, b);
      const auto sem_off = uniform_offsets(frames_total, SemanticMiner<T>::parts());
      f2d = sga_align(t, f2d, sem, tok_off, sem_off, fusion_.sga_2d);
      f3d = sga_align(t, f3d, sem, pt_off, sem_off, fusion_.sga_3d);
    }
    std::tie(f2d, f3d) = fuse(t, f2d, f3d, tok_off, pt_off, fusion_);
    Var grid = temporal_maxpool(t, f2d, b.sequences, b.frames, tokens);
    if (cfg_.use_st) {
      Var frame_desc = spatial_avgpool(t, f3d, pt_off);
      grid = st_fuse(t, grid, frame_desc, b.sequences, tokens, b.frames, st_);
    }
    return hpp(t, grid, b.sequences, g, g, hpp_);
  }

  // Per-part classifier logits, (S·p)×C. The optional batch neck removes the
  // offset shared by every embedding in the batch, which the triplet term
  // never sees but which otherwise swamps the classifier.
  Var classify(Tape<T>& t, Var parts) const {
    if (!classifier_w_) throw Error(ErrorCode::usage, "model has no classifier heads");
    if (cfg_.ce_neck == "batch") parts = ops::batch_standardize(t, parts, static_cast<Eigen::Index>(hpp_.parts()));
    return ops::part_linear(t, parts, t.leaf(*classifier_w_), t.leaf(*classifier_b_), hpp_.parts());
  }

 private:
  // (frames·5)×d part semantics, mined per frame or shared across a sequence.
  Var semantics(Tape<T>& t, const Batch<T>& b) const {
    const Eigen::Index frames_total = b.sequences * b.frames;
    if (!semi_) {
      std::vector<Eigen::Index> idx;
      for (Eigen::Index f = 0; f < frames_total; ++f)
        for (Eigen::Index p = 0; p < SemanticMiner<T>::parts(); ++p) idx.push_back(p);
      return ops::gather_rows(t, t.leaf(*static_tokens_), std::move(idx));
    }
    Var visual = t.constant(b.visual);
    if (!cfg_.semi.sequence_average) return semi_->mine(t, visual);
    Var seq_visual = ops::segment_mean(t, visual, uniform_offsets(b.sequences, b.frames));
    Var per_seq = semi_->mine(t, seq_visual);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index s = 0; s < b.sequences; ++s)
      for (Eigen::Index f = 0; f < b.frames; ++f)
        for (Eigen::Index p = 0; p < SemanticMiner<T>::parts(); ++p) idx.push_back(s * SemanticMiner<T>::parts() + p);
    return ops::gather_rows(t, per_seq, std::move(idx));
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  ResNet9<T> image_net_;
  PointBackbone<T> point_net_;
  std::unique_ptr<SemanticMiner<T>> semi_;
  Parameter<T>* static_tokens_ = nullptr;
  FusionStack<T> fusion_;
  StFusionParams<T> st_;
  HppHead<T> hpp_;
  Parameter<T>* classifier_w_ = nullptr;
  Parameter<T>* classifier_b_ = nullptr;
};

}  // namespace emgait
