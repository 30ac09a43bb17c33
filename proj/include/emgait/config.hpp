#pragma once

// Run configuration: one JSON document with sections synth, data, model,
// loss, train and eval. Reading rejects unknown keys and wrong types, naming
// the offending key path; writing always materializes every field, so the
// dump of a resolved config is its canonical form and its hash identifies
// the run.

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "emgait/error.hpp"
#include "emgait/evaluation.hpp"
#include "emgait/io.hpp"
#include "emgait/losses.hpp"
#include "emgait/model.hpp"
#include "emgait/synth.hpp"
#include "emgait/training.hpp"

namespace emgait {

struct EvalConfig {
  int frames = 0;  // frames per sequence at embedding time; 0 = all
  std::string split = "test";
  ProtocolSpec protocol;
};

struct RunConfig {
  DatasetConfig synth;
  DataConfig data;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;
};

namespace detail {

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};
template <class T, std::size_t N>
struct is_vector<std::array<T, N>> : std::true_type {};

template <class T>
bool json_is(const json& j) {
  if constexpr (std::is_same_v<T, bool>) return j.is_boolean();
  else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) return j.is_number_unsigned();
  else if constexpr (std::is_integral_v<T>) return j.is_number_integer();
  else if constexpr (std::is_floating_point_v<T>) return j.is_number();
  else if constexpr (std::is_same_v<T, std::string>) return j.is_string();
  else if constexpr (is_vector<T>::value) {
    if (!j.is_array()) return false;
    for (const auto& e : j)
      if (!json_is<typename T::value_type>(e)) return false;
    return true;
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

template <class T>
const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) return "a non-negative integer";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "an array";
}

class Writer {
 public:
  json out = json::object();
  template <class T>
  void operator()(const char* key, const T& v) { out[key] = v; }
  template <class S>
  void section(const char* key, S& s);
};

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorCode::config, "config: '" + label() + "' must be an object");
  }

  template <class T>
  void operator()(const char* key, T& v) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& x = j_.at(key);
    if (!json_is<T>(x)) throw Error(ErrorCode::config, "config: key '" + child(key) + "' must be " + type_name<T>());
    if constexpr (std::is_same_v<T, std::array<int, 4>>) {
      if (x.size() != 4) throw Error(ErrorCode::config, "config: key '" + child(key) + "' must have 4 entries");
    }
    v = x.get<T>();
  }

  template <class S>
  void section(const char* key, S& s);

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw Error(ErrorCode::config, "config: unknown key '" + child(k) + "'");
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  std::string child(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class V>
void fields(V& v, SynthConfig& c) {
  v("image_size", c.image_size);
  v("base_points", c.base_points);
  v("image_noise", c.image_noise);
  v("night_brightness", c.night_brightness);
  v("night_noise", c.night_noise);
  v("point_noise", c.point_noise);
  v("frame_height_m", c.frame_height_m);
  v("proportion_sigma", c.proportion_sigma);
  v("min_proportion", c.min_proportion);
  v("max_proportion", c.max_proportion);
}

template <class V>
void fields(V& v, DatasetConfig& c) {
  v("identities", c.identities);
  v("views", c.views);
  v("distances", c.distances);
  v("conditions", c.conditions);
  v("frames_per_seq", c.frames_per_seq);
  v("master_seed", c.master_seed);
  v("render_seed", c.render_seed);
  v("split_ratio", c.split_ratio);
  v.section("render", c.synth);
}

template <class V>
void fields(V& v, DataConfig& c) {
  v("image_size", c.image_size);
  v("num_points", c.num_points);
  v("fps_start", c.fps_start);
}

template <class V>
void fields(V& v, ResNet9Config& c) {
  v("channels", c.channels);
}

template <class V>
void fields(V& v, GraphConvConfig& c) {
  v("k", c.k);
  v("channels", c.channels);
}

template <class V>
void fields(V& v, SemiConfig& c) {
  v("backend", c.backend);
  v("d_visual", c.d_visual);
  v("d_text", c.d_text);
  v("visual_grid", c.visual_grid);
  v("stub_seed", c.stub_seed);
  v("sequence_average", c.sequence_average);
}

template <class V>
void fields(V& v, FusionConfig& c) {
  v("heads", c.heads);
  v("scaf_layers", c.scaf_layers);
  v("residual", c.residual);
  v("tie_directions", c.tie_directions);
  v("tie_sga", c.tie_sga);
}

template <class V>
void fields(V& v, ModelConfig& c) {
  v.section("image", c.image);
  v.section("points", c.points);
  v.section("semi", c.semi);
  v.section("fusion", c.fusion);
  v("hpp_bins", c.hpp_bins);
  v("use_sga", c.use_sga);
  v("use_semi", c.use_semi);
  v("use_st", c.use_st);
  v("st_hidden", c.st_hidden);
  v("st_mlp_init", c.st_mlp_init);
  v("num_classes", c.num_classes);
  v("ce_neck", c.ce_neck);
  v("init_seed", c.init_seed);
}

template <class V>
void fields(V& v, LossConfig& c) {
  v("alpha", c.alpha);
  v("beta", c.beta);
  v("margin", c.margin);
  v("ce_label_smoothing", c.ce_label_smoothing);
}

template <class V>
void fields(V& v, TrainConfig& c) {
  v("lr", c.lr);
  v("weight_decay", c.weight_decay);
  v("milestones", c.milestones);
  v("decay_factor", c.decay_factor);
  v("total_iters", c.total_iters);
  v("frames_per_seq", c.frames_per_seq);
  v("P", c.P);
  v("K", c.K);
  v("seed", c.seed);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("eps", c.eps);
  v("log_every", c.log_every);
  v("checkpoint_every", c.checkpoint_every);
}

template <class V>
void fields(V& v, ProtocolSpec& c) {
  // The mode is stored by name.
  std::string mode = to_string(c.mode);
  v("mode", mode);
  if constexpr (std::is_same_v<V, Reader>) c.mode = protocol_from_string(mode);
  v("ranks", c.ranks);
  v("with_map", c.with_map);
  v("gallery_conditions", c.gallery_conditions);
  v("probe_conditions", c.probe_conditions);
  v("exclude_same_view", c.exclude_same_view);
  v("gallery_condition", c.gallery_condition);
  v("gallery_distance_m", c.gallery_distance_m);
  v("probe_distances_m", c.probe_distances_m);
  v("exclude_same_view_cross_distance", c.exclude_same_view_cross_distance);
}

template <class V>
void fields(V& v, EvalConfig& c) {
  v("frames", c.frames);
  v("split", c.split);
  v.section("protocol", c.protocol);
}

template <class V>
void fields(V& v, RunConfig& c) {
  v.section("synth", c.synth);
  v.section("data", c.data);
  v.section("model", c.model);
  v.section("loss", c.loss);
  v.section("train", c.train);
  v.section("eval", c.eval);
}

template <class S>
void Writer::section(const char* key, S& s) {
  Writer w;
  fields(w, s);
  out[key] = std::move(w.out);
}

template <class S>
void Reader::section(const char* key, S& s) {
  seen_.insert(key);
  if (!j_.contains(key)) return;
  Reader r(j_.at(key), child(key));
  fields(r, s);
  r.finish();
}

}  // namespace detail

// Cross-field checks and derived values (the image backbone input follows
// data.image_size).
inline void finalize(RunConfig& c) {
  c.model.image.input_size = c.data.image_size;
  if (c.data.image_size < 8) throw Error(ErrorCode::config, "config: data.image_size must be >= 8");
  if (c.data.num_points < 2) throw Error(ErrorCode::config, "config: data.num_points must be >= 2");
  if (c.data.fps_start < 0) throw Error(ErrorCode::config, "config: data.fps_start must be >= 0");
  for (int ch : c.model.image.channels)
    if (ch < 1) throw Error(ErrorCode::config, "config: model.image.channels must be positive");
  if (c.model.points.channels.empty()) throw Error(ErrorCode::config, "config: model.points.channels must be nonempty");
  if (c.model.points.k < 1) throw Error(ErrorCode::config, "config: model.points.k must be >= 1");
  if (c.model.points.channels.back() != c.model.width())
    throw Error(ErrorCode::config, "config: model.points.channels must end at model.image.channels[3]");
  if (c.model.fusion.heads < 1 || c.model.width() % c.model.fusion.heads != 0)
    throw Error(ErrorCode::config, "config: model width must be divisible by model.fusion.heads");
  if (c.model.fusion.scaf_layers < 0) throw Error(ErrorCode::config, "config: model.fusion.scaf_layers must be >= 0");
  if (c.model.use_semi && !c.model.use_sga)
    throw Error(ErrorCode::config, "config: model.use_semi requires model.use_sga (semantics only feed the alignment blocks)");
  if (c.model.semi.visual_grid < 1 || c.model.semi.d_visual < 1 || c.model.semi.d_text < 1)
    throw Error(ErrorCode::config, "config: model.semi sizes must be positive");
  if (c.model.ce_neck != "none" && c.model.ce_neck != "batch")
    throw Error(ErrorCode::config, "config: model.ce_neck must be none or batch");
  if (c.model.st_hidden < 0) throw Error(ErrorCode::config, "config: model.st_hidden must be >= 0 (0 = automatic)");
  if (c.model.st_mlp_init != "random" && c.model.st_mlp_init != "identity")
    throw Error(ErrorCode::config, "config: model.st_mlp_init must be random or identity");
  if (c.model.st_mlp_init == "identity" && c.model.st_hidden > 0 && c.model.st_hidden < 2 * c.model.width())
    throw Error(ErrorCode::config, "config: model.st_mlp_init identity needs model.st_hidden >= 2 x model width");
  if (c.model.num_classes < 0) throw Error(ErrorCode::config, "config: model.num_classes must be >= 0 (0 = from data)");
  const int grid = ResNet9<float>::output_size(c.data.image_size);
  for (int b : c.model.hpp_bins)
    if (b < 1 || grid % b != 0)
      throw Error(ErrorCode::config, "config: model.hpp_bins entry " + std::to_string(b) + " does not divide the feature grid height " +
                                         std::to_string(grid));
  if (c.eval.frames < 0) throw Error(ErrorCode::config, "config: eval.frames must be >= 0");
  if (c.eval.split != "train" && c.eval.split != "test" && c.eval.split != "all")
    throw Error(ErrorCode::config, "config: eval.split must be train, test or all");
  if (c.eval.protocol.ranks.empty()) throw Error(ErrorCode::config, "config: eval.protocol.ranks must be nonempty");
  for (int k : c.eval.protocol.ranks)
    if (k < 1) throw Error(ErrorCode::config, "config: eval.protocol.ranks entries must be >= 1");
  c.loss.validate();
  c.train.validate();
}

inline json to_json(const RunConfig& c) {
  detail::Writer w;
  fields(w, const_cast<RunConfig&>(c));
  return w.out;
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::Reader r(j, "");
  fields(r, c);
  r.finish();
  finalize(c);
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_file, "config not found: " + path.string());
  std::ifstream is(path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

}  // namespace emgait
