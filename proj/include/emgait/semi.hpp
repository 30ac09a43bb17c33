#pragma once

// Body-part semantic mining: a frozen vision-language backend supplies a
// global visual embedding and a text encoder; an inversion network maps the
// visual embedding to a pseudo word that fills the [X] slot of one prompt per
// body part, and a trainable adapter projects the pooled text features to the
// model width.

#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/backbones.hpp"
#include "emgait/data.hpp"
#include "emgait/error.hpp"
#include "emgait/nn.hpp"

namespace emgait {

inline constexpr const char* kPlaceholder = "[X]";
inline constexpr const char* kPartSlot = "[PART]";

struct PromptTemplate {
  std::string text = "A photo of the [PART] of a [X] person";
  std::vector<std::string> parts{"head", "arms", "torso", "legs", "feet"};

  void validate() const {
    if (parts.size() != 5) throw Error(ErrorCode::config, "prompt template needs exactly 5 body parts");
    std::size_t n = 0;
    for (std::size_t pos = text.find(kPlaceholder); pos != std::string::npos; pos = text.find(kPlaceholder, pos + 1)) ++n;
    if (n != 1) throw Error(ErrorCode::config, "prompt template must contain [X] exactly once");
    if (text.find(kPartSlot) == std::string::npos) throw Error(ErrorCode::config, "prompt template has no [PART] slot");
  }

  // Lower-cased whitespace tokens of the prompt for one part; [X] is kept verbatim.
  std::vector<std::string> tokens(const std::string& part) const {
    std::string s = text;
    s.replace(s.find(kPartSlot), std::string(kPartSlot).size(), part);
    std::istringstream is(s);
    std::vector<std::string> out;
    for (std::string w; is >> w;) {
      if (w != kPlaceholder)
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      out.push_back(w);
    }
    return out;
  }
};

struct SemiConfig {
  std::string backend = "stub";
  int d_visual = 64;
  int d_text = 64;
  int visual_grid = 8;  // stub visual encoder reads a grid×grid thumbnail
  std::uint64_t stub_seed = 7;
  bool sequence_average = false;
};

// Frozen encoder pair. Text encoding consumes token embedding rows grouped
// into prompts by offsets and returns one pooled row per prompt.
template <class T>
class SemanticBackend {
 public:
  virtual ~SemanticBackend() = default;
  virtual std::string name() const = 0;
  virtual int visual_width() const = 0;
  virtual int text_width() const = 0;
  virtual Mat<T> encode_visual(const RgbFrame& frame) const = 0;
  virtual Mat<T> token_embeddings(const std::vector<std::string>& tokens) const = 0;
  virtual Var encode_text(Tape<T>& t, Var token_rows, const std::vector<Eigen::Index>& offsets) const = 0;
};

// Seeded linear maps: visual = standardize(thumbnail)·W + b; text = mean(tokens)·W.
template <class T>
class StubBackend final : public SemanticBackend<T> {
 public:
  StubBackend(ParamStore<T>& store, const SemiConfig& cfg, std::mt19937_64&) : cfg_(cfg) {
    std::mt19937_64 rng(cfg.stub_seed);
    const int in = cfg.visual_grid * cfg.visual_grid * 3;
    visual_w_ = &store.add("semi.backend.visual.weight", in, cfg.d_visual, 1.0 / std::sqrt(static_cast<double>(in)), rng, false);
    visual_b_ = &store.add("semi.backend.visual.bias", 1, cfg.d_visual, 0.1, rng, false);
    static const std::vector<std::string> vocab{"<sot>", "<eot>", "a",    "photo", "of",   "the",  "person",
                                                "head",  "arms",  "torso", "legs", "feet", "[X]"};
    for (std::size_t i = 0; i < vocab.size(); ++i) vocab_[vocab[i]] = static_cast<Eigen::Index>(i);
    embed_ = &store.add("semi.backend.token_embedding", static_cast<Eigen::Index>(vocab.size()), cfg.d_text, 1.0, rng, false);
    text_w_ = &store.add("semi.backend.text.weight", cfg.d_text, cfg.d_text, 1.0 / std::sqrt(static_cast<double>(cfg.d_text)), rng, false);
  }

  std::string name() const override { return "stub"; }
  int visual_width() const override { return cfg_.d_visual; }
  int text_width() const override { return cfg_.d_text; }

  Mat<T> encode_visual(const RgbFrame& frame) const override {
    const RgbFrame thumb = resize_frame(frame, cfg_.visual_grid, cfg_.visual_grid);
    Mat<T> x(1, static_cast<Eigen::Index>(thumb.pixels.size()));
    for (std::size_t i = 0; i < thumb.pixels.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = T(thumb.pixels[i]);
    // Per-thumbnail standardization: global brightness and contrast carry no
    // identity, and a pretrained encoder is largely insensitive to them.
    const T mean = x.mean();
    const T sd = std::sqrt((x.array() - mean).square().mean());
    x = (x.array() - mean) / std::max(sd, T(1e-3));
    return x * visual_w_->value + visual_b_->value;
  }

  // <sot> tokens... <eot>; unknown words fail.
  Mat<T> token_embeddings(const std::vector<std::string>& tokens) const override {
    Mat<T> out(static_cast<Eigen::Index>(tokens.size()) + 2, cfg_.d_text);
    out.row(0) = embed_->value.row(vocab_.at("<sot>"));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto it = vocab_.find(tokens[i]);
      if (it == vocab_.end()) throw Error(ErrorCode::usage, "tokenization failed: unknown token '" + tokens[i] + "'");
      out.row(static_cast<Eigen::Index>(i) + 1) = embed_->value.row(it->second);
    }
    out.row(out.rows() - 1) = embed_->value.row(vocab_.at("<eot>"));
    return out;
  }

  Var encode_text(Tape<T>& t, Var token_rows, const std::vector<Eigen::Index>& offsets) const override {
    return ops::matmul(t, ops::segment_mean(t, token_rows, offsets), t.leaf(*text_w_));
  }

  const Parameter<T>& visual_weight() const { return *visual_w_; }
  const Parameter<T>& visual_bias() const { return *visual_b_; }
  const Parameter<T>& text_weight() const { return *text_w_; }

 private:
  SemiConfig cfg_;
  Parameter<T>* visual_w_ = nullptr;
  Parameter<T>* visual_b_ = nullptr;
  Parameter<T>* embed_ = nullptr;
  Parameter<T>* text_w_ = nullptr;
  std::map<std::string, Eigen::Index> vocab_;
};

template <class T>
std::unique_ptr<SemanticBackend<T>> make_semantic_backend(ParamStore<T>& store, const SemiConfig& cfg, std::mt19937_64& rng) {
  if (cfg.backend == "stub") return std::make_unique<StubBackend<T>>(store, cfg, rng);
  throw Error(ErrorCode::backend_unavailable, "semantic backend '" + cfg.backend +
                                                  "' is unavailable: pretrained vision-language weights are not bundled "
                                                  "with this build (use \"stub\")");
}

template <class T>
class SemanticMiner {
 public:
  SemanticMiner() = default;
  SemanticMiner(ParamStore<T>& store, const SemiConfig& cfg, int width, std::mt19937_64& rng,
                PromptTemplate prompt = PromptTemplate{})
      : cfg_(cfg), prompt_(std::move(prompt)) {
    prompt_.validate();
    backend_ = make_semantic_backend<T>(store, cfg, rng);
    inversion_ = Mlp2<T>::make(store, "semi.inversion", backend_->visual_width(), backend_->text_width(),
                               backend_->text_width(), rng);
    adapter_ = Linear<T>::make(store, "semi.adapter", backend_->text_width(), width, rng);
    // Per part: token rows with the placeholder row left at zero and its position.
    for (const auto& part : prompt_.parts) {
      std::vector<std::string> toks = prompt_.tokens(part);
      const auto x = std::find(toks.begin(), toks.end(), std::string(kPlaceholder));
      const Eigen::Index pos = static_cast<Eigen::Index>(x - toks.begin()) + 1;
      Mat<T> rows = backend_->token_embeddings(toks);
      rows.row(pos).setZero();
      prompt_rows_.push_back(std::move(rows));
      slot_.push_back(pos);
    }
  }

  const SemanticBackend<T>& backend() const { return *backend_; }
  const PromptTemplate& prompt() const { return prompt_; }
  const SemiConfig& config() const { return cfg_; }
  static constexpr Eigen::Index parts() { return 5; }

  Mat<T> encode_visual(const RgbFrame& frame) const { return backend_->encode_visual(frame); }

  Var invert(Tape<T>& t, Var visual) const { return inversion_(t, visual); }

  // pseudo: F×d_text, one pseudo word per frame. Returns (F·5)×d with rows
  // ordered [frame][part] following the prompt's part list.
  Var encode_text(Tape<T>& t, Var pseudo) const {
    const Eigen::Index frames = t.value(pseudo).rows();
    Eigen::Index per_frame = 0;
    for (const auto& r : prompt_rows_) per_frame += r.rows();
    Mat<T> base(frames * per_frame, backend_->text_width());
    std::vector<Eigen::Index> offsets{0}, slots, src;
    for (Eigen::Index f = 0; f < frames; ++f)
      for (std::size_t p = 0; p < prompt_rows_.size(); ++p) {
        const Eigen::Index r0 = offsets.back();
        base.middleRows(r0, prompt_rows_[p].rows()) = prompt_rows_[p];
        slots.push_back(r0 + slot_[p]);
        src.push_back(f);
        offsets.push_back(r0 + prompt_rows_[p].rows());
      }
    Var filled = ops::scatter_rows(t, t.constant(std::move(base)), ops::gather_rows(t, pseudo, std::move(src)), std::move(slots));
    return adapter_(t, backend_->encode_text(t, filled, offsets));
  }

  // visual: F×d_visual rows from encode_visual.
  Var mine(Tape<T>& t, Var visual) const { return encode_text(t, invert(t, visual)); }

 private:
  SemiConfig cfg_;
  PromptTemplate prompt_;
  std::unique_ptr<SemanticBackend<T>> backend_;
  Mlp2<T> inversion_;
  Linear<T> adapter_;
  std::vector<Mat<T>> prompt_rows_;
  std::vector<Eigen::Index> slot_;
};

}  // namespace emgait
