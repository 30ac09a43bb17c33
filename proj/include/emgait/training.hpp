#pragma once

// Identity-balanced sampling, Adam with step decay, the training loop, and
// the checkpoint file.
//
// Checkpoint layout: the 8 bytes "EMGAITCK", uint32 format version, uint64
// header length, a JSON header of that length, then every tensor listed in
// header["tensors"] as row-major little-endian float32 in listed order.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emgait/error.hpp"
#include "emgait/io.hpp"
#include "emgait/losses.hpp"
#include "emgait/model.hpp"

namespace emgait {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  std::vector<int> milestones{750, 1500};
  double decay_factor = 0.1;
  int total_iters = 2000;
  int frames_per_seq = 4;
  int P = 4;
  int K = 4;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int log_every = 1;
  int checkpoint_every = 500;

  void validate() const {
    if (!(lr > 0)) throw Error(ErrorCode::config, "train.lr must be > 0");
    if (!(weight_decay >= 0)) throw Error(ErrorCode::config, "train.weight_decay must be >= 0");
    if (total_iters < 1) throw Error(ErrorCode::config, "train.total_iters must be >= 1");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] < 1 || milestones[i] >= total_iters)
        throw Error(ErrorCode::config, "train.milestones must lie in [1, total_iters)");
      if (i > 0 && milestones[i] <= milestones[i - 1]) throw Error(ErrorCode::config, "train.milestones must be increasing");
    }
    if (frames_per_seq < 1) throw Error(ErrorCode::config, "train.frames_per_seq must be >= 1");
    if (P < 1 || K < 1) throw Error(ErrorCode::config, "train.P and train.K must be >= 1");
    if (log_every < 1 || checkpoint_every < 1) throw Error(ErrorCode::config, "train.log_every and train.checkpoint_every must be >= 1");
  }
};

// Learning rate used for the update at 0-based iteration `iter`.
inline double lr_at(const TrainConfig& cfg, long iter) {
  double lr = cfg.lr;
  for (int m : cfg.milestones)
    if (iter >= m) lr *= cfg.decay_factor;
  return lr;
}

// P distinct labels uniformly without replacement, then K items of each
// (without replacement when the label has ≥ K items). Returns item indices
// grouped by label.
inline std::vector<std::size_t> pk_sample(const std::vector<int>& labels, int P, int K, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  if (P < 1 || K < 1) throw Error(ErrorCode::usage, "pk_sample: P and K must be >= 1");
  if (static_cast<std::size_t>(P) > by_label.size())
    throw Error(ErrorCode::usage, "pk_sample: P=" + std::to_string(P) + " exceeds the " + std::to_string(by_label.size()) +
                                      " available identities");
  std::vector<int> keys;
  for (const auto& [k, v] : by_label) keys.push_back(k);
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  for (std::size_t j = 0; j < static_cast<std::size_t>(P); ++j) std::swap(keys[j], keys[pick(j, keys.size() - 1)]);
  std::vector<std::size_t> out;
  for (int p = 0; p < P; ++p) {
    std::vector<std::size_t> pool = by_label[keys[static_cast<std::size_t>(p)]];
    if (pool.size() >= static_cast<std::size_t>(K)) {
      for (std::size_t j = 0; j < static_cast<std::size_t>(K); ++j) std::swap(pool[j], pool[pick(j, pool.size() - 1)]);
      out.insert(out.end(), pool.begin(), pool.begin() + K);
    } else {
      for (int j = 0; j < K; ++j) out.push_back(pool[pick(0, pool.size() - 1)]);
    }
  }
  return out;
}

// Adam with L2 weight decay folded into the gradient. Frozen parameters are
// skipped and carry no state.
template <class T>
class Adam {
 public:
  Adam(ParamStore<T>& store, const TrainConfig& cfg)
      : store_(&store), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), wd_(cfg.weight_decay) {
    for (const auto& p : store.all()) {
      m_.push_back(p.trainable ? Mat<T>::Zero(p.value.rows(), p.value.cols()) : Mat<T>());
      v_.push_back(p.trainable ? Mat<T>::Zero(p.value.rows(), p.value.cols()) : Mat<T>());
    }
  }

  void step(double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    std::size_t i = 0;
    for (auto& p : store_->all()) {
      Mat<T>& m = m_[i];
      Mat<T>& v = v_[i];
      ++i;
      if (!p.trainable) continue;
      const Mat<T> g = p.grad + T(wd_) * p.value;
      m = T(beta1_) * m + T(1 - beta1_) * g;
      v = T(beta2_) * v + T(1 - beta2_) * g.cwiseProduct(g);
      p.value.array() -= T(lr / c1) * m.array() / ((v.array() / T(c2)).sqrt() + T(eps_));
    }
  }

  long steps() const { return steps_; }
  void set_steps(long s) { steps_ = s; }
  std::vector<Mat<T>>& first_moments() { return m_; }
  std::vector<Mat<T>>& second_moments() { return v_; }
  const std::vector<Mat<T>>& first_moments() const { return m_; }
  const std::vector<Mat<T>>& second_moments() const { return v_; }

 private:
  ParamStore<T>* store_;
  double beta1_, beta2_, eps_, wd_;
  long steps_ = 0;
  std::vector<Mat<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoint

inline constexpr char kCheckpointMagic[8] = {'E', 'M', 'G', 'A', 'I', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::string kind;  // "value", "adam_m" or "adam_v"
  Mat<float> data;
};

struct Checkpoint {
  json config = json::object();
  std::string config_hash;
  long iteration = 0;
  long adam_steps = 0;
  json metrics = json::object();
  std::vector<TensorRecord> tensors;
};

inline std::string serialize_checkpoint(const Checkpoint& c) {
  json header;
  header["format"] = "emgait-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = c.config;
  header["config_hash"] = c.config_hash;
  header["iteration"] = c.iteration;
  header["adam_steps"] = c.adam_steps;
  header["metrics"] = c.metrics;
  json list = json::array();
  for (const auto& t : c.tensors) list.push_back({{"name", t.name}, {"kind", t.kind}, {"rows", t.data.rows()}, {"cols", t.data.cols()}});
  header["tensors"] = list;
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  auto append = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const std::uint32_t ver = kCheckpointVersion;
  const std::uint64_t len = h.size();
  append(&ver, sizeof ver);
  append(&len, sizeof len);
  out += h;
  for (const auto& t : c.tensors) append(t.data.data(), static_cast<std::size_t>(t.data.size()) * sizeof(float));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  auto bad = [](const std::string& m) { return Error(ErrorCode::schema, "checkpoint: " + m); };
  const std::size_t pre = sizeof kCheckpointMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < pre || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw bad("bad magic, not a checkpoint file");
  std::uint32_t ver = 0;
  std::uint64_t len = 0;
  std::memcpy(&ver, bytes.data() + 8, sizeof ver);
  std::memcpy(&len, bytes.data() + 12, sizeof len);
  if (ver != kCheckpointVersion) throw bad("unsupported version " + std::to_string(ver));
  if (len > bytes.size() - pre) throw bad("truncated header");
  json h;
  try {
    h = json::parse(bytes.substr(pre, len));
  } catch (const json::exception& e) {
    throw bad(std::string("header is not valid JSON: ") + e.what());
  }
  Checkpoint c;
  try {
    c.config = h.at("config");
    c.config_hash = h.at("config_hash").get<std::string>();
    c.iteration = h.at("iteration").get<long>();
    c.adam_steps = h.at("adam_steps").get<long>();
    c.metrics = h.at("metrics");
    std::size_t off = pre + len;
    for (const auto& t : h.at("tensors")) {
      TensorRecord r{t.at("name").get<std::string>(), t.at("kind").get<std::string>(), {}};
      const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(float);
      if (rows < 0 || cols < 0 || n > bytes.size() - off) throw bad("truncated tensor data for " + r.name);
      r.data.resize(rows, cols);
      std::memcpy(r.data.data(), bytes.data() + off, n);
      off += n;
      c.tensors.push_back(std::move(r));
    }
    if (off != bytes.size()) throw bad("trailing bytes after tensor data");
  } catch (const json::exception& e) {
    throw bad(std::string("malformed header: ") + e.what());
  }
  return c;
}

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(ErrorCode::io, "cannot open for writing: " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error(ErrorCode::io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, "cannot move " + tmp.string() + " into place: " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::missing_file, "file not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::io, "cannot open: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) { write_file_atomic(path, serialize_checkpoint(c)); }
inline Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path)); }

inline Checkpoint capture(const GaitModel<float>& model, const Adam<float>* opt, const json& config, const std::string& hash,
                          long iteration, json metrics = json::object()) {
  Checkpoint c{config, hash, iteration, opt ? opt->steps() : 0, std::move(metrics), {}};
  for (const auto& p : model.params().all()) c.tensors.push_back({p.name, "value", p.value});
  if (opt) {
    std::size_t i = 0;
    for (const auto& p : model.params().all()) {
      if (p.trainable) {
        c.tensors.push_back({p.name, "adam_m", opt->first_moments()[i]});
        c.tensors.push_back({p.name, "adam_v", opt->second_moments()[i]});
      }
      ++i;
    }
  }
  return c;
}

// Loads weights (and optimizer state when `opt` is given and present).
inline void restore(GaitModel<float>& model, Adam<float>* opt, const Checkpoint& c) {
  std::map<std::pair<std::string, std::string>, const Mat<float>*> table;
  for (const auto& t : c.tensors) table[{t.name, t.kind}] = &t.data;
  std::size_t i = 0;
  bool has_opt = false;
  for (auto& p : model.params().all()) {
    auto it = table.find({p.name, "value"});
    if (it == table.end()) throw Error(ErrorCode::schema, "checkpoint lacks parameter '" + p.name + "'");
    if (it->second->rows() != p.value.rows() || it->second->cols() != p.value.cols())
      throw Error(ErrorCode::schema, "checkpoint shape mismatch for '" + p.name + "'");
    p.value = *it->second;
    if (opt && p.trainable) {
      auto m = table.find({p.name, "adam_m"});
      auto v = table.find({p.name, "adam_v"});
      if (m != table.end() && v != table.end()) {
        opt->first_moments()[i] = *m->second;
        opt->second_moments()[i] = *v->second;
        has_opt = true;
      }
    }
    ++i;
  }
  std::size_t expected = model.params().all().size();
  std::size_t values = 0;
  for (const auto& t : c.tensors) values += t.kind == "value";
  if (values != expected) throw Error(ErrorCode::schema, "checkpoint holds parameters the model does not define");
  if (opt && has_opt) opt->set_steps(c.adam_steps);
}

// ---------------------------------------------------------------------------
// Data

// Loads and prepares the given manifest entries using up to `threads` workers.
inline std::vector<PreparedSequence> prepare_entries(const Manifest& m, const std::vector<const ManifestEntry*>& entries,
                                                     const DataConfig& cfg, unsigned threads = 1) {
  std::vector<PreparedSequence> out(entries.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::string err;
  ErrorCode code = ErrorCode::io;
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      try {
        out[i] = prepare_sequence(load_sequence(m, *entries[i]), cfg);
      } catch (const Error& e) {
        std::lock_guard lk(mu);
        if (err.empty()) err = e.what(), code = e.code();
      } catch (const std::exception& e) {
        std::lock_guard lk(mu);
        if (err.empty()) err = e.what();
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

// Dense class ids 0..C-1 over the sorted identity strings.
inline std::map<std::string, int> class_index(const std::vector<PreparedSequence>& seqs) {
  std::set<std::string> ids;
  for (const auto& s : seqs) ids.insert(s.identity);
  std::map<std::string, int> out;
  for (const auto& id : ids) out.emplace(id, static_cast<int>(out.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Loop

struct StepRecord {
  long iter = 0;
  double lr = 0;
  double loss = 0;
  double triplet = 0;
  double ce = 0;
  long active_triplets = 0;
};

inline json to_json(const StepRecord& r) {
  return json{{"iter", r.iter}, {"lr", r.lr}, {"loss", r.loss}, {"l_tri", r.triplet}, {"l_ce", r.ce}, {"active_triplets", r.active_triplets}};
}

class Trainer {
 public:
  Trainer(GaitModel<float>& model, const std::vector<PreparedSequence>& data, std::vector<int> labels, TrainConfig tcfg,
          LossConfig lcfg)
      : model_(&model), data_(&data), labels_(std::move(labels)), tcfg_(std::move(tcfg)), lcfg_(lcfg), opt_(model.params(), tcfg_) {
    tcfg_.validate();
    lcfg_.validate();
    if (labels_.size() != data.size()) throw Error(ErrorCode::usage, "trainer: one label per sequence required");
    if (data.empty()) throw Error(ErrorCode::empty_input, "trainer: no training sequences");
    if (lcfg_.beta > 0 && model.config().num_classes <= 0)
      throw Error(ErrorCode::config, "cross-entropy weight > 0 needs model.num_classes > 0");
  }

  long iteration() const { return iteration_; }
  void set_iteration(long it) { iteration_ = it; }
  Adam<float>& optimizer() { return opt_; }
  const TrainConfig& config() const { return tcfg_; }
  void inject_nan_at(long it) { inject_nan_at_ = it; }

  // One update; throws divergence on a non-finite loss without touching the weights.
  StepRecord step() {
    const long it = iteration_;
    const std::uint64_t s = mix_seed({tcfg_.seed, static_cast<std::uint64_t>(it), 0x5452ULL});
    const auto picks = pk_sample(labels_, tcfg_.P, tcfg_.K, s);
    std::vector<const PreparedSequence*> seqs;
    std::vector<std::vector<std::size_t>> frames;
    std::vector<int> y;
    for (std::size_t j = 0; j < picks.size(); ++j) {
      const PreparedSequence& ps = (*data_)[picks[j]];
      seqs.push_back(&ps);
      frames.push_back(sample_frame_indices(ps.images.size(), static_cast<std::size_t>(tcfg_.frames_per_seq), SampleMode::random,
                                            mix_seed({s, j})));
      y.push_back(labels_[picks[j]]);
    }
    model_->params().zero_grad();
    Tape<float> t;
    Var parts = model_->forward(t, model_->make_batch(seqs, frames));
    Var logits;
    const bool with_ce = model_->config().num_classes > 0;
    if (with_ce) logits = model_->classify(t, parts);
    auto loss = combined_loss<float>(t, parts, with_ce ? &logits : nullptr, y, model_->parts(), lcfg_);
    StepRecord r{it, lr_at(tcfg_, it), loss.value, loss.triplet, loss.ce, loss.stats.active};
    if (loss.stats.single_identity && !warned_single_) {
      std::cerr << "warning: batch at iteration " << it << " holds a single identity; triplet term is 0 (raise train.P)\n";
      warned_single_ = true;
    }
    if (it == inject_nan_at_) r.loss = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(r.loss))
      throw Error(ErrorCode::divergence, "non-finite loss at iteration " + std::to_string(it));
    t.backward(loss.total);
    opt_.step(r.lr);
    ++iteration_;
    return r;
  }

 private:
  GaitModel<float>* model_;
  const std::vector<PreparedSequence>* data_;
  std::vector<int> labels_;
  TrainConfig tcfg_;
  LossConfig lcfg_;
  Adam<float> opt_;
  long iteration_ = 0;
  long inject_nan_at_ = -1;
  bool warned_single_ = false;
};

struct TrainOutcome {
  long iterations = 0;
  StepRecord last;
  fs::path final_checkpoint;
};

inline std::string checkpoint_name(long iter) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%07ld.bin", iter);
  return buf;
}

// Runs until total_iters, appending to train_log.jsonl and writing periodic
// checkpoints and final.bin under `out_dir`. On divergence a diagnostic
// checkpoint diverged.bin is written and the error is rethrown.
inline TrainOutcome run_training(Trainer& tr, GaitModel<float>& model, const fs::path& out_dir, const json& config,
                                 const std::string& hash, std::ostream* progress = nullptr) {
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::app | std::ios::binary);
  if (!log) throw Error(ErrorCode::io, "cannot open training log in " + out_dir.string());
  const TrainConfig& cfg = tr.config();
  TrainOutcome out;
  while (tr.iteration() < cfg.total_iters) {
    StepRecord r;
    try {
      r = tr.step();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::divergence) throw;
      save_checkpoint(out_dir / "diverged.bin",
                      capture(model, &tr.optimizer(), config, hash, tr.iteration(), json{{"error", e.what()}}));
      throw;
    }
    out.last = r;
    ++out.iterations;
    if (r.iter % cfg.log_every == 0 || tr.iteration() == cfg.total_iters) {
      json rec = to_json(r);
      rec["config_hash"] = hash;
      log << rec.dump() << '\n';
      log.flush();
    }
    if (progress && (r.iter % 50 == 0 || tr.iteration() == cfg.total_iters))
      *progress << "iter " << r.iter << " lr " << r.lr << " loss " << r.loss << " tri " << r.triplet << " ce " << r.ce << std::endl;
    if (tr.iteration() % cfg.checkpoint_every == 0 && tr.iteration() < cfg.total_iters)
      save_checkpoint(out_dir / checkpoint_name(tr.iteration()),
                      capture(model, &tr.optimizer(), config, hash, tr.iteration(), json{{"loss", r.loss}}));
  }
  out.final_checkpoint = out_dir / "final.bin";
  save_checkpoint(out.final_checkpoint,
                  capture(model, &tr.optimizer(), config, hash, tr.iteration(),
                          json{{"loss", out.last.loss}, {"l_tri", out.last.triplet}, {"l_ce", out.last.ce}}));
  return out;
}

}  // namespace emgait
