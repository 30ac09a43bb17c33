// emgait: synth | train | embed | eval
//
// Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 runtime error
// or divergence. EMGAIT_OUTPUT_ROOT prefixes relative output paths.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "emgait/emgait.hpp"

namespace {

using namespace emgait;

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::usage:
    case ErrorCode::config: return 1;
    case ErrorCode::missing_file:
    case ErrorCode::schema:
    case ErrorCode::split_overlap:
    case ErrorCode::io:
    case ErrorCode::empty_input:
    case ErrorCode::degenerate: return 2;
    case ErrorCode::backend_unavailable:
    case ErrorCode::divergence: return 3;
  }
  return 3;
}

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative())
    if (const char* root = std::getenv("EMGAIT_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.config.empty()) finalize(cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, text);
}

void write_resolved(const fs::path& dir, const RunConfig& cfg) {
  write_text(dir / "resolved_config.json", to_json(cfg).dump(2) + "\n");
}

std::vector<const ManifestEntry*> split_entries(const Manifest& m, const std::string& split) {
  if (split == "all") {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : m.entries) out.push_back(&e);
    return out;
  }
  return m.select(split);
}

int cmd_synth(const Common& common, const std::string& out, std::optional<std::uint64_t> render_seed,
              const std::string& split) {
  RunConfig cfg = resolve(common);
  if (common.seed) cfg.synth.master_seed = *common.seed;
  if (render_seed) cfg.synth.render_seed = *render_seed;
  if (split == "train") cfg.synth.split_ratio = 1.0;
  if (split == "test") cfg.synth.split_ratio = 0.0;
  const fs::path dir = output_path(out);
  Manifest m = build_dataset(cfg.synth, dir, common.threads);
  write_resolved(dir, cfg);
  std::cout << "wrote " << m.entries.size() << " sequences to " << (dir / "manifest.jsonl").string() << " (manifest "
            << hex64(fnv1a(manifest_text(m))) << ")\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& data, const std::string& out, const std::string& resume) {
  RunConfig cfg = resolve(common);
  if (common.seed) {
    cfg.train.seed = *common.seed;
    cfg.model.init_seed = *common.seed;
  }
  const Manifest manifest = load_manifest(data);
  const auto entries = manifest.select("train");
  if (entries.empty()) throw Error(ErrorCode::empty_input, "manifest has no train sequences");
  const auto seqs = prepare_entries(manifest, entries, cfg.data, common.threads);
  const auto classes = class_index(seqs);
  if (cfg.model.num_classes == 0) cfg.model.num_classes = static_cast<int>(classes.size());
  if (cfg.model.num_classes < static_cast<int>(classes.size()))
    throw Error(ErrorCode::config, "model.num_classes is smaller than the number of train identities");
  std::vector<int> labels;
  for (const auto& s : seqs) labels.push_back(classes.at(s.identity));

  const std::string hash = config_hash(cfg);
  const json cfg_json = to_json(cfg);
  GaitModel<float> model(cfg.model);
  Trainer trainer(model, seqs, labels, cfg.train, cfg.loss);
  if (const char* inj = std::getenv("EMGAIT_INJECT_NAN_AT"); inj && *inj) trainer.inject_nan_at(std::stol(inj));
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume);
    if (ck.config_hash != hash)
      std::cerr << "warning: resuming from a checkpoint with config hash " << ck.config_hash << " (current " << hash << ")\n";
    restore(model, &trainer.optimizer(), ck);
    trainer.set_iteration(ck.iteration);
    std::cout << "resumed at iteration " << ck.iteration << "\n";
  }
  const fs::path dir = output_path(out);
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  std::cout << "training " << seqs.size() << " sequences, " << classes.size() << " identities, "
            << model.params().trainable_count() << " trainable weights, config " << hash << "\n";
  const TrainOutcome res = run_training(trainer, model, dir, cfg_json, hash, &std::cout);
  std::cout << "done: " << trainer.iteration() << " iterations, final checkpoint " << res.final_checkpoint.string() << "\n";
  return 0;
}

struct Loaded {
  RunConfig cfg;
  std::string hash;
  std::unique_ptr<GaitModel<float>> model;
};

Loaded load_model(const std::string& checkpoint) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  Loaded l;
  l.cfg = config_from_json(ck.config);
  l.hash = ck.config_hash;
  l.model = std::make_unique<GaitModel<float>>(l.cfg.model);
  restore(*l.model, nullptr, ck);
  return l;
}

std::vector<EmbeddingRecord> embed_manifest(const Loaded& l, const std::string& data, const std::string& split, unsigned threads) {
  const Manifest manifest = load_manifest(data);
  const auto entries = split_entries(manifest, split);
  if (entries.empty()) throw Error(ErrorCode::empty_input, "manifest has no sequences in split '" + split + "'");
  const auto seqs = prepare_entries(manifest, entries, l.cfg.data, threads);
  return embed_all(*l.model, seqs, l.cfg.eval.frames, threads);
}

int cmd_embed(const Common& common, const std::string& checkpoint, const std::string& data, const std::string& out,
              const std::string& split_opt) {
  Loaded l = load_model(checkpoint);
  const std::string split = split_opt.empty() ? l.cfg.eval.split : split_opt;
  const auto recs = embed_manifest(l, data, split, common.threads);
  const fs::path path = output_path(out);
  write_text(path, embeddings_text(recs, l.hash));
  std::cout << "wrote " << recs.size() << " embeddings to " << path.string() << "\n";
  return 0;
}

int cmd_eval(const Common& common, const std::string& embeddings, const std::string& checkpoint, const std::string& data,
             const std::string& out, const std::string& protocol, const std::string& split_opt, bool plot) {
  RunConfig cfg;
  std::string hash;
  std::vector<EmbeddingRecord> recs;
  if (!embeddings.empty()) {
    cfg = resolve(common);
    const fs::path p(embeddings);
    if (!fs::exists(p)) throw Error(ErrorCode::missing_file, "embeddings not found: " + p.string());
    std::ifstream is(p);
    recs = parse_embeddings(is, &hash);
  } else {
    if (checkpoint.empty() || data.empty()) throw Error(ErrorCode::usage, "eval needs --embeddings or --checkpoint with --data");
    Loaded l = load_model(checkpoint);
    if (!common.config.empty()) l.cfg.eval = load_config(common.config).eval;
    cfg = l.cfg;
    hash = l.hash;
    recs = embed_manifest(l, data, split_opt.empty() ? cfg.eval.split : split_opt, common.threads);
  }
  if (!protocol.empty()) cfg.eval.protocol.mode = protocol_from_string(protocol);
  if (recs.empty()) throw Error(ErrorCode::empty_input, "no embeddings to evaluate");
  const std::string run_hash = hex64(fnv1a(hash + to_json(cfg).at("eval").dump()));
  const MetricTable table = run_protocol(recs, cfg.eval.protocol, run_hash);
  const fs::path dir = output_path(out);
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  write_text(dir / "metrics.csv", metrics_csv(table));
  write_text(dir / "metrics.json", metrics_json(table).dump(2) + "\n");
  if (plot) write_text(dir / "metrics.svg", metrics_svg(table));
  std::cout << metrics_csv(table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep freed activation buffers in the heap instead of returning them to
  // the kernel after every tape; page faults otherwise dominate small runs.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Multimodal gait recognition: synthetic data, training, embedding and evaluation"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "Run config (JSON); defaults when omitted");
    sub->add_option("--seed", seed, "Override the run seeds");
    sub->add_option("--threads", common.threads, "Worker threads for rendering, loading and embedding")->check(CLI::PositiveNumber);
  };

  std::string out, data, resume, checkpoint, embeddings, protocol, split;
  bool plot = false;

  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset");
  add_common(synth);
  synth->add_option("-o,--out", out, "Output dataset directory")->required();
  std::uint64_t render_seed = 0;
  synth->add_option("--render-seed", render_seed, "Render seed: new sequences of the same identities");
  synth->add_option("--split", split, "Put every identity in one split (train or test)")->check(CLI::IsMember({"train", "test"}));

  auto* train = app.add_subcommand("train", "Train on the train split of a manifest");
  add_common(train);
  train->add_option("-d,--data", data, "manifest.jsonl")->required();
  train->add_option("-o,--out", out, "Run directory")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* embed = app.add_subcommand("embed", "Export part embeddings");
  add_common(embed);
  embed->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  embed->add_option("-d,--data", data, "manifest.jsonl")->required();
  embed->add_option("-o,--out", out, "Output embeddings file (.jsonl)")->required();
  embed->add_option("--split", split, "train, test or all (default: eval.split)");

  auto* eval = app.add_subcommand("eval", "Run a retrieval protocol");
  add_common(eval);
  eval->add_option("--embeddings", embeddings, "Embeddings file from `embed`");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint (with --data)");
  eval->add_option("-d,--data", data, "manifest.jsonl");
  eval->add_option("-o,--out", out, "Output directory for metrics.csv / metrics.json")->required();
  eval->add_option("--protocol", protocol, "cross-view or cross-distance");
  eval->add_option("--split", split, "train, test or all (default: eval.split)");
  eval->add_flag("--plot", plot, "Also write a metrics.svg bar chart");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  for (auto* sub : {synth, train, embed, eval})
    if (sub->parsed() && sub->count("--seed")) common.seed = seed;

  try {
    if (synth->parsed())
      return cmd_synth(common, out, synth->count("--render-seed") ? std::optional<std::uint64_t>(render_seed) : std::nullopt, split);
    if (train->parsed()) return cmd_train(common, data, out, resume);
    if (embed->parsed()) return cmd_embed(common, checkpoint, data, out, split);
    if (eval->parsed()) return cmd_eval(common, embeddings, checkpoint, data, out, protocol, split, plot);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
