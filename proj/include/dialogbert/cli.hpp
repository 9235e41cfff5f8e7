// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dialogbert/checkpoint.hpp"
#include "dialogbert/data.hpp"
#include "dialogbert/metrics.hpp"
#include "dialogbert/model.hpp"
#include "dialogbert/objectives.hpp"
#include "dialogbert/train.hpp"

namespace dialogbert::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr std::uint64_t kDefaultSeed = 7;

/// Everything `train` needs besides the corpus contents.
struct TrainArgs {
  std::string corpus;
  std::string vocab;  // optional: load instead of building
  std::string out;
  std::uint64_t seed = kDefaultSeed;
  std::string preset = "tiny";
  std::string objectives = "all";
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double lr = 5e-5;
  std::size_t warmup = 5000;
  std::size_t validate_every = 2000;
  double valid_frac = 0.1;
  std::size_t min_freq = 1;
  double lambda_mur = 1.0;
  double lambda_duor = 1.0;
  double init_std = 0.02;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  bool wall_clock = false;
};

inline nlohmann::json to_json(const TrainArgs& a) {
  return {{"corpus", a.corpus},
          {"vocab", a.vocab},
          {"out", a.out},
          {"seed", a.seed},
          {"preset", a.preset},
          {"objectives", a.objectives},
          {"steps", a.steps},
          {"batch_size", a.batch_size},
          {"lr", a.lr},
          {"warmup", a.warmup},
          {"validate_every", a.validate_every},
          {"valid_frac", a.valid_frac},
          {"min_freq", a.min_freq},
          {"lambda_mur", a.lambda_mur},
          {"lambda_duor", a.lambda_duor},
          {"init_std", a.init_std},
          {"weight_decay", a.weight_decay},
          {"grad_clip", a.grad_clip},
          {"wall_clock", a.wall_clock}};
}

/// Fields present in `j` replace those in `a`.
inline void merge_json(TrainArgs& a, const nlohmann::json& j) {
  try {
    a.corpus = j.value("corpus", a.corpus);
    a.vocab = j.value("vocab", a.vocab);
    a.out = j.value("out", a.out);
    a.seed = j.value("seed", a.seed);
    a.preset = j.value("preset", a.preset);
    a.objectives = j.value("objectives", a.objectives);
    a.steps = j.value("steps", a.steps);
    a.batch_size = j.value("batch_size", a.batch_size);
    a.lr = j.value("lr", a.lr);
    a.warmup = j.value("warmup", a.warmup);
    a.validate_every = j.value("validate_every", a.validate_every);
    a.valid_frac = j.value("valid_frac", a.valid_frac);
    a.min_freq = j.value("min_freq", a.min_freq);
    a.lambda_mur = j.value("lambda_mur", a.lambda_mur);
    a.lambda_duor = j.value("lambda_duor", a.lambda_duor);
    a.init_std = j.value("init_std", a.init_std);
    a.weight_decay = j.value("weight_decay", a.weight_decay);
    a.grad_clip = j.value("grad_clip", a.grad_clip);
    a.wall_clock = j.value("wall_clock", a.wall_clock);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
}

inline OptimConfig optim_config(const TrainArgs& a) {
  OptimConfig c;
  c.lr_peak = a.lr;
  c.warmup_steps = a.warmup;
  c.max_steps = a.steps;
  c.validate_every = a.validate_every;
  c.weight_decay = a.weight_decay;
  c.grad_clip_norm = a.grad_clip;
  c.validate();
  return c;
}

inline ModelConfig model_config(const TrainArgs& a, std::size_t vocab_size) {
  ModelConfig c = ModelConfig::preset(a.preset, vocab_size);
  c.init_std = a.init_std;
  c.validate();
  return c;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const ObjectiveSet objectives = parse_objective_set(a.objectives);
  if (a.batch_size < 1) throw ValueError("--batch-size must be at least 1");
  const OptimConfig optim = optim_config(a);
  const std::vector<Dialogue> corpus = load_corpus(a.corpus);
  if (corpus.empty()) throw ValueError("corpus " + a.corpus + " holds no dialogues");
  const CorpusSplit split = split_corpus(corpus, a.valid_frac);
  const Vocab vocab = a.vocab.empty() ? Vocab::build(split.train, a.min_freq) : Vocab::load(a.vocab);
  const auto train_samples = make_samples(split.train, vocab);
  const auto valid_samples = make_samples(split.valid, vocab);
  const auto pool = utterance_pool(split.train, vocab);
  if (train_samples.empty()) throw ValueError("no training samples (dialogues need at least two utterances)");

  const ModelConfig cfg = model_config(a, vocab.size());
  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  vocab.save(dir / "vocab.txt");
  write_text(dir / "run_config.json", nlohmann::json{{"args", to_json(a)},
                                                     {"model", to_json(cfg)},
                                                     {"optim", to_json(optim)},
                                                     {"seed", a.seed},
                                                     {"vocab_hash", hex64(vocab.hash())}}
                                              .dump(2) + "\n");

  DialogBert<float> model(cfg, a.seed);
  std::ofstream trace(dir / "trace.tsv", std::ios::binary | std::ios::trunc);
  if (!trace) throw IoError("cannot write " + (dir / "trace.tsv").string());
  TrainOptions opt;
  opt.optim = optim;
  opt.objectives = objectives;
  opt.weights = {a.lambda_mur, a.lambda_duor};
  opt.batch_size = a.batch_size;
  opt.seed = a.seed;
  opt.wall_clock = a.wall_clock;
  opt.checkpoint = dir / "checkpoint.bin";
  opt.vocab_hash = vocab.hash();
  opt.trace = &trace;
  err << "train: " << corpus.size() << " dialogues (" << split.train.size() << " train, "
      << (split.valid_is_train ? std::string("validating on train") : std::to_string(split.valid.size()) + " valid")
      << "), " << train_samples.size() << " samples, vocab " << vocab.size() << ", objectives "
      << objective_set_name(objectives) << "\n";
  const auto& valid = split.valid_is_train || valid_samples.empty() ? train_samples : valid_samples;
  const TrainState st = train(model, std::span<const ContextSample>(train_samples),
                              std::span<const ContextSample>(valid), std::span<const Utterance>(pool), opt);
  for (const auto& v : st.validations) err << "valid step " << v.step << " l_dec " << v.l_dec << "\n";
  if (st.skipped_steps > 0) err << "train: skipped " << st.skipped_steps << " steps with non-finite gradients\n";
  out << "best validation l_dec " << st.best_valid << " at step " << st.best_step << "; checkpoint "
      << opt.checkpoint.string() << "\n";
  return kExitOk;
}

struct ModelArgs {
  std::string checkpoint;
  std::string vocab;
};

struct LoadedArtifacts {
  std::unique_ptr<DialogBert<float>> model;
  Vocab vocab;
};

inline LoadedArtifacts load_artifacts(const ModelArgs& a) {
  LoadedArtifacts out;
  out.vocab = Vocab::load(a.vocab);
  auto loaded = load_checkpoint<float>(a.checkpoint);
  if (loaded.vocab_hash != out.vocab.hash()) {
    throw ValueError("vocabulary " + a.vocab + " does not match checkpoint " + a.checkpoint + " (hash " +
                     hex64(out.vocab.hash()) + " vs " + hex64(loaded.vocab_hash) + ")");
  }
  out.model = std::move(loaded.model);
  return out;
}

/// One context per line, utterances separated by tabs; "-" is stdin.
inline std::vector<Dialogue> read_contexts(const std::string& path) {
  if (path == "-") return parse_dialogues(std::cin, 1);
  return load_corpus(path, 1);
}

inline Context encode_context_lines(const Dialogue& d, const Vocab& vocab, std::size_t max_len) {
  Context ctx;
  for (const auto& u : d.utterances) ctx.push_back(vocab.encode_text(u, max_len));
  return ctx;
}

inline int cmd_generate(const ModelArgs& m, const std::string& context_path, std::ostream& out, std::ostream& err) {
  auto art = load_artifacts(m);
  const auto& cfg = art.model->config();
  std::size_t n = 0;
  for (const auto& d : read_contexts(context_path)) {
    ++n;
    Context ctx = encode_context_lines(d, art.vocab, cfg.max_utt_len);
    if (ctx.size() > cfg.max_ctx_utts) {
      err << "context " << n << ": using the last " << cfg.max_ctx_utts << " of " << ctx.size() << " utterances\n";
      ctx = truncate_context(std::move(ctx), cfg.max_ctx_utts);
    }
    out << art.vocab.decode_text(art.model->generate(ctx)) << "\n";
  }
  return kExitOk;
}

inline int cmd_evaluate(const ModelArgs& m, const std::string& corpus_path, const std::string& report_path,
                        std::ostream& out, std::ostream&) {
  auto art = load_artifacts(m);
  const auto& cfg = art.model->config();
  const auto samples = make_samples(load_corpus(corpus_path), art.vocab, cfg.max_ctx_utts, cfg.max_utt_len);
  if (samples.empty()) throw ValueError("corpus " + corpus_path + " yields no samples");
  const EvalReport rep = evaluate(*art.model, std::span<const ContextSample>(samples), art.vocab);
  if (!report_path.empty()) write_text(report_path, to_json(rep).dump(2) + "\n");
  out << summary_line(rep) << "\n";
  return kExitOk;
}

inline int cmd_reorder(const ModelArgs& m, const std::string& context_path, std::ostream& out, std::ostream& err) {
  auto art = load_artifacts(m);
  const auto& cfg = art.model->config();
  std::size_t n = 0;
  for (const auto& d : read_contexts(context_path)) {
    ++n;
    Context ctx = encode_context_lines(d, art.vocab, cfg.max_utt_len);
    if (ctx.size() > cfg.max_ctx_utts) {
      err << "context " << n << ": using the last " << cfg.max_ctx_utts << " of " << ctx.size() << " utterances\n";
      ctx = truncate_context(std::move(ctx), cfg.max_ctx_utts);
    }
    const OrderPrediction p = predict_order(*art.model, ctx);
    out << "order:";
    for (const std::size_t i : p.order) out << ' ' << i + 1;
    out << "\nscores:";
    char buf[32];
    for (const double s : p.scores) {
      std::snprintf(buf, sizeof(buf), " %.6f", s);
      out << buf;
    }
    out << "\n";
  }
  return kExitOk;
}

inline int cmd_synth(const std::string& kind, std::size_t dialogues, std::uint64_t seed, const std::string& path,
                     std::ostream& out) {
  const auto corpus = synth_corpus(seed, dialogues, kind);
  save_corpus(path, corpus);
  out << "wrote " << corpus.size() << " dialogues to " << path << "\n";
  return kExitOk;
}

/// Parses and dispatches. Exit codes: 0 success, 1 usage error, 2 runtime error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"DialogBERT: hierarchical Transformer dialogue models"};
  app.require_subcommand(1);

  TrainArgs ta;
  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, vocab, trace and run config");
  train_cmd->add_option("--corpus", ta.corpus, "Dialogue corpus: one dialogue per line, utterances tab-separated");
  train_cmd->add_option("--vocab", ta.vocab, "Existing vocabulary file (built from the corpus when omitted)");
  train_cmd->add_option("--out", ta.out, "Output directory");
  train_cmd->add_option("--config", config_path, "run_config.json from an earlier run; explicit flags win");
  train_cmd->add_option("--seed", ta.seed, "Seed for initialization, batching and objectives")->capture_default_str();
  train_cmd->add_option("--preset", ta.preset, "Model preset")
      ->check(CLI::IsMember({"tiny", "small"}))
      ->capture_default_str();
  train_cmd->add_option("--objectives", ta.objectives, "Objective set")
      ->check(CLI::IsMember({"nug", "nug+mur", "nug+duor", "all"}))
      ->capture_default_str();
  train_cmd->add_option("--steps", ta.steps, "Optimizer updates")->capture_default_str();
  train_cmd->add_option("--batch-size", ta.batch_size, "Samples per update")->capture_default_str();
  train_cmd->add_option("--lr", ta.lr, "Peak learning rate")->capture_default_str();
  train_cmd->add_option("--warmup", ta.warmup, "Linear warmup steps")->capture_default_str();
  train_cmd->add_option("--validate-every", ta.validate_every, "Validation interval in steps")->capture_default_str();
  train_cmd->add_option("--valid-frac", ta.valid_frac, "Fraction of dialogues held out for validation")
      ->capture_default_str();
  train_cmd->add_option("--min-freq", ta.min_freq, "Minimum token count for the built vocabulary")
      ->capture_default_str();
  train_cmd->add_option("--lambda-mur", ta.lambda_mur, "Weight of the masked utterance regression loss")
      ->capture_default_str();
  train_cmd->add_option("--lambda-duor", ta.lambda_duor, "Weight of the utterance order ranking loss")
      ->capture_default_str();
  train_cmd->add_option("--init-std", ta.init_std, "Std of normal weight initialization")->capture_default_str();
  train_cmd->add_option("--weight-decay", ta.weight_decay, "Decoupled weight decay")->capture_default_str();
  train_cmd->add_option("--grad-clip", ta.grad_clip, "Global gradient norm limit (0 disables)")->capture_default_str();
  train_cmd->add_flag("--wall-clock", ta.wall_clock, "Record elapsed time in the trace (breaks bitwise reproducibility)");

  ModelArgs ma;
  std::string context_path;
  auto* gen_cmd = app.add_subcommand("generate", "Greedy responses for contexts, one per input line");
  gen_cmd->add_option("--checkpoint", ma.checkpoint, "Checkpoint file")->required();
  gen_cmd->add_option("--vocab", ma.vocab, "Vocabulary file")->required();
  gen_cmd->add_option("--context", context_path, "Context file (tab-separated utterances per line, - for stdin)")
      ->required();

  ModelArgs ea;
  std::string eval_corpus, report_path = "eval_report.json";
  auto* eval_cmd = app.add_subcommand("evaluate", "Perplexity, BLEU-4 and NIST on a test corpus");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--vocab", ea.vocab, "Vocabulary file")->required();
  eval_cmd->add_option("--corpus", eval_corpus, "Test corpus")->required();
  eval_cmd->add_option("--out", report_path, "Report path (JSON)")->capture_default_str();

  ModelArgs ra;
  std::string reorder_path;
  auto* reorder_cmd = app.add_subcommand("reorder", "Score shuffled utterances and print the predicted order");
  reorder_cmd->add_option("--checkpoint", ra.checkpoint, "Checkpoint file")->required();
  reorder_cmd->add_option("--vocab", ra.vocab, "Vocabulary file")->required();
  reorder_cmd->add_option("--context", reorder_path, "Shuffled utterances, tab-separated, one context per line")
      ->required();

  std::string synth_kind = "deterministic-qa", synth_out;
  std::size_t synth_n = 50;
  std::uint64_t synth_seed = kDefaultSeed;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic corpus");
  synth_cmd->add_option("--kind", synth_kind, "Corpus kind")
      ->check(CLI::IsMember({"deterministic-qa", "ordered-markers"}))
      ->capture_default_str();
  synth_cmd->add_option("--dialogues", synth_n, "Number of dialogues")->capture_default_str();
  synth_cmd->add_option("--seed", synth_seed, "Seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Output corpus path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      if (!config_path.empty()) {
        TrainArgs merged;
        std::ifstream in(config_path);
        if (!in) throw IoError("cannot open run config " + config_path);
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
          throw FormatError("run config " + config_path + ": " + e.what());
        }
        merge_json(merged, j.contains("args") ? j.at("args") : j);
        for (const auto* opt : train_cmd->get_options()) {
          if (opt->count() == 0) continue;
          const std::string name = opt->get_name();
          if (name == "--corpus") merged.corpus = ta.corpus;
          else if (name == "--vocab") merged.vocab = ta.vocab;
          else if (name == "--out") merged.out = ta.out;
          else if (name == "--seed") merged.seed = ta.seed;
          else if (name == "--preset") merged.preset = ta.preset;
          else if (name == "--objectives") merged.objectives = ta.objectives;
          else if (name == "--steps") merged.steps = ta.steps;
          else if (name == "--batch-size") merged.batch_size = ta.batch_size;
          else if (name == "--lr") merged.lr = ta.lr;
          else if (name == "--warmup") merged.warmup = ta.warmup;
          else if (name == "--validate-every") merged.validate_every = ta.validate_every;
          else if (name == "--valid-frac") merged.valid_frac = ta.valid_frac;
          else if (name == "--min-freq") merged.min_freq = ta.min_freq;
          else if (name == "--lambda-mur") merged.lambda_mur = ta.lambda_mur;
          else if (name == "--lambda-duor") merged.lambda_duor = ta.lambda_duor;
          else if (name == "--init-std") merged.init_std = ta.init_std;
          else if (name == "--weight-decay") merged.weight_decay = ta.weight_decay;
          else if (name == "--grad-clip") merged.grad_clip = ta.grad_clip;
          else if (name == "--wall-clock") merged.wall_clock = ta.wall_clock;
        }
        ta = merged;
      }
      if (ta.corpus.empty() || ta.out.empty()) {
        err << "train: --corpus and --out are required (directly or through --config)\n";
        return kExitUsage;
      }
      return cmd_train(ta, out, err);
    }
    if (*gen_cmd) return cmd_generate(ma, context_path, out, err);
    if (*eval_cmd) return cmd_evaluate(ea, eval_corpus, report_path, out, err);
    if (*reorder_cmd) return cmd_reorder(ra, reorder_path, out, err);
    if (*synth_cmd) return cmd_synth(synth_kind, synth_n, synth_seed, synth_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"dialogbert"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dialogbert::cli
