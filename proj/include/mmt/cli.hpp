// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: synth, pretrain, finetune, eval, ablate, gradcheck.
#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmt/checks.hpp"
#include "mmt/config.hpp"
#include "mmt/data.hpp"
#include "mmt/errors.hpp"
#include "mmt/finetune.hpp"
#include "mmt/log.hpp"
#include "mmt/pretrain.hpp"
#include "mmt/synth.hpp"
#include "mmt/weights.hpp"

namespace mmt {

inline constexpr const char* kVersion = "0.1.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int check_failed = 1;
inline constexpr int usage = 2;
inline constexpr int io = 3;
inline constexpr int data = 4;
inline constexpr int numeric = 5;
inline constexpr int config = 6;
inline constexpr int unsupported = 7;
inline constexpr int internal = 70;
}  // namespace exit_code

namespace fs = std::filesystem;

namespace cli {

// Fixed output file names inside --out.
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kLosses = "losses.tsv";
inline constexpr const char* kReportText = "report.txt";
inline constexpr const char* kReportKv = "report.kv";
inline constexpr const char* kManifest = "manifest.txt";
inline constexpr const char* kData = "data.jsonl";
inline constexpr const char* kEmbeddings = "embeddings.txt";
inline constexpr const char* kGeneration = "generation.txt";

// Resolved run description written to manifest.txt.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> paths;
  std::string config_text;
  std::vector<std::string> config_sources;  // precedence notes, highest first
  std::vector<std::pair<std::string, std::string>> results;
  double seconds = 0.0;

  std::string text() const {
    std::string out = "command = " + command + "\n";
    out += "version = " + std::string(kVersion) + "\n";
    out += "seed = " + std::to_string(seed) + "\n";
    for (const auto& [k, v] : paths) out += "path." + k + " = " + v + "\n";
    for (const auto& s : config_sources) out += "config_source = " + s + "\n";
    out += "wall_seconds = " + detail::fixed(seconds, 3) + "\n";
    for (const auto& [k, v] : results) out += "result." + k + " = " + v + "\n";
    out += "[config]\n" + config_text;
    return out;
  }
};

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

inline std::string join(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

// Options shared by commands that build a model configuration.
struct ConfigOptions {
  std::string preset = "desk";
  std::string file;
  std::vector<std::string> sets;  // key=value

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "Base configuration: desk, toy or full")
        ->check(CLI::IsMember({"desk", "toy", "full"}));
    app->add_option("--config", file, "Configuration file of 'key = value' lines");
    app->add_option("--set", sets, "Override one config entry, key=value (repeatable)");
  }
};

inline ModelConfig preset_config(const std::string& name) {
  if (name == "desk") return ModelConfig::desk();
  if (name == "toy") return ModelConfig::toy();
  if (name == "full") return ModelConfig{};
  throw ConfigError("unknown preset '" + name + "'");
}

struct ResolvedConfig {
  ModelConfig config;
  std::set<std::string> explicit_keys;  // keys set by file or flags
  ConfigEntries entries;                // file entries, then flag entries
  std::vector<std::string> sources;
};

// Precedence: --set flags > --config file > preset defaults.
inline ResolvedConfig resolve_config(const ConfigOptions& o) {
  ResolvedConfig r;
  if (!o.file.empty()) {
    for (auto& e : parse_config_entries(read_config_file(o.file))) r.entries.push_back(std::move(e));
  }
  ConfigEntries flags;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    auto parsed = parse_config_entries(s.substr(0, eq) + " = " + s.substr(eq + 1));
    for (auto& e : parsed) flags.push_back(std::move(e));
  }
  r.entries.insert(r.entries.end(), flags.begin(), flags.end());
  for (const auto& [k, v] : r.entries) r.explicit_keys.insert(k);
  r.config = apply_config_entries(r.entries, preset_config(o.preset));
  if (!flags.empty()) r.sources.push_back("flags (" + std::to_string(flags.size()) + " entries)");
  if (!o.file.empty()) r.sources.push_back("file " + o.file);
  r.sources.push_back("preset " + o.preset);
  return r;
}

// Data-derived fields follow the dataset unless set explicitly, in which case
// a mismatch is a configuration error.
inline void fit_config_to_data(ResolvedConfig& r, const Vocabulary& vocab, const std::vector<MultimodalExample>& data) {
  auto fit = [&](const char* key, std::size_t& field, std::size_t value) {
    if (r.explicit_keys.count(key) && field != value)
      throw ConfigError(std::string("config ") + key + " = " + std::to_string(field) + " but the data requires " +
                        std::to_string(value));
    field = value;
  };
  fit("vocab_size", r.config.vocab_size, vocab.tokens.size());
  fit("text_embedding_dim", r.config.text_embedding_dim, vocab.dim());
  if (!data.empty()) {
    fit("audio_input_dim", r.config.audio_input_dim, data.front().audio.cols() * r.config.audio_stack);
    fit("visual_input_dim", r.config.visual_input_dim, data.front().visual.cols());
  }
}

struct LoadedData {
  Vocabulary vocab;
  std::vector<MultimodalExample> examples;
  OovReport oov;
};

inline LoadedData load_data(const std::string& data_path, std::string embeddings_path) {
  if (!fs::exists(data_path)) throw IoError("data file '" + data_path + "' does not exist");
  if (embeddings_path.empty()) embeddings_path = (fs::path(data_path).parent_path() / kEmbeddings).string();
  LoadedData d;
  EmbeddingLoadReport er;
  d.vocab = load_embeddings(embeddings_path, &er);
  d.examples = read_dataset(data_path);
  d.oov = resolve_tokens(d.examples, d.vocab);
  if (d.examples.empty()) throw DataError("data file '" + data_path + "' has no usable examples");
  return d;
}

inline std::string losses_tsv_finetune(const FinetuneResult& r) {
  std::string out = "run\tepoch\ttrain_loss\tdev_macro_wa\tdev_macro_f1\n";
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    const auto& s = r.runs[i];
    for (std::size_t e = 0; e < s.train_loss.size(); ++e)
      out += std::to_string(i) + "\t" + std::to_string(e + 1) + "\t" + detail::format_double(s.train_loss[e]) + "\t" +
             detail::format_double(s.dev_macro_wa[e]) + "\t" + detail::format_double(s.dev_macro_f1[e]) + "\n";
  }
  return out;
}

inline void write_report(const std::string& out_dir, const EvalReport& report) {
  write_file_atomic(join(out_dir, kReportText), format_report_text(report));
  write_file_atomic(join(out_dir, kReportKv), format_report_kv(report));
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct SynthCmd {
  SynthParams params;
  std::string out;
  bool force = false;

  void add(CLI::App* app) {
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--seed", params.seed, "Generation seed");
    app->add_option("--examples", params.examples, "Number of examples");
    app->add_option("--vocab", params.vocab_size, "Vocabulary size");
    app->add_option("--pairs", params.ambiguity_pairs, "Ambiguity pairs");
    app->add_option("--audio-dim", params.audio_dim, "Raw audio frame width (before stacking)");
    app->add_option("--visual-dim", params.visual_dim, "Visual frame width");
    app->add_option("--text-dim", params.text_dim, "Embedding width");
    app->add_option("--templates", params.templates, "Sentence templates");
    app->add_flag("--force", force, "Overwrite existing output files");
  }

  int run(std::ostream& os) {
    const auto t0 = std::chrono::steady_clock::now();
    params.validate();
    ensure_dir(out);
    for (const char* f : {kData, kEmbeddings, kGeneration, kManifest}) {
      if (!force && fs::exists(join(out, f)))
        throw IoError("output '" + join(out, f) + "' exists; pass --force to overwrite");
    }
    const SynthCorpus c = synth_corpus(params);
    write_dataset(join(out, kData), c.examples);
    write_embeddings(join(out, kEmbeddings), c.world.vocab);
    write_file_atomic(join(out, kGeneration), synth_manifest_text(c));
    RunManifest m;
    m.command = "synth";
    m.seed = params.seed;
    m.paths = {{"out", out}};
    m.results = {{"examples", std::to_string(c.examples.size())}};
    m.seconds = seconds_since(t0);
    write_file_atomic(join(out, kManifest), m.text());
    os << "wrote " << c.examples.size() << " examples to " << join(out, kData) << "\n";
    return exit_code::ok;
  }
};

struct PretrainCmd {
  ConfigOptions cfg;
  std::string data, embeddings, out, loss = "softmax";
  std::size_t epochs = 20;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Dataset file (JSONL)")->required();
    app->add_option("--embeddings", embeddings, "Embedding table (default: embeddings.txt beside the data)");
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--loss", loss, "softmax or nce")->check(CLI::IsMember({"softmax", "nce"}));
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--seed", seed, "Run seed");
    cfg.add(app);
  }

  int run(std::ostream& os) {
    const auto t0 = std::chrono::steady_clock::now();
    ResolvedConfig rc = resolve_config(cfg);
    LoadedData d = load_data(data, embeddings);
    fit_config_to_data(rc, d.vocab, d.examples);
    rc.config.validate();
    const auto prepared = prepare_all(d.examples, d.vocab, rc.config);
    const NoiseDistribution noise(d.vocab.counts);
    ensure_dir(out);
    PretrainOptions po;
    po.loss = parse_loss_kind(loss);
    po.epochs = epochs;
    po.seed = seed;
    po.on_row = [&](const LossLogRow& r) {
      if (r.split == "heldout")
        os << "epoch " << r.epoch << " heldout_loss " << detail::format_double(r.loss) << "\n" << std::flush;
    };
    const PretrainResult res = pretrain_loop(prepared, rc.config, noise, po);
    save_checkpoint(join(out, kCheckpoint), rc.config, res.weights);
    write_file_atomic(join(out, kLosses), format_loss_log(res.log));
    RunManifest m;
    m.command = "pretrain";
    m.seed = seed;
    m.paths = {{"data", data}, {"out", out}};
    m.config_text = config_to_text(rc.config);
    m.config_sources = rc.sources;
    m.results = {{"loss", loss},
                 {"epochs", std::to_string(epochs)},
                 {"best_epoch", std::to_string(res.best_epoch)},
                 {"train_examples", std::to_string(res.train_indices.size())},
                 {"heldout_examples", std::to_string(res.heldout_indices.size())},
                 {"oov_tokens_dropped", std::to_string(d.oov.dropped_tokens)}};
    m.seconds = seconds_since(t0);
    write_file_atomic(join(out, kManifest), m.text());
    return exit_code::ok;
  }
};

struct FinetuneCmd {
  ConfigOptions cfg;
  std::string data, embeddings, out, init = "random";
  std::size_t epochs = 10, runs = 10;
  std::uint64_t seed = 1;
  double dev_fraction = 0.1, test_fraction = 0.1;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Dataset file with emotion scores")->required();
    app->add_option("--embeddings", embeddings, "Embedding table (default: embeddings.txt beside the data)");
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--init", init, "Pre-trained checkpoint path, or 'random'");
    app->add_option("--runs", runs, "Independent training runs");
    app->add_option("--epochs", epochs, "Epochs per run");
    app->add_option("--seed", seed, "Base seed (run i uses seed + i)");
    app->add_option("--dev-fraction", dev_fraction, "Share of examples held out for run selection")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--test-fraction", test_fraction, "Share of examples held out for the final report")
        ->check(CLI::Range(0.0, 1.0));
    cfg.add(app);
  }

  int run(std::ostream& os) {
    const auto t0 = std::chrono::steady_clock::now();
    ResolvedConfig rc = resolve_config(cfg);
    std::optional<Checkpoint> ckpt;
    if (init != "random") {
      ckpt = load_checkpoint(init);
      // Architecture comes from the checkpoint; only explicitly given
      // architectural entries are compared against it.
      ModelConfig requested = ckpt->config;
      for (const auto& [k, v] : rc.entries) apply_config_entry(requested, k, v);
      const auto diffs = architecture_differences(ckpt->config, requested);
      if (!diffs.empty()) {
        std::string msg = "checkpoint '" + init + "' does not match the requested configuration:";
        for (const auto& dff : diffs) msg += " " + dff + ";";
        throw VersionError(msg);
      }
      rc.config = requested;
      for (const auto& [k, v] : rc.entries) rc.explicit_keys.insert(k);
      for (const char* k : {"vocab_size", "text_embedding_dim", "audio_input_dim", "visual_input_dim"})
        rc.explicit_keys.insert(k);
      rc.sources.push_back("checkpoint " + init);
    }
    LoadedData d = load_data(data, embeddings);
    fit_config_to_data(rc, d.vocab, d.examples);
    rc.config.validate();
    const auto prepared = prepare_all(d.examples, d.vocab, rc.config);
    const DataSplit split = split_dataset(prepared.size(), seed, dev_fraction, test_fraction);
    ensure_dir(out);
    FinetuneOptions fo;
    fo.epochs = epochs;
    fo.runs = runs;
    fo.seed = seed;
    if (ckpt) fo.pretrained = ckpt->weights;
    fo.on_epoch = [&](std::size_t run, std::size_t epoch, double loss, const EvalReport& dev) {
      os << "run " << run << " epoch " << epoch << " train_loss " << detail::format_double(loss) << " dev_macro_wa "
         << detail::fixed(dev.macro_wa) << " dev_macro_f1 " << detail::fixed(dev.macro_f1) << "\n"
         << std::flush;
    };
    const FinetuneResult res =
        finetune_loop(gather(prepared, split.train), gather(prepared, split.dev), gather(prepared, split.test),
                      rc.config, fo);
    save_checkpoint(join(out, kCheckpoint), rc.config, res.weights);
    write_file_atomic(join(out, kLosses), losses_tsv_finetune(res));
    write_report(out, res.test_report);
    RunManifest m;
    m.command = "finetune";
    m.seed = seed;
    m.paths = {{"data", data}, {"init", init}, {"out", out}};
    m.config_text = config_to_text(rc.config);
    m.config_sources = rc.sources;
    m.results = {{"runs", std::to_string(runs)},
                 {"epochs", std::to_string(epochs)},
                 {"best_run", std::to_string(res.best_run)},
                 {"best_epoch", std::to_string(res.runs[res.best_run].best_epoch)},
                 {"split", std::to_string(split.train.size()) + "/" + std::to_string(split.dev.size()) + "/" +
                               std::to_string(split.test.size())},
                 {"test_macro_wa", detail::format_double(res.test_report.macro_wa)},
                 {"test_macro_f1", detail::format_double(res.test_report.macro_f1)},
                 {"test_macro_wa_std_across_runs", detail::format_double(res.test_macro_wa_std)},
                 {"test_macro_f1_std_across_runs", detail::format_double(res.test_macro_f1_std)},
                 {"clamped_probabilities", std::to_string(res.clamp_count)}};
    m.seconds = seconds_since(t0);
    write_file_atomic(join(out, kManifest), m.text());
    os << format_report_text(res.test_report);
    return exit_code::ok;
  }
};

// eval and ablate share one implementation; ablate requires --drop.
struct EvalCmd {
  std::string name;
  std::string model, data, embeddings, out, drop;

  void add(CLI::App* app, bool drop_required) {
    app->add_option("--model", model, "Fine-tuned checkpoint")->required();
    app->add_option("--data", data, "Dataset file with emotion scores")->required();
    app->add_option("--embeddings", embeddings, "Embedding table (default: embeddings.txt beside the data)");
    app->add_option("--out", out, "Directory for report.txt / report.kv / manifest.txt");
    auto* opt = app->add_option("--drop", drop, "Comma-separated modalities to zero: audio, visual");
    if (drop_required) opt->required();
  }

  int run(std::ostream& os) {
    const auto t0 = std::chrono::steady_clock::now();
    const DropSet ds = parse_drop(drop);
    if (!fs::exists(model)) throw IoError("model file '" + model + "' does not exist");
    const Checkpoint ckpt = load_checkpoint(model);
    if (!ckpt.weights.contains(keys::emotion_head + ".weight"))
      throw ConfigError("checkpoint '" + model + "' has no emotion head");
    LoadedData d = load_data(data, embeddings);
    ResolvedConfig rc;
    rc.config = ckpt.config;
    rc.explicit_keys = {"vocab_size", "text_embedding_dim", "audio_input_dim", "visual_input_dim"};
    fit_config_to_data(rc, d.vocab, d.examples);
    const auto prepared = prepare_all(d.examples, d.vocab, rc.config);
    const EvalReport report = evaluate(ckpt.weights, prepared, rc.config, ds);
    const std::string text = format_report_text(report);
    if (!out.empty()) {
      ensure_dir(out);
      write_report(out, report);
      RunManifest m;
      m.command = name;
      m.paths = {{"model", model}, {"data", data}, {"out", out}};
      m.config_text = config_to_text(rc.config);
      m.results = {{"drop", drop_name(ds)},
                   {"examples", std::to_string(prepared.size())},
                   {"macro_wa", detail::format_double(report.macro_wa)},
                   {"macro_f1", detail::format_double(report.macro_f1)}};
      m.seconds = seconds_since(t0);
      write_file_atomic(join(out, kManifest), m.text());
    }
    os << text;
    return exit_code::ok;
  }
};

struct GradCheckCmd {
  static ConfigOptions toy_defaults() {
    ConfigOptions c;
    c.preset = "toy";
    return c;
  }

  ConfigOptions cfg = toy_defaults();
  std::uint64_t seed = 1;
  std::size_t samples = 200;
  double h = 1e-5;

  void add(CLI::App* app) {
    cfg.add(app);
    app->add_option("--seed", seed, "Seed for the toy batch, weights and sampled coordinates");
    app->add_option("--samples", samples, "Coordinates checked per loss");
    app->add_option("--step", h, "Finite-difference step in [1e-6, 1e-4]");
  }

  int run(std::ostream& os) {
    const ResolvedConfig rc = resolve_config(cfg);
    const GradCheckReport r = run_gradient_checks(rc.config, seed, samples, h);
    auto line = [&](const char* name, const GradCheckResult& g) {
      os << pad_name(name) << "max_rel_error " << detail::format_double(g.max_rel_error) << " at "
         << g.worst_coordinate << " (" << g.checked << " coordinates)\n";
    };
    line("masked_softmax", r.masked_softmax);
    line("nce", r.nce);
    line("finetune", r.finetune);
    const bool pass = r.max_rel_error() < kGradCheckTolerance;
    os << (pass ? "PASS" : "FAIL") << " max_rel_error " << detail::format_double(r.max_rel_error()) << " tolerance "
       << detail::format_double(kGradCheckTolerance) << "\n";
    return pass ? exit_code::ok : exit_code::check_failed;
  }

  static std::string pad_name(const char* n) { return detail::pad(n, 16); }
};

}  // namespace cli

// Maps library errors to exit codes and prints "error: <message>" to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cross-modal transformer: synthetic data, pre-training, fine-tuning and evaluation", "mmt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  cli::SynthCmd synth;
  cli::PretrainCmd pretrain;
  cli::FinetuneCmd finetune;
  cli::EvalCmd eval, ablate_cmd;
  eval.name = "eval";
  ablate_cmd.name = "ablate";
  cli::GradCheckCmd gradcheck;
  synth.add(app.add_subcommand("synth", "Generate the synthetic multimodal corpus"));
  pretrain.add(app.add_subcommand("pretrain", "Multimodal masked-LM pre-training"));
  finetune.add(app.add_subcommand("finetune", "Emotion fine-tuning with run selection"));
  eval.add(app.add_subcommand("eval", "Evaluate a fine-tuned checkpoint"), false);
  ablate_cmd.add(app.add_subcommand("ablate", "Evaluate with modalities zeroed"), true);
  gradcheck.add(app.add_subcommand("gradcheck", "Finite-difference check of both training losses"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return exit_code::ok;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return exit_code::ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::usage;
  }

  try {
    for (CLI::App* sub : app.get_subcommands()) {
      const std::string n = sub->get_name();
      if (n == "synth") return synth.run(out);
      if (n == "pretrain") return pretrain.run(out);
      if (n == "finetune") return finetune.run(out);
      if (n == "eval") return eval.run(out);
      if (n == "ablate") return ablate_cmd.run(out);
      if (n == "gradcheck") return gradcheck.run(out);
    }
    return exit_code::usage;
  } catch (const UnsupportedError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::unsupported;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::io;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::data;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::numeric;
  } catch (const VersionError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return exit_code::internal;
  }
}

}  // namespace mmt
