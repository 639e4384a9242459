// charlm: corpus building, training, evaluation, sampling and structural
// validation of LaTeX character models from one executable.
//
// Exit codes: 0 success, 1 runtime failure (or defects found by validate),
// 2 usage error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "charlm/charlm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

bool determinism_from_env() {
  const char* v = std::getenv("CHARLM_DETERMINISM");
  return v != nullptr && std::string(v) == "1";
}

// Written into a run directory before any work starts.
void write_run_manifest(const fs::path& dir, const std::string& subcommand, const json& config, std::uint64_t seed,
                        const std::vector<fs::path>& inputs, bool determinism) {
  fs::create_directories(dir);
  json digests = json::object();
  for (const auto& p : inputs) {
    if (fs::is_regular_file(p)) digests[p.generic_string()] = hex64(fnv1a(charlm::read_file(p)));
  }
  const json manifest = {{"subcommand", subcommand},
                         {"config", config},
                         {"seed", seed},
                         {"tool_version", charlm::kVersion},
                         {"input_digests", digests},
                         {"determinism", determinism},
                         {"started_at", utc_now()}};
  charlm::write_file(dir / "run_manifest.json", manifest.dump(2) + "\n");
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::optional<std::string> closest_flag(const CLI::App& app, const std::string& arg) {
  std::string flag = arg.substr(0, arg.find('='));
  while (!flag.empty() && flag.front() == '-') flag.erase(flag.begin());
  std::optional<std::string> best;
  std::size_t best_distance = 4;
  for (const auto* opt : app.get_options()) {
    for (const auto& name : opt->get_lnames()) {
      const auto d = edit_distance(flag, name);
      if (d < best_distance) {
        best_distance = d;
        best = "--" + name;
      }
    }
  }
  return best;
}

// ---- subcommands -------------------------------------------------------------

struct BuildCorpusArgs {
  std::string input, output;
  std::uint64_t min_count = 100;
  double val_fraction = 0.05;
  std::string separator = "\n";
};

int run_build_corpus(const BuildCorpusArgs& a) {
  charlm::CorpusOptions options;
  options.min_count = a.min_count;
  options.val_fraction = a.val_fraction;
  options.separator = charlm::utf8::decode(a.separator);
  write_run_manifest(a.output, "build-corpus",
                     {{"input", a.input}, {"min_count", a.min_count}, {"val_fraction", a.val_fraction},
                      {"separator", a.separator}},
                     0, {}, determinism_from_env());
  const auto build = charlm::build_corpus(a.input, options);
  charlm::write_corpus_dir(build, a.output);
  std::cout << "documents: " << build.roots.size() << "\n"
            << "characters: " << build.stream.ids.size() << "\n"
            << "vocabulary: " << build.stream.vocab.size() << "\n"
            << "removed characters: " << build.removed.size() << "\n";
  return 0;
}

struct TrainArgs {
  std::string preset = "char-lstm";
  std::string config_file;
  std::string corpus;
  std::string out;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> hidden, embedding, layers, heads, ffn, seq_len, batch, mem_len, warmup, eval_interval,
      log_interval, checkpoint_interval;
  std::optional<double> dropout, lr, clip;
  std::optional<std::string> schedule, combine;
  std::optional<bool> variable_length;
  bool deterministic = false;
};

charlm::Preset resolve_train_config(const TrainArgs& a, std::size_t vocab_size) {
  auto preset = charlm::load_preset(a.preset);
  if (!a.config_file.empty()) {
    try {
      charlm::apply_overlay(preset, json::parse(charlm::read_file(a.config_file)));
    } catch (const json::parse_error& e) {
      throw charlm::InvalidConfig(a.config_file + ": " + e.what());
    }
  }
  json flags = json::object();
  auto put = [&flags](const char* key, const auto& value) {
    if (value) flags[key] = *value;
  };
  put("steps", a.steps);
  put("seed", a.seed);
  put("hidden_dim", a.hidden);
  put("embedding_dim", a.embedding);
  put("num_layers", a.layers);
  put("num_heads", a.heads);
  put("ffn_dim", a.ffn);
  put("seq_len", a.seq_len);
  put("batch_size", a.batch);
  put("mem_len", a.mem_len);
  put("warmup_steps", a.warmup);
  put("eval_interval", a.eval_interval);
  put("log_interval", a.log_interval);
  put("checkpoint_interval", a.checkpoint_interval);
  put("dropout", a.dropout);
  put("lr", a.lr);
  put("clip_norm", a.clip);
  put("schedule", a.schedule);
  put("position_combine", a.combine);
  put("variable_length", a.variable_length);
  charlm::apply_overlay(preset, flags);
  preset.model.vocab_size = vocab_size;
  preset.train.determinism = preset.train.determinism || a.deterministic || determinism_from_env();
  preset.model.validate();
  return preset;
}

int run_train(const TrainArgs& a) {
  const auto corpus = charlm::load_corpus_dir(a.corpus);
  const auto preset = resolve_train_config(a, corpus.vocab.size());
  const json resolved = {{"preset", preset.name}, {"model", charlm::to_json(preset.model)},
                         {"train", charlm::to_json(preset.train)}, {"corpus", a.corpus}};
  write_run_manifest(a.out, "train", resolved, preset.train.seed,
                     {fs::path(a.corpus) / "corpus.txt", fs::path(a.corpus) / "vocab.json",
                      fs::path(a.corpus) / "manifest.json"},
                     preset.train.determinism);
  charlm::Rng init_rng(preset.train.seed);
  auto model = charlm::make_model<float>(preset.model, init_rng);
  charlm::TrainData data{corpus.train(), corpus.validation(), corpus.vocab, fs::absolute(a.corpus).string()};
  const auto result = charlm::train(*model, preset.train, data, fs::path(a.out));
  std::cout << "parameters: " << model->parameter_count() << "\n"
            << "steps: " << result.steps << "\n";
  if (!result.step_losses.empty()) {
    std::cout << "final train ce_nats: " << result.step_losses.back()
              << " bpc: " << charlm::bpc_from_ce(result.step_losses.back()) << "\n";
  }
  if (result.best_validation) {
    std::cout << "best validation ce_nats: " << result.best_validation->ce_nats
              << " bpc: " << result.best_validation->bpc() << " (step " << result.best_validation->step << ")\n";
  }
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string split = "validation";
  std::string corpus;
};

int run_evaluate(const EvaluateArgs& a) {
  const auto ck = charlm::load_checkpoint(a.checkpoint);
  const std::string corpus_dir = a.corpus.empty() ? ck.corpus_dir : a.corpus;
  const auto corpus = charlm::load_corpus_dir(corpus_dir);
  charlm::require_vocabulary(ck, corpus.vocab);
  auto model = charlm::model_from_checkpoint<float>(ck);
  const auto split = charlm::parse_split(a.split);
  const auto ids = split == charlm::Split::train ? corpus.train() : corpus.validation();
  auto m = charlm::evaluate(*model, ids, ck.model.seq_len, split);
  m.step = ck.step;
  std::cout << "split=" << charlm::to_string(split) << " step=" << m.step << " ce_nats=" << m.ce_nats
            << " bpc=" << m.bpc() << " positions=" << ids.size() - 1 << "\n";
  return 0;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string prefix = "\\documentclass";
  std::size_t length = 5000;
  double temperature = 0.7;
  std::uint64_t seed = 0;
  bool greedy = false;
  bool validate = false;
  std::string stop;
  std::string output;
};

int run_generate(const GenerateArgs& a) {
  const auto ck = charlm::load_checkpoint(a.checkpoint);
  auto model = charlm::model_from_checkpoint<float>(ck);
  charlm::SamplerConfig sampler;
  sampler.temperature = a.temperature;
  sampler.max_chars = a.length;
  sampler.prefix = a.prefix;
  sampler.seed = a.seed;
  sampler.greedy = a.greedy;
  if (!a.stop.empty()) sampler.stop_sequence = a.stop;
  const auto text = charlm::generate(*model, ck.vocab, sampler);
  std::string rendered = text;
  if (a.validate) {
    const auto report = charlm::latex::validate(text);
    rendered += "\n\n% ---- validation report ----\n% " + charlm::latex::to_json(report).dump() + "\n";
  }
  if (a.output.empty()) {
    std::cout << rendered;
    if (!a.validate) std::cout << "\n";
  } else {
    charlm::write_file(a.output, rendered);
  }
  return 0;
}

struct ValidateArgs {
  std::vector<std::string> files;
  bool summary = false;
  bool as_json = false;
};

int run_validate(const ValidateArgs& a) {
  std::vector<charlm::latex::ValidationReport> reports;
  json out = json::array();
  for (const auto& f : a.files) {
    reports.push_back(charlm::latex::validate(charlm::read_file(f)));
    const auto& r = reports.back();
    if (a.as_json) {
      auto j = charlm::latex::to_json(r);
      j["file"] = f;
      out.push_back(std::move(j));
    } else {
      std::cout << f << ": " << (r.clean() ? "ok" : std::to_string(r.defects.size()) + " defect(s)") << "\n";
      for (const auto& d : r.defects) {
        std::cout << "  " << charlm::latex::to_string(d.code) << " at byte " << d.byte_offset << ": " << d.detail << "\n";
      }
    }
  }
  const auto summary = charlm::latex::score(reports);
  if (a.as_json) {
    json doc = {{"reports", out}};
    if (a.summary) doc["summary"] = charlm::latex::to_json(summary);
    std::cout << doc.dump(2) << "\n";
  } else if (a.summary) {
    std::cout << "samples: " << summary.samples << "\n"
              << "defects/KB: " << summary.defects_per_kb << "\n"
              << "clean fraction: " << summary.clean_fraction << "\n"
              << "well-formed sentence fraction: " << summary.well_formed_sentence_fraction << "\n";
    for (const auto& [code, n] : summary.histogram) std::cout << "  " << code << ": " << n << "\n";
  }
  return summary.total_defects == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-level LaTeX language models: build-corpus, train, evaluate, generate, validate"};
  app.set_version_flag("--version", charlm::kVersion);
  app.require_subcommand(1);

  BuildCorpusArgs bc;
  auto* build = app.add_subcommand("build-corpus", "Clean a directory of .tex files into a character corpus");
  build->add_option("--input", bc.input, "Directory of .tex sources")->required()->check(CLI::ExistingDirectory);
  build->add_option("--output", bc.output, "Output directory")->required();
  build->add_option("--min-count", bc.min_count, "Delete characters occurring fewer times than this")->capture_default_str();
  build->add_option("--val-fraction", bc.val_fraction, "Trailing fraction held out for validation")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 0.99));
  build->add_option("--separator", bc.separator, "Inserted between documents");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a model on a built corpus");
  train->add_option("--config", tr.preset, "Preset name")->capture_default_str();
  train->add_option("--config-file", tr.config_file, "JSON overlay applied after the preset")->check(CLI::ExistingFile);
  train->add_option("--corpus", tr.corpus, "Corpus directory from build-corpus")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", tr.out, "Run directory")->required();
  train->add_option("--steps", tr.steps, "Optimisation steps");
  train->add_option("--seed", tr.seed, "Seed for initialisation, batching and dropout");
  train->add_option("--hidden", tr.hidden, "hidden_dim override");
  train->add_option("--embedding", tr.embedding, "embedding_dim override");
  train->add_option("--layers", tr.layers, "num_layers override");
  train->add_option("--heads", tr.heads, "num_heads override");
  train->add_option("--ffn", tr.ffn, "ffn_dim override");
  train->add_option("--seq-len", tr.seq_len, "seq_len override");
  train->add_option("--batch", tr.batch, "batch_size override");
  train->add_option("--mem-len", tr.mem_len, "mem_len override");
  train->add_option("--dropout", tr.dropout, "dropout override");
  train->add_option("--lr", tr.lr, "learning rate override");
  train->add_option("--schedule", tr.schedule, "constant | custom | cosine");
  train->add_option("--warmup", tr.warmup, "warmup steps for the custom schedule");
  train->add_option("--clip", tr.clip, "global gradient-norm clip");
  train->add_option("--combine", tr.combine, "positional combine mode: add | concat");
  train->add_option("--variable-length", tr.variable_length, "draw segment lengths per batch (true/false)");
  train->add_option("--eval-interval", tr.eval_interval, "steps between validation passes");
  train->add_option("--log-interval", tr.log_interval, "steps between training metric rows");
  train->add_option("--checkpoint-interval", tr.checkpoint_interval, "steps between checkpoint files (0: none)");
  train->add_flag("--deterministic", tr.deterministic, "same as CHARLM_DETERMINISM=1");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Cross entropy and bits per character of a checkpoint");
  evaluate->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--split", ev.split, "train | validation")->capture_default_str();
  evaluate->add_option("--corpus", ev.corpus, "Corpus directory (default: the one recorded in the checkpoint)");

  GenerateArgs ge;
  auto* generate = app.add_subcommand("generate", "Sample text from a checkpoint");
  generate->add_option("--checkpoint", ge.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  generate->add_option("--prefix", ge.prefix, "Seed text")->capture_default_str();
  generate->add_option("--length", ge.length, "Characters to generate")->capture_default_str();
  generate->add_option("--temperature", ge.temperature, "Softmax temperature (> 0)")->capture_default_str();
  generate->add_option("--seed", ge.seed, "Sampling seed")->capture_default_str();
  generate->add_option("--stop", ge.stop, "Stop once this string has been generated");
  generate->add_option("--output", ge.output, "Write to a file instead of stdout");
  generate->add_flag("--greedy", ge.greedy, "Argmax decoding");
  generate->add_flag("--validate", ge.validate, "Append a structural validation report");

  ValidateArgs va;
  auto* validate = app.add_subcommand("validate", "Check LaTeX files for structural defects");
  validate->add_option("files", va.files, "Files to check")->required()->check(CLI::ExistingFile);
  validate->add_flag("--summary", va.summary, "Print aggregate statistics");
  validate->add_flag("--json", va.as_json, "Machine-readable report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    const CLI::App* active = &app;
    for (const auto* sub : app.get_subcommands()) active = sub;
    for (int i = 1; i < argc; ++i) {
      const std::string arg = argv[i];
      if (arg.rfind("--", 0) != 0) continue;
      const std::string name = arg.substr(2, arg.find('=') - 2);
      bool known = false;
      for (const auto* opt : active->get_options()) {
        for (const auto& l : opt->get_lnames()) known = known || l == name;
      }
      if (known) continue;
      if (auto guess = closest_flag(*active, arg)) std::cerr << "did you mean " << *guess << " instead of " << arg << "?\n";
    }
    std::cerr << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*build) return run_build_corpus(bc);
    if (*train) return run_train(tr);
    if (*evaluate) return run_evaluate(ev);
    if (*generate) return run_generate(ge);
    if (*validate) return run_validate(va);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
