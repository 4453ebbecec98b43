// densealign: word-level image-text misalignment scoring from the command line.
//
//   densealign score    --config C --weights W --image I --caption "..."
//   densealign eval     --config C --weights W --dataset D --protocol P
//   densealign ablate   --config C --weights W --dataset D --sweep layers|epsilon|variant
//   densealign init-tiny --dir OUT        (random model for smoke tests)
//
// stdout carries only the JSON / CSV payload; diagnostics go to stderr.
// Exit codes: 0 ok, 1 input error, 2 configuration error, 3 numerical error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "densealign/config.hpp"
#include "densealign/error.hpp"
#include "densealign/harness.hpp"
#include "densealign/image.hpp"
#include "densealign/pipeline.hpp"
#include "densealign/random_model.hpp"

namespace fs = std::filesystem;
using namespace densealign;

namespace {

struct CommonFlags {
  std::string config;
  std::string weights;
  std::optional<double> epsilon;
  std::optional<std::size_t> l_start;
  std::string variant = "signed";
  std::optional<std::string> tmpl;
  std::string output;
  bool fps = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "model config JSON")->required();
  cmd->add_option("--weights", f.weights, "tensor container with model weights")->required();
  cmd->add_option("--epsilon", f.epsilon, "misalignment threshold (negative)");
  cmd->add_option("--l-start", f.l_start, "first text layer (1-based) of the relevance average");
  cmd->add_option("--variant", f.variant, "signed|relu-head|relu-layer|grad-only");
  cmd->add_option("--template", f.tmpl, "prompt prefix prepended to every caption");
  cmd->add_option("--output", f.output, "write the payload here instead of stdout");
  cmd->add_flag("--fps", f.fps, "report samples per second on stderr");
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw InputError(std::string(what) + " not found: " + path);
}

ModelConfig load_checked_config(const CommonFlags& f) {
  if (!fs::is_regular_file(f.config)) throw ConfigError("model config not found: " + f.config);
  require_file(f.weights, "weights");
  return load_config(f.config);
}

ScoreOptions score_options(const CommonFlags& f, const ModelConfig& c) {
  ScoreOptions o = ScoreOptions::from_config(c);
  if (f.epsilon) o.epsilon = *f.epsilon;
  if (!(o.epsilon < 0.0)) throw ConfigError("--epsilon must be negative");
  if (f.l_start) {
    if (*f.l_start < 1 || *f.l_start > c.text_layers) {
      throw ConfigError("--l-start must lie in 1.." + std::to_string(c.text_layers));
    }
    o.l_start = *f.l_start;
  }
  o.variant = parse_variant(f.variant);
  if (f.tmpl) o.tmpl = *f.tmpl;
  return o;
}

void emit(const std::string& payload, const std::string& output) {
  if (output.empty()) {
    std::cout << payload;
    std::cout.flush();
    return;
  }
  std::ofstream out(output, std::ios::binary);
  if (!out) throw InputError("cannot write " + output);
  out << payload;
}

void report_fps(bool enabled, std::size_t samples, std::chrono::steady_clock::time_point start) {
  if (!enabled) return;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cerr << "samples: " << samples << ", seconds: " << secs << ", fps: " << (secs > 0 ? samples / secs : 0.0)
            << "\n";
}

std::string csv_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Word-level image-text misalignment detection"};
  app.require_subcommand(1);

  CommonFlags score_flags;
  std::string image_path, caption;
  auto* score = app.add_subcommand("score", "score one image-caption pair");
  add_common(score, score_flags);
  score->add_option("--image", image_path, "PNG or preprocessed .safetensors image")->required();
  score->add_option("--caption", caption, "caption text")->required();

  CommonFlags eval_flags;
  std::string dataset, protocol = "single-word", baseline = "gradient";
  std::size_t workers = 1;
  bool macro = false;
  auto* eval = app.add_subcommand("eval", "evaluate a dataset under one protocol");
  add_common(eval, eval_flags);
  eval->add_option("--dataset", dataset, "line-delimited JSON records")->required();
  eval->add_option("--protocol", protocol, "single-word|phrase|word-set|pairwise");
  eval->add_option("--baseline", baseline, "gradient|occlusion");
  eval->add_option("--workers", workers, "worker threads");
  eval->add_flag("--macro", macro, "macro-average word precision/recall (word-set protocol)");

  CommonFlags ablate_flags;
  std::string ablate_dataset, sweep, ablate_protocol = "single-word";
  std::vector<double> sweep_values;
  std::size_t ablate_workers = 1;
  auto* ablate = app.add_subcommand("ablate", "sweep a hyper-parameter and emit CSV");
  add_common(ablate, ablate_flags);
  ablate->add_option("--dataset", ablate_dataset, "line-delimited JSON records")->required();
  ablate->add_option("--sweep", sweep, "layers|epsilon|variant")->required();
  ablate->add_option("--protocol", ablate_protocol, "single-word|phrase|word-set|pairwise");
  ablate->add_option("--values", sweep_values, "epsilon values for --sweep epsilon");
  ablate->add_option("--workers", ablate_workers, "worker threads");

  std::string tiny_dir;
  std::size_t tiny_layers = 3, tiny_heads = 2, tiny_width = 16, tiny_context = 16;
  std::uint32_t tiny_seed = 7;
  auto* init = app.add_subcommand("init-tiny", "write a random tiny model, vocabulary and config");
  init->add_option("--dir", tiny_dir, "output directory")->required();
  init->add_option("--layers", tiny_layers, "text layers");
  init->add_option("--heads", tiny_heads, "text heads");
  init->add_option("--width", tiny_width, "text width");
  init->add_option("--context", tiny_context, "context length");
  init->add_option("--seed", tiny_seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*score) {
      const auto config = load_checked_config(score_flags);
      require_file(image_path, "image");
      const auto opt = score_options(score_flags, config);
      const auto start = std::chrono::steady_clock::now();
      const auto pipe = Pipeline::load(config, score_flags.weights);
      const auto report = pipe.score(load_image(image_path, config), caption, opt);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
      emit(to_json(report).dump(2) + "\n", score_flags.output);
      report_fps(score_flags.fps, 1, start);
      return 0;
    }
    if (*eval) {
      const auto config = load_checked_config(eval_flags);
      require_file(dataset, "dataset");
      const auto opt = score_options(eval_flags, config);
      EvalOptions eo;
      eo.protocol = parse_protocol(protocol);
      eo.baseline = parse_baseline(baseline);
      eo.workers = workers;
      eo.macro_prf = macro;
      const auto records = load_dataset(dataset);
      if (records.empty()) throw InputError("dataset is empty: " + dataset);
      const auto pipe = Pipeline::load(config, eval_flags.weights);
      const auto start = std::chrono::steady_clock::now();
      const auto metrics = evaluate(pipe, records, eo, opt);
      emit(to_json(metrics).dump(2) + "\n", eval_flags.output);
      report_fps(eval_flags.fps, records.size(), start);
      return 0;
    }
    if (*ablate) {
      const auto config = load_checked_config(ablate_flags);
      require_file(ablate_dataset, "dataset");
      const auto base = score_options(ablate_flags, config);
      EvalOptions eo;
      eo.protocol = parse_protocol(ablate_protocol);
      eo.workers = ablate_workers;
      std::vector<ScoreOptions> points;
      std::vector<std::string> labels;
      if (sweep == "layers") {
        for (std::size_t l = config.text_layers; l >= 1; --l) {
          auto o = base;
          o.l_start = l;
          points.push_back(o);
          labels.push_back(std::to_string(l));
        }
      } else if (sweep == "epsilon") {
        if (sweep_values.empty()) sweep_values = {-0.00001, -0.00005};
        for (double e : sweep_values) {
          if (!(e < 0.0)) throw ConfigError("epsilon sweep values must be negative");
          auto o = base;
          o.epsilon = e;
          points.push_back(o);
          labels.push_back(csv_cell(e));
        }
      } else if (sweep == "variant") {
        for (auto v : kAllVariants) {
          auto o = base;
          o.variant = v;
          points.push_back(o);
          labels.push_back(to_string(v));
        }
      } else {
        throw ConfigError("unknown sweep '" + sweep + "' (expected layers, epsilon or variant)");
      }
      const auto records = load_dataset(ablate_dataset);
      if (records.empty()) throw InputError("dataset is empty: " + ablate_dataset);
      const auto pipe = Pipeline::load(config, ablate_flags.weights);
      const auto start = std::chrono::steady_clock::now();
      const auto reports = evaluate_sweep(pipe, records, eo, points);
      std::ostringstream csv;
      csv << "sweep,value,la,ap,precision,recall,f1,pearson,spearman,pairwise_accuracy,n_samples\n";
      for (std::size_t k = 0; k < reports.size(); ++k) {
        const auto& m = reports[k];
        csv << sweep << ',' << labels[k] << ',' << csv_cell(m.la) << ',' << csv_cell(m.ap) << ','
            << csv_cell(m.precision) << ',' << csv_cell(m.recall) << ',' << csv_cell(m.f1) << ','
            << csv_cell(m.pearson) << ',' << csv_cell(m.spearman) << ',' << csv_cell(m.pairwise_accuracy) << ','
            << m.n_samples << '\n';
      }
      emit(csv.str(), ablate_flags.output);
      report_fps(ablate_flags.fps, records.size(), start);
      return 0;
    }
    if (*init) {
      fs::create_directories(tiny_dir);
      const auto merges = merges_for_words(demo_words());
      auto config = tiny_config(tiny_layers, tiny_heads, tiny_width, tiny_context, merges.size());
      config.tmpl = "A photo depicts ";
      config.vocab = "merges.txt";
      config.validate();
      write_merges_file(fs::path(tiny_dir) / "merges.txt", merges);
      write_safetensors(fs::path(tiny_dir) / "weights.safetensors", random_weights(config, tiny_seed));
      std::ofstream(fs::path(tiny_dir) / "config.json") << config_to_json(config).dump(2) << "\n";
      ImageInput blank{config.image_resolution, std::vector<float>(3 * config.image_resolution * config.image_resolution)};
      write_image_tensor(fs::path(tiny_dir) / "blank.safetensors", blank);
      std::cerr << "wrote tiny model to " << tiny_dir << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
