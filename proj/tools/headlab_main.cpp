// Workbench driver: train a small attention-only transformer on corpora with
// planted structure, then measure how its attention heads develop.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "headlab/tokenizer.hpp"
#include "headlab/workbench.hpp"

namespace fs = std::filesystem;
using namespace headlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCellFailures = 1;
constexpr int kExitUsage = 2;

int with_config(const std::string& config_path,
                const std::function<int(const ExperimentConfig&)>& fn) {
  try {
    ExperimentConfig cfg = load_experiment_config(config_path);
    return fn(cfg);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCellFailures;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"headlab: refined-complexity workbench for tiny attention-only transformers"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", phase;
  int workers = 1;
  std::uint64_t seed_override = 0;

  auto add_common = [&](CLI::App* sub, bool needs_phase = false) {
    sub->add_option("--config", config_path, "Experiment config JSON")->required();
    sub->add_option("--out", out_dir, "Output root directory");
    sub->add_option("--workers", workers, "Worker threads for grid cells");
    sub->add_option("--seed-override", seed_override, "Run only this seed");
    if (needs_phase)
      sub->add_option("--phase", phase, "llc|hessian|ablate|classify|compose")->required();
  };

  CLI::App* train_cmd = app.add_subcommand("train", "Train and write checkpoints");
  add_common(train_cmd);

  CLI::App* measure_cmd =
      app.add_subcommand("measure", "Run one measurement phase over the checkpoint grid");
  add_common(measure_cmd, true);

  CLI::App* cluster_cmd =
      app.add_subcommand("cluster", "Cluster per-head trajectory series");
  add_common(cluster_cmd);

  CLI::App* report_cmd = app.add_subcommand("report", "Join all outputs into summary.json");
  add_common(report_cmd);

  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Corpus ingestion and pattern tools");
  std::string text_path, gen_out, pattern_out;
  std::size_t gen_vocab = 512;
  gen_cmd->add_option("--text", text_path, "Raw UTF-8 text to tokenize");
  gen_cmd->add_option("--out", gen_out, "Output directory for tokens.u16 + tokenizer.json");
  gen_cmd->add_option("--vocab", gen_vocab, "Tokenizer vocabulary size");
  gen_cmd->add_option("--pattern-out", pattern_out, "Write an example PatternSpec JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      return with_config(config_path, [&](const ExperimentConfig& cfg) {
        return run_train(cfg, out_dir, seed_override) == 0 ? kExitOk : kExitCellFailures;
      });
    }
    if (measure_cmd->parsed()) {
      return with_config(config_path, [&](const ExperimentConfig& cfg) {
        GridOptions opts;
        opts.workers = workers;
        opts.seed_override = seed_override;
        PhaseResult r = run_measure(cfg, out_dir, phase, opts);
        std::cout << "phase " << phase << ": " << r.computed << " computed, " << r.skipped
                  << " cached, " << r.failed << " failed (of " << r.attempted << ")\n";
        return r.failure_rate() > 0.10 ? kExitCellFailures : kExitOk;
      });
    }
    if (cluster_cmd->parsed()) {
      return with_config(config_path, [&](const ExperimentConfig& cfg) {
        return run_cluster(cfg, out_dir);
      });
    }
    if (report_cmd->parsed()) {
      return with_config(config_path, [&](const ExperimentConfig& cfg) {
        return run_report(cfg, out_dir);
      });
    }
    if (gen_cmd->parsed()) {
      if (!pattern_out.empty()) {
        PatternSpec spec = PatternSpec::example_tables(gen_vocab, 0xbeef);
        std::ofstream pf(pattern_out);
        pf << spec.to_json().dump(2) << "\n";
        std::cout << "wrote " << pattern_out << "\n";
      }
      if (!text_path.empty()) {
        if (gen_out.empty()) {
          std::cerr << "gen-data: --out is required with --text\n";
          return kExitUsage;
        }
        std::ifstream in(text_path, std::ios::binary);
        if (!in) {
          std::cerr << "gen-data: cannot open " << text_path << "\n";
          return kExitUsage;
        }
        std::stringstream ss;
        ss << in.rdbuf();
        std::string text = ss.str();
        Tokenizer tok = Tokenizer::train(text, gen_vocab);
        fs::create_directories(gen_out);
        tok.save(fs::path(gen_out) / "tokenizer.json");
        std::vector<TokenId> ids = tok.encode(text);
        std::ofstream bf(fs::path(gen_out) / "tokens.u16", std::ios::binary);
        for (TokenId t : ids) {
          char b[2] = {static_cast<char>(t & 0xff), static_cast<char>(t >> 8)};
          bf.write(b, 2);
        }
        std::cout << "wrote " << ids.size() << " tokens (tokenizer hash " << tok.hash()
                  << ")\n";
      }
      if (pattern_out.empty() && text_path.empty()) {
        std::cerr << "gen-data: nothing to do (--text or --pattern-out)\n";
        return kExitUsage;
      }
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCellFailures;
  }
  return kExitUsage;
}
