// Command-line front end for the Neural Concept Verifier. Talks to the core
// exclusively through the C API in ncv/ncv.h.

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ncv/ncv.h"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file (defaults when omitted)");
  cmd->add_option("--set", args.overrides,
                  "dot-path override, e.g. --set game.gamma=0.25 (repeatable)");
  cmd->add_option("--seed", args.seed, "run seed (sets game.seed and dataset.seed)");
}

// resolved config JSON, or an empty string after printing the error
std::string resolve(const CommonArgs& args, int& status) {
  std::vector<const char*> ovs;
  ovs.reserve(args.overrides.size());
  for (const auto& s : args.overrides) ovs.push_back(s.c_str());
  char* text = nullptr;
  status = ncv_config_resolve(args.config_path.empty() ? nullptr : args.config_path.c_str(),
                              ovs.data(), ovs.size(), args.seed, &text);
  if (status != NCV_OK) {
    std::fprintf(stderr, "error: %s\n", ncv_last_error());
    return {};
  }
  std::string out(text);
  ncv_string_free(text);
  return out;
}

int report_status(int status) {
  if (status != NCV_OK) std::fprintf(stderr, "error: %s\n", ncv_last_error());
  return status;
}

bool write_file(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) {
    std::fprintf(stderr, "error: cannot write '%s'\n", path.c_str());
    return false;
  }
  std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural Concept Verifier: prover-verifier games over concept encodings"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, sweep_args;
  std::string gen_out, train_data, train_out, sweep_out;
  std::string eval_checkpoint, eval_data, eval_split = "both", eval_out;
  bool eval_exhaustive = false;
  std::string explain_checkpoint, explain_data, explain_split = "test", explain_out;
  std::vector<unsigned long long> explain_ids;
  bool explain_morgana = false;

  CLI::App* gen = app.add_subcommand("generate", "generate a synthetic concept dataset");
  add_common(gen, gen_args);
  gen->add_option("--out", gen_out, "output directory")->required();

  CLI::App* train = app.add_subcommand("train", "train the three-agent game");
  add_common(train, train_args);
  train->add_option("--data", train_data, "dataset stem (as written by generate)")->required();
  train->add_option("--out", train_out, "output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset stem")->required();
  eval->add_option("--split", eval_split, "train|val|test|both (default both)");
  eval->add_flag("--exhaustive", eval_exhaustive,
                 "add brute-force worst-case soundness (small instances only)");
  eval->add_option("--out", eval_out, "write the report JSON here as well");

  CLI::App* sweep = app.add_subcommand("sweep", "run the configured experiment grid");
  add_common(sweep, sweep_args);
  sweep->add_option("--out", sweep_out, "output directory")->required();

  CLI::App* explain = app.add_subcommand("explain", "emit certificates for chosen samples");
  explain->add_option("--checkpoint", explain_checkpoint, "checkpoint file")->required();
  explain->add_option("--data", explain_data, "dataset stem")->required();
  explain->add_option("--ids", explain_ids, "sample ids (comma separated or repeated)")
      ->delimiter(',');
  explain->add_option("--split", explain_split, "train|val|test (default test)");
  explain->add_flag("--morgana", explain_morgana, "adversarial certificates instead");
  explain->add_option("--out", explain_out, "certificate file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : NCV_ERR_CONFIG;
  }

  if (gen->parsed()) {
    int status = NCV_OK;
    const std::string config = resolve(gen_args, status);
    if (status != NCV_OK) return status;
    char* stem = nullptr;
    status = ncv_generate(config.c_str(), gen_out.c_str(), &stem);
    if (status == NCV_OK) {
      std::printf("%s\n", stem);
      ncv_string_free(stem);
    }
    return report_status(status);
  }

  if (train->parsed()) {
    int status = NCV_OK;
    const std::string config = resolve(train_args, status);
    if (status != NCV_OK) return status;
    char* manifest = nullptr;
    status = ncv_train(config.c_str(), train_data.c_str(), train_out.c_str(), &manifest);
    if (status == NCV_OK) {
      std::printf("%s", manifest);
      ncv_string_free(manifest);
    }
    return report_status(status);
  }

  if (eval->parsed()) {
    char* report = nullptr;
    const int status = ncv_eval(eval_checkpoint.c_str(), eval_data.c_str(),
                                eval_split.c_str(), eval_exhaustive ? 1 : 0, &report);
    if (status == NCV_OK) {
      std::printf("%s\n", report);
      if (!eval_out.empty() && !write_file(eval_out, std::string(report) + "\n")) {
        ncv_string_free(report);
        return NCV_ERR_RUNTIME;
      }
      ncv_string_free(report);
    }
    return report_status(status);
  }

  if (sweep->parsed()) {
    int status = NCV_OK;
    const std::string config = resolve(sweep_args, status);
    if (status != NCV_OK) return status;
    status = ncv_sweep(config.c_str(), sweep_out.c_str());
    if (status == NCV_OK) std::printf("%s/sweep.csv\n", sweep_out.c_str());
    return report_status(status);
  }

  if (explain->parsed()) {
    char* jsonl = nullptr;
    char* warnings = nullptr;
    const int status =
        ncv_explain(explain_checkpoint.c_str(), explain_data.c_str(), explain_split.c_str(),
                    explain_ids.data(), explain_ids.size(), explain_morgana ? 1 : 0, &jsonl,
                    &warnings);
    if (status != NCV_OK) return report_status(status);
    if (warnings) {
      std::fprintf(stderr, "warning: %s\n", warnings);
      ncv_string_free(warnings);
    }
    const std::string text = jsonl ? jsonl : "";
    ncv_string_free(jsonl);
    if (!explain_out.empty()) {
      if (!write_file(explain_out, text)) return NCV_ERR_RUNTIME;
    } else {
      std::fputs(text.c_str(), stdout);
    }
    return NCV_OK;  // unknown ids warn but do not fail
  }

  return NCV_ERR_CONFIG;
}
