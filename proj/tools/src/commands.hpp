#pragma once

// Subcommand bodies behind the gffm executable. Each returns the process exit status and
// writes a single "error: <reason>" line to `err` on failure.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gffm/run_config.hpp"

namespace gffm::cli {

struct CommandArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;   // overrides [run].out
  std::filesystem::path ckpt;                 // sample / eval
  std::optional<std::vector<double>> w_list;  // sweep
  std::optional<std::uint64_t> seed;          // GFFM_SEED
};

// Config with the command-line and environment overrides applied.
RunConfig load_run_config(const CommandArgs& args);

// <out>/<stem>_<fingerprint>.<ext>
std::filesystem::path artifact_path(const RunConfig& cfg, const std::string& stem, const std::string& ext);

int cmd_train(const CommandArgs& args, std::ostream& out, std::ostream& err);
int cmd_sample(const CommandArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandArgs& args, std::ostream& out, std::ostream& err);
int cmd_grid(const CommandArgs& args, std::ostream& out, std::ostream& err);
int cmd_sweep(const CommandArgs& args, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommandArgs& args, std::ostream& out, std::ostream& err);

// Parses "0,0.3,0.5"; throws ConfigError.
std::vector<double> parse_w_list(const std::string& text);

}  // namespace gffm::cli
