#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "commands.hpp"

namespace cli = gffm::cli;

int main(int argc, char** argv) {
  CLI::App app{"gffm: guidance-free flow matching toy experiments"};
  app.require_subcommand(1);

  cli::CommandArgs args;
  std::string out_dir;
  std::string ckpt;
  std::string w_text;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "Run-config file")->required();
    sub->add_option("--out", out_dir, "Output directory (overrides [run].out)");
  };

  CLI::App* train = app.add_subcommand("train", "Train a model and write its checkpoint and loss curve");
  CLI::App* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint against the analytic mixture");
  CLI::App* grid = app.add_subcommand("grid", "Training x CFG-at-inference x NFE grid");
  CLI::App* sweep = app.add_subcommand("sweep", "Train MG models across guidance weights");
  CLI::App* ablate = app.add_subcommand("ablate", "Stop-gradient on/off pair");
  for (CLI::App* sub : {train, sample, eval, grid, sweep, ablate}) add_common(sub);
  for (CLI::App* sub : {sample, eval}) sub->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  sweep->add_option("--w", w_text, "Comma-separated guidance weights (overrides [eval].w_list)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (!out_dir.empty()) args.out = out_dir;
    args.ckpt = ckpt;
    if (!w_text.empty()) args.w_list = cli::parse_w_list(w_text);
    if (const char* env = std::getenv("GFFM_SEED"); env && *env) {
      std::size_t used = 0;
      args.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: bad argument: " << e.what() << '\n';
    return 2;
  }

  if (train->parsed()) return cli::cmd_train(args, std::cout, std::cerr);
  if (sample->parsed()) return cli::cmd_sample(args, std::cout, std::cerr);
  if (eval->parsed()) return cli::cmd_eval(args, std::cout, std::cerr);
  if (grid->parsed()) return cli::cmd_grid(args, std::cout, std::cerr);
  if (sweep->parsed()) return cli::cmd_sweep(args, std::cout, std::cerr);
  return cli::cmd_ablate(args, std::cout, std::cerr);
}
