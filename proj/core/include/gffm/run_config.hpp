#pragma once

// Run configuration: an INI-like text file with [run], [dataset], [model], [train], [sampler]
// and [eval] sections, `key = value` lines and `#` comments. Keys before the first section
// header belong to [run]. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gffm/datasets.hpp"
#include "gffm/eval_bench.hpp"
#include "gffm/flow_train.hpp"
#include "gffm/sampler.hpp"
#include "gffm/velocity_model.hpp"

namespace gffm {

struct MixtureSection {
  int components = 8;
  int dim = 2;
  double radius = 4.0;
  double variance = 0.16;
  std::vector<double> weights;                // empty: equal weights
  std::vector<double> variances;              // empty: `variance` for every component
  std::vector<std::vector<double>> means;     // empty: ring layout from `radius`

  bool operator==(const MixtureSection&) const = default;
};

struct ModelSection {
  int hidden = 256;
  int depth = 4;
  int time_dim = 16;

  bool operator==(const ModelSection&) const = default;
};

struct EvalSection {
  int samples_per_class = 256;
  int n_proj = 128;
  int seeds = 3;
  int workers = 1;
  std::vector<int> nfe_list = {32, 16, 7};
  std::vector<double> w_list = {0.0, 0.3, 0.5, 0.7, 1.0, 2.0};

  bool operator==(const EvalSection&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  DatasetKind dataset_kind = DatasetKind::Mixture;
  int n_items = 4096;
  double mask_lo = 0.7;
  double mask_hi = 1.0;
  MixtureSection mixture;

  ModelSection model;
  TrainConfig train;  // train.seed mirrors `seed`
  SamplerConfig sampler;  // sampler.seed mirrors `seed`
  EvalSection eval;

  bool operator==(const RunConfig&) const = default;

  GaussianMixtureSpec mixture_spec() const;
  DatasetSpec dataset_spec() const;
  ModelArch arch() const;
  ExperimentSetup setup() const;
  // seed, seed + 1, ...: one entry per eval.seeds.
  std::vector<std::uint64_t> seed_list() const;
};

RunConfig parse_config(std::istream& is, const std::string& source_name = "<config>");
RunConfig parse_config(const std::filesystem::path& path);

// Canonical form: every key, fixed order, round-trips through parse_config.
std::string serialize(const RunConfig& cfg);

// Stable hash of the canonical form, excluding the output directory.
std::uint64_t fingerprint(const RunConfig& cfg);
std::string fingerprint_hex(const RunConfig& cfg);

// Replaces seed (and the mirrored train/sampler seeds).
void set_seed(RunConfig& cfg, std::uint64_t seed);

}  // namespace gffm
