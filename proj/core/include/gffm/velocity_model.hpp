#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gffm/autodiff.hpp"

namespace gffm {

// Conditioning signal. Each part is independently nullable: a missing label selects the
// learned null-class row, a missing prompt selects the learned null-prompt embedding.
struct Condition {
  std::optional<int> label;
  std::optional<Eigen::VectorXd> prompt;

  static Condition null() { return {}; }
  bool is_null() const { return !label && !prompt; }
  bool operator==(const Condition& other) const;
};

struct ModelArch {
  int data_dim = 2;
  int num_classes = 8;
  int hidden = 256;
  int depth = 4;  // number of hidden GELU layers
  int prompt_dim = 0;
  int time_dim = 16;  // also the width of the class and prompt embeddings

  bool operator==(const ModelArch&) const = default;
  int input_dim() const { return data_dim + 3 * time_dim; }
  void validate() const;
};

// Sinusoidal features of t at frequencies geometrically spaced in [1, 10]:
// [sin(2 pi f_i t)..., cos(2 pi f_i t)...].
Eigen::VectorXd time_embed(double t, int dim);

// MLP velocity field v(x, t, c). Input is [x, time_embed(t), class_emb, prompt_emb].
class VelocityModel {
 public:
  // Parameter slots in declaration order (also the checkpoint payload order).
  enum Slot : std::size_t { kClassTable = 0, kNullPrompt, kPromptWeight, kPromptBias, kFirstLayer };

  VelocityModel() = default;
  explicit VelocityModel(const ModelArch& arch);

  const ModelArch& arch() const noexcept { return arch_; }
  std::vector<Eigen::MatrixXd>& params() noexcept { return params_; }
  const std::vector<Eigen::MatrixXd>& params() const noexcept { return params_; }
  std::size_t num_scalars() const;

  const Eigen::MatrixXd& layer_weight(int layer) const { return params_[kFirstLayer + 2 * layer]; }
  const Eigen::MatrixXd& layer_bias(int layer) const { return params_[kFirstLayer + 2 * layer + 1]; }
  // Linear layers: depth hidden layers followed by the output layer.
  int num_layers() const { return arch_.depth + 1; }

  bool operator==(const VelocityModel& other) const;

  // Velocity for a batch: x is D x B, t has B entries, one condition per column.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                          std::span<const Condition> conds) const;
  // Single-item convenience.
  Eigen::VectorXd forward(const Eigen::VectorXd& x, double t, const Condition& cond) const;

 private:
  ModelArch arch_;
  std::vector<Eigen::MatrixXd> params_;
};

// Deterministic init: fan-in scaled normal hidden weights, N(0,1) embeddings, zero biases,
// zero final layer (the initial field is identically zero).
VelocityModel init_params(std::uint64_t seed, const ModelArch& arch);

// Parameters bound as leaves of a tape.
struct ModelVars {
  std::vector<ad::Var> params;
};

ModelVars bind(ad::Tape& tape, const VelocityModel& model);

// Differentiable forward with the same arithmetic as VelocityModel::forward.
ad::Var velocity_forward(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch,
                         const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                         std::span<const Condition> conds);

// Binary checkpoint: "GFFM", u32 version, six u32 arch fields, f64 payload, u64 payload count.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const VelocityModel& model, const std::filesystem::path& path);
VelocityModel load_checkpoint(const std::filesystem::path& path);
// Also rejects a checkpoint whose architecture differs from `expected`.
VelocityModel load_checkpoint(const std::filesystem::path& path, const ModelArch& expected);

}  // namespace gffm
