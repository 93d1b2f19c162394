#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gffm/autodiff.hpp"
#include "gffm/datasets.hpp"
#include "gffm/error.hpp"
#include "gffm/random.hpp"
#include "gffm/velocity_model.hpp"

namespace gffm {

enum class LossKind { Cfm, MgCfm };

const char* loss_kind_name(LossKind kind);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  bool operator==(const AdamWConfig&) const = default;
};

struct TrainConfig {
  LossKind loss_kind = LossKind::Cfm;
  double w = 0.7;  // guidance weight baked into the MG target
  double p_uncond = 0.2;
  double p_prompt_drop = 0.3;
  bool use_stop_gradient = true;
  double peak_lr = 1e-3;
  int warmup_steps = 250;
  int total_steps = 5000;
  double grad_clip_norm = 1.0;
  int batch_size = 128;
  std::uint64_t seed = 0;
  AdamWConfig adam;

  bool operator==(const TrainConfig&) const = default;
  void validate() const;
};

struct StepRecord {
  long step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool diverged = false;
};

struct TrainRecord {
  std::vector<StepRecord> steps;

  bool any_diverged() const;
  // CSV with header step,loss,grad_norm,lr,diverged.
  void write_csv(std::ostream& os) const;
  void write_csv(const std::filesystem::path& path) const;
};

struct PathSample {
  Eigen::VectorXd x_t;
  Eigen::VectorXd u_target;
};

// Linear path x_t = (1 - t) z + t x1 with constant target x1 - z.
PathSample sample_path(const Eigen::VectorXd& x1, const Eigen::VectorXd& z, double t);

// Two uniform draws per call: the first drops everything w.p. p_uncond, the second drops the
// prompt alone w.p. p_prompt_drop.
Condition dropout_condition(const Condition& cond, Rng& rng, double p_uncond, double p_prompt_drop);

// One minibatch of path samples: column j of x_t/target belongs to item j.
struct LossBatch {
  Eigen::MatrixXd x_t;
  Eigen::MatrixXd target;
  Eigen::VectorXd t;
  std::vector<Condition> conds;  // after dropout
};

// Per item, in order: t ~ U(0,1), z ~ N(0, I), then the dropout draws.
LossBatch draw_loss_batch(std::span<const DataItem> items, Rng& rng, double p_uncond, double p_prompt_drop);

// mean_j || v_pred_j - target_j ||^2
ad::Var assemble_cfm_loss(ad::Tape& tape, const ad::Var& v_pred, const Eigen::MatrixXd& target);

// mean_j || v_c_j + w dv_j - target_j ||^2 with dv = sg(v_c - v_u) (or v_c - v_u when use_stop_gradient is false).
ad::Var assemble_mg_loss(ad::Tape& tape, const ad::Var& v_cond, const ad::Var& v_uncond, const Eigen::MatrixXd& target,
                         double w, bool use_stop_gradient);

ad::Var cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, const LossBatch& batch);
ad::Var mg_cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, const LossBatch& batch, double w,
                    bool use_stop_gradient);

// Convenience forms that draw the batch from `rng` with the config's dropout probabilities.
ad::Var cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, std::span<const DataItem> items,
                 const TrainConfig& cfg, Rng& rng);
ad::Var mg_cfm_loss(ad::Tape& tape, const ModelVars& vars, const ModelArch& arch, std::span<const DataItem> items,
                    const TrainConfig& cfg, Rng& rng);

// Linear warmup to peak_lr, then linear decay to 0 at total_steps.
double lr_schedule(long step, const TrainConfig& cfg);

// Scales all gradients by max_norm / norm when the global L2 norm exceeds max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(std::vector<Eigen::MatrixXd>& grads, double max_norm);

struct AdamWState {
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
  long step = 0;

  static AdamWState zeros_like(const std::vector<Eigen::MatrixXd>& params);
};

void adamw_step(std::vector<Eigen::MatrixXd>& params, const std::vector<Eigen::MatrixXd>& grads, AdamWState& state,
                double lr, const AdamWConfig& cfg);

struct TrainResult {
  VelocityModel model;
  TrainRecord record;
};

// Non-finite loss or gradient during training. Carries the record up to and including the failing step.
class TrainDivergedError : public DivergenceError {
 public:
  TrainDivergedError(long last_finite_step, const std::string& what, TrainRecord record)
      : DivergenceError(last_finite_step, what), record_(std::move(record)) {}
  const TrainRecord& record() const noexcept { return record_; }

 private:
  TrainRecord record_;
};

// Invoked after every optimizer step.
using StepCallback = std::function<void(const StepRecord&)>;

// Deterministic in (cfg, arch, dataset). Throws TrainDivergedError on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const ModelArch& arch, const Dataset& dataset,
                  const StepCallback& on_step = {});

}  // namespace gffm
