#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gffm/analytic_oracle.hpp"
#include "gffm/velocity_model.hpp"

namespace gffm {

enum class ScheduleKind { Uniform, Sway };

inline constexpr double kSwayMin = -1.0;
// 2 / (pi - 2): largest s keeping the sway map monotone on [0, 1].
inline constexpr double kSwayMax = 1.7519383938841416;

struct SamplerConfig {
  int nfe = 32;
  bool cfg_enabled = false;
  double guidance_scale = 2.0;
  ScheduleKind schedule = ScheduleKind::Uniform;
  double sway_s = -1.0;
  std::uint64_t seed = 0;

  bool operator==(const SamplerConfig&) const = default;
  void validate() const;
};

struct EvalCounters {
  long long model_forward_count = 0;
  double wall_clock_seconds = 0.0;

  EvalCounters& operator+=(const EvalCounters& o) {
    model_forward_count += o.model_forward_count;
    wall_clock_seconds += o.wall_clock_seconds;
    return *this;
  }
};

// Batched velocity field: x is D x B, one condition per column, all columns share t.
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual int dim() const = 0;
  virtual Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const = 0;
};

class ModelField final : public VelocityField {
 public:
  explicit ModelField(const VelocityModel& model) : model_(model) {}
  int dim() const override { return model_.arch().data_dim; }
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const override;

 private:
  const VelocityModel& model_;
};

// Closed-form fields: a labelled condition gives the conditional field, an unlabelled one
// the marginal field. Prompts are ignored.
class AnalyticField final : public VelocityField {
 public:
  explicit AnalyticField(const GaussianMixtureSpec& spec) : spec_(spec) {}
  int dim() const override { return spec_.dim(); }
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const override;

 private:
  const GaussianMixtureSpec& spec_;
};

// Column-wise field from a callable; used for stubs and closed-form test fields.
class FunctionField final : public VelocityField {
 public:
  using Fn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double t, const Condition& cond)>;
  FunctionField(int dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
  int dim() const override { return dim_; }
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const override;

 private:
  int dim_;
  Fn fn_;
};

std::vector<double> uniform_schedule(int nfe);
// f(u) = u + s (cos(pi u / 2) - 1 + u) applied to the uniform grid.
std::vector<double> sway_schedule(int nfe, double s);
std::vector<double> make_schedule(const SamplerConfig& cfg);

// One evaluation per column; adds B to the counter.
Eigen::MatrixXd plain_velocity(const VelocityField& field, const Eigen::MatrixXd& x, double t,
                               std::span<const Condition> conds, EvalCounters& counters);

// (1 - w) u(x) + w u(x|c), which equals u(x) + w (u(x|c) - u(x)). Adds 2 B to the counter.
Eigen::MatrixXd cfg_velocity(const VelocityField& field, const Eigen::MatrixXd& x, double t,
                             std::span<const Condition> conds, double w, EvalCounters& counters);

struct SampleResult {
  Eigen::MatrixXd x;  // D x B
  EvalCounters counters;
};

// Explicit Euler from t = 0 (noise) to t = 1 (data); the field is evaluated at left endpoints only.
SampleResult integrate(const VelocityField& field, const Eigen::MatrixXd& z0, const SamplerConfig& cfg,
                       std::span<const Condition> conds);

// Draws z0 for item i from stream i of cfg.seed, then integrates the whole batch.
SampleResult sample_batch(const VelocityField& field, std::span<const Condition> conds, const SamplerConfig& cfg);
SampleResult sample_batch(const VelocityModel& model, std::span<const Condition> conds, const SamplerConfig& cfg);

// One row per sample: label, prompt-mask descriptor, then D coordinates.
void write_samples_csv(std::ostream& os, const Eigen::MatrixXd& samples, std::span<const Condition> conds);
void write_samples_csv(const std::filesystem::path& path, const Eigen::MatrixXd& samples,
                       std::span<const Condition> conds);

}  // namespace gffm
