#include "gffm/sampler.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>

#include "gffm/datasets.hpp"
#include "gffm/error.hpp"
#include "gffm/random.hpp"

namespace gffm {

void SamplerConfig::validate() const {
  if (nfe < 1) throw Error("sampler: nfe must be at least 1");
  if (!(guidance_scale >= 0.0)) throw Error("sampler: guidance_scale must be non-negative");
  if (schedule == ScheduleKind::Sway && !(sway_s >= kSwayMin && sway_s <= kSwayMax)) {
    throw Error("sampler: sway coefficient " + std::to_string(sway_s) + " outside [-1, 2/(pi-2)]");
  }
}

Eigen::MatrixXd ModelField::evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const {
  return model_.forward(x, Eigen::VectorXd::Constant(x.cols(), t), conds);
}

Eigen::MatrixXd AnalyticField::evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Condition& c = conds[static_cast<std::size_t>(j)];
    out.col(j) = c.label ? analytic_cond_velocity(spec_, *c.label, x.col(j), t) : analytic_marginal_velocity(spec_, x.col(j), t);
  }
  return out;
}

Eigen::MatrixXd FunctionField::evaluate(const Eigen::MatrixXd& x, double t, std::span<const Condition> conds) const {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = fn_(x.col(j), t, conds[static_cast<std::size_t>(j)]);
  return out;
}

std::vector<double> uniform_schedule(int nfe) {
  if (nfe < 1) throw Error("uniform_schedule: nfe must be at least 1");
  std::vector<double> ts(static_cast<std::size_t>(nfe) + 1);
  for (int k = 0; k <= nfe; ++k) ts[static_cast<std::size_t>(k)] = static_cast<double>(k) / nfe;
  ts.back() = 1.0;
  return ts;
}

std::vector<double> sway_schedule(int nfe, double s) {
  if (!(s >= kSwayMin && s <= kSwayMax)) {
    throw Error("sway_schedule: coefficient " + std::to_string(s) + " outside [-1, 2/(pi-2)]");
  }
  std::vector<double> ts = uniform_schedule(nfe);
  if (s == 0.0) return ts;
  for (double& u : ts) u = u + s * (std::cos(std::numbers::pi / 2.0 * u) - 1.0 + u);
  ts.front() = 0.0;
  ts.back() = 1.0;
  return ts;
}

std::vector<double> make_schedule(const SamplerConfig& cfg) {
  return cfg.schedule == ScheduleKind::Sway ? sway_schedule(cfg.nfe, cfg.sway_s) : uniform_schedule(cfg.nfe);
}

Eigen::MatrixXd plain_velocity(const VelocityField& field, const Eigen::MatrixXd& x, double t,
                               std::span<const Condition> conds, EvalCounters& counters) {
  counters.model_forward_count += x.cols();
  return field.evaluate(x, t, conds);
}

Eigen::MatrixXd cfg_velocity(const VelocityField& field, const Eigen::MatrixXd& x, double t,
                             std::span<const Condition> conds, double w, EvalCounters& counters) {
  if (!(w >= 0.0)) throw Error("cfg_velocity: guidance scale must be non-negative");
  const std::vector<Condition> null_conds(conds.size(), Condition::null());
  const Eigen::MatrixXd cond = field.evaluate(x, t, conds);
  const Eigen::MatrixXd uncond = field.evaluate(x, t, null_conds);
  counters.model_forward_count += 2 * x.cols();
  return (1.0 - w) * uncond + w * cond;
}

SampleResult integrate(const VelocityField& field, const Eigen::MatrixXd& z0, const SamplerConfig& cfg,
                       std::span<const Condition> conds) {
  cfg.validate();
  if (z0.rows() != field.dim()) throw ShapeError("integrate: noise dimension does not match the field");
  if (static_cast<Eigen::Index>(conds.size()) != z0.cols()) throw ShapeError("integrate: one condition per column required");
  const auto start = std::chrono::steady_clock::now();
  const std::vector<double> ts = make_schedule(cfg);

  SampleResult r{z0, {}};
  for (int k = 0; k < cfg.nfe; ++k) {
    const double t = ts[static_cast<std::size_t>(k)];
    const double dt = ts[static_cast<std::size_t>(k) + 1] - t;
    const Eigen::MatrixXd v = cfg.cfg_enabled ? cfg_velocity(field, r.x, t, conds, cfg.guidance_scale, r.counters)
                                              : plain_velocity(field, r.x, t, conds, r.counters);
    r.x += dt * v;
    if (!r.x.allFinite()) throw NumericError("integrate: non-finite state at step " + std::to_string(k));
  }
  r.counters.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

SampleResult sample_batch(const VelocityField& field, std::span<const Condition> conds, const SamplerConfig& cfg) {
  if (conds.empty()) throw Error("sample_batch: empty condition list");
  const Rng base(cfg.seed);
  Eigen::MatrixXd z0(field.dim(), static_cast<Eigen::Index>(conds.size()));
  for (std::size_t i = 0; i < conds.size(); ++i) {
    Rng rng = base.split(i);
    z0.col(static_cast<Eigen::Index>(i)) = rng.normal_vector(field.dim());
  }
  return integrate(field, z0, cfg, conds);
}

SampleResult sample_batch(const VelocityModel& model, std::span<const Condition> conds, const SamplerConfig& cfg) {
  return sample_batch(ModelField(model), conds, cfg);
}

void write_samples_csv(std::ostream& os, const Eigen::MatrixXd& samples, std::span<const Condition> conds) {
  if (static_cast<Eigen::Index>(conds.size()) != samples.cols()) throw ShapeError("write_samples_csv: one condition per sample required");
  os << "label,prompt_mask";
  for (Eigen::Index d = 0; d < samples.rows(); ++d) os << ",x" << d;
  os << '\n' << std::setprecision(17);
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    const Condition& c = conds[static_cast<std::size_t>(j)];
    if (c.label) {
      os << *c.label;
    } else {
      os << "null";
    }
    os << ',' << prompt_mask_descriptor(c);
    for (Eigen::Index d = 0; d < samples.rows(); ++d) os << ',' << samples(d, j);
    os << '\n';
  }
}

void write_samples_csv(const std::filesystem::path& path, const Eigen::MatrixXd& samples, std::span<const Condition> conds) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  write_samples_csv(os, samples, conds);
}

}  // namespace gffm
