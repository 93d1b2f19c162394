#include "gffm/analytic_oracle.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "gffm/error.hpp"

namespace gffm {

void GaussianMixtureSpec::validate() const {
  const std::size_t k = weights.size();
  if (k == 0) throw Error("mixture: no components");
  if (means.size() != k || variances.size() != k) {
    throw Error("mixture: " + std::to_string(k) + " weights, " + std::to_string(means.size()) + " means, " +
                std::to_string(variances.size()) + " variances");
  }
  const Eigen::Index d = means.front().size();
  if (d < 1) throw Error("mixture: zero-dimensional means");
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (means[i].size() != d) throw Error("mixture: component " + std::to_string(i) + " has mismatched dimension");
    if (!(weights[i] > 0.0)) throw Error("mixture: weight of component " + std::to_string(i) + " must be positive");
    if (!(variances[i] > 0.0)) throw Error("mixture: variance of component " + std::to_string(i) + " must be positive");
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-12) throw Error("mixture: weights sum to " + std::to_string(total) + ", not 1");
}

GaussianMixtureSpec GaussianMixtureSpec::ring(int components, int dim, double radius, double variance) {
  if (components < 1 || dim < 1) throw Error("mixture ring: need at least one component and dimension");
  GaussianMixtureSpec spec;
  for (int k = 0; k < components; ++k) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(dim);
    if (dim == 1) {
      mu(0) = components == 1 ? 0.0 : radius * (2.0 * k / (components - 1) - 1.0);
    } else {
      const double angle = 2.0 * std::numbers::pi * k / components;
      mu(0) = radius * std::cos(angle);
      mu(1) = radius * std::sin(angle);
    }
    spec.weights.push_back(1.0 / components);
    spec.means.push_back(std::move(mu));
    spec.variances.push_back(variance);
  }
  return spec;
}

Eigen::VectorXd analytic_cond_velocity(const GaussianMixtureSpec& spec, int k, const Eigen::VectorXd& x, double t) {
  if (k < 0 || k >= spec.num_components()) throw Error("analytic_cond_velocity: label " + std::to_string(k) + " out of range");
  if (!(t >= 0.0 && t <= 1.0)) throw Error("analytic_cond_velocity: time outside [0,1]");
  const Eigen::VectorXd& mu = spec.means[static_cast<std::size_t>(k)];
  if (t > kMaxFieldTime) return x;
  const double s2 = spec.variances[static_cast<std::size_t>(k)];
  const double vt = (1.0 - t) * (1.0 - t) + t * t * s2;
  const double coef = (t * s2 - (1.0 - t)) / vt;
  return mu + coef * (x - t * mu);
}

Eigen::VectorXd component_responsibilities(const GaussianMixtureSpec& spec, const Eigen::VectorXd& x, double t) {
  const int K = spec.num_components();
  const double tt = std::min(t, kMaxFieldTime);
  const double d = static_cast<double>(x.size());
  Eigen::VectorXd logp(K);
  for (int k = 0; k < K; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const double s2 = spec.variances[i];
    const double vt = (1.0 - tt) * (1.0 - tt) + tt * tt * s2;
    logp(k) = std::log(spec.weights[i]) - 0.5 * d * std::log(vt) - 0.5 * (x - tt * spec.means[i]).squaredNorm() / vt;
  }
  const double m = logp.maxCoeff();
  Eigen::VectorXd r = (logp.array() - m).exp();
  return r / r.sum();
}

Eigen::VectorXd analytic_marginal_velocity(const GaussianMixtureSpec& spec, const Eigen::VectorXd& x, double t) {
  const Eigen::VectorXd r = component_responsibilities(spec, x, t);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(x.size());
  for (int k = 0; k < spec.num_components(); ++k) u += r(k) * analytic_cond_velocity(spec, k, x, t);
  return u;
}

Eigen::VectorXd exact_sample(const GaussianMixtureSpec& spec, int label, Rng& rng) {
  if (label < 0 || label >= spec.num_components()) {
    throw Error("exact_sample: label " + std::to_string(label) + " outside [0," + std::to_string(spec.num_components()) + ")");
  }
  const auto i = static_cast<std::size_t>(label);
  return spec.means[i] + std::sqrt(spec.variances[i]) * rng.normal_vector(spec.means[i].size());
}

int bayes_classify(const GaussianMixtureSpec& spec, const Eigen::VectorXd& x) {
  const double d = static_cast<double>(x.size());
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < spec.num_components(); ++k) {
    const auto i = static_cast<std::size_t>(k);
    const double s2 = spec.variances[i];
    const double score = std::log(spec.weights[i]) - 0.5 * d * std::log(s2) - 0.5 * (x - spec.means[i]).squaredNorm() / s2;
    if (score > best_score) {
      best = k;
      best_score = score;
    }
  }
  return best;
}

}  // namespace gffm
