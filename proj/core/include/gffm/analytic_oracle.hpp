#pragma once

#include <vector>

#include <Eigen/Dense>

#include "gffm/random.hpp"

namespace gffm {

// Isotropic Gaussian mixture; label k selects component k.
struct GaussianMixtureSpec {
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<double> variances;

  int num_components() const { return static_cast<int>(weights.size()); }
  int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  // Throws gffm::Error on inconsistent sizes, non-positive variances or weights not summing to 1.
  void validate() const;

  // K equal-weight components on a circle of `radius` in the first two coordinates
  // (on a line when dim == 1), each with variance `variance`.
  static GaussianMixtureSpec ring(int components, int dim, double radius, double variance);
};

// Largest t at which the fields are evaluated; t above it returns the t = 1 limit.
inline constexpr double kMaxFieldTime = 1.0 - 1e-9;

// E[x1 - z | x_t = x] for component k under x_t = (1 - t) z + t x1.
Eigen::VectorXd analytic_cond_velocity(const GaussianMixtureSpec& spec, int k, const Eigen::VectorXd& x, double t);

// Posterior probability of each component given x_t = x.
Eigen::VectorXd component_responsibilities(const GaussianMixtureSpec& spec, const Eigen::VectorXd& x, double t);

// Responsibility-weighted mixture of the conditional fields.
Eigen::VectorXd analytic_marginal_velocity(const GaussianMixtureSpec& spec, const Eigen::VectorXd& x, double t);

Eigen::VectorXd exact_sample(const GaussianMixtureSpec& spec, int label, Rng& rng);

// argmax_k pi_k N(x; mu_k, sigma_k^2 I); ties go to the smallest k.
int bayes_classify(const GaussianMixtureSpec& spec, const Eigen::VectorXd& x);

}  // namespace gffm
