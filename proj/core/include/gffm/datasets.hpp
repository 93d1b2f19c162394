#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gffm/analytic_oracle.hpp"
#include "gffm/velocity_model.hpp"

namespace gffm {

enum class DatasetKind { Mixture, Infill };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::Mixture;
  GaussianMixtureSpec mixture;
  int n_items = 4096;
  double mask_lo = 0.7;
  double mask_hi = 1.0;
  std::uint64_t seed = 0;

  int dim() const { return mixture.dim(); }
  // Prompt length the model must accept: 0 for mixture data, 2 D for infill data.
  int prompt_dim() const { return kind == DatasetKind::Infill ? 2 * dim() : 0; }
  void validate() const;
};

struct DataItem {
  Eigen::VectorXd x1;
  Condition cond;
};

using Dataset = std::vector<DataItem>;

// Labels drawn proportional to the mixture weights, points from the labelled component.
Dataset make_mixture_dataset(const DatasetSpec& spec);

// Mixture items whose prompt is [values; mask flags] with a contiguous masked span of
// round(r D) coordinates, r ~ U(mask_lo, mask_hi). Masked values hold the sentinel 0.
Dataset make_infill_dataset(const DatasetSpec& spec);

// Dispatches on spec.kind.
Dataset make_dataset(const DatasetSpec& spec);

// Fraction of masked coordinates in an infill prompt (0 when no prompt is present).
double prompt_mask_ratio(const Condition& cond);

// "none" without a prompt, otherwise "start:length" of the masked span.
std::string prompt_mask_descriptor(const Condition& cond);

}  // namespace gffm
