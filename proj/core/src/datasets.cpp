#include "gffm/datasets.hpp"

#include <algorithm>
#include <cmath>

#include "gffm/error.hpp"

namespace gffm {

namespace {

int draw_label(const GaussianMixtureSpec& mixture, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (int k = 0; k < mixture.num_components(); ++k) {
    acc += mixture.weights[static_cast<std::size_t>(k)];
    if (u < acc) return k;
  }
  return mixture.num_components() - 1;
}

}  // namespace

void DatasetSpec::validate() const {
  mixture.validate();
  if (n_items < 0) throw Error("dataset: n_items must be non-negative");
  if (!(mask_lo >= 0.0 && mask_hi <= 1.0 && mask_lo <= mask_hi)) {
    throw Error("dataset: mask bounds must satisfy 0 <= mask_lo <= mask_hi <= 1");
  }
  if (kind == DatasetKind::Infill && dim() < 2) throw Error("dataset: infill requires D >= 2");
}

Dataset make_mixture_dataset(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.n_items));
  for (int i = 0; i < spec.n_items; ++i) {
    const int label = draw_label(spec.mixture, rng);
    data.push_back({exact_sample(spec.mixture, label, rng), Condition{label, std::nullopt}});
  }
  return data;
}

Dataset make_infill_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.dim() < 2) throw Error("dataset: infill requires D >= 2");
  Dataset data = make_mixture_dataset(spec);
  Rng rng = Rng(spec.seed).split(1);
  const int D = spec.dim();
  for (DataItem& item : data) {
    const double ratio = rng.uniform(spec.mask_lo, spec.mask_hi);
    const int masked = std::clamp(static_cast<int>(std::lround(ratio * D)), 0, D);
    const int start = masked == D ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(D - masked + 1)));
    Eigen::VectorXd prompt(2 * D);
    prompt.head(D) = item.x1;
    prompt.tail(D).setZero();
    for (int j = start; j < start + masked; ++j) {
      prompt(j) = 0.0;
      prompt(D + j) = 1.0;
    }
    item.cond.prompt = std::move(prompt);
  }
  return data;
}

Dataset make_dataset(const DatasetSpec& spec) {
  return spec.kind == DatasetKind::Infill ? make_infill_dataset(spec) : make_mixture_dataset(spec);
}

double prompt_mask_ratio(const Condition& cond) {
  if (!cond.prompt) return 0.0;
  const Eigen::Index D = cond.prompt->size() / 2;
  return cond.prompt->tail(D).sum() / static_cast<double>(D);
}

std::string prompt_mask_descriptor(const Condition& cond) {
  if (!cond.prompt) return "none";
  const Eigen::Index D = cond.prompt->size() / 2;
  Eigen::Index start = -1;
  Eigen::Index length = 0;
  for (Eigen::Index j = 0; j < D; ++j) {
    if ((*cond.prompt)(D + j) != 0.0) {
      if (start < 0) start = j;
      ++length;
    }
  }
  if (start < 0) start = 0;
  return std::to_string(start) + ":" + std::to_string(length);
}

}  // namespace gffm
