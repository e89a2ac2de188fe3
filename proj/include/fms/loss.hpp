#pragma once

#include <utility>
#include <vector>

#include "fms/tensor.hpp"

namespace fms {

struct FocalConfig {
  double gamma = 2.0;
  std::vector<double> beta;  // per class; empty means 1 for every class

  void check(std::size_t classes) const;
};

constexpr double kProbClamp = 1e-7;

/// Mean over rows of -beta_y (1 - p_y)^gamma log p_y with p clamped to
/// [1e-7, 1 - 1e-7]. `probs` is N x C with rows summing to one.
Tensor focal_loss(const Tensor& probs, const std::vector<int>& labels,
                  const FocalConfig& cfg = {});

/// Focal loss with gamma 0 and unit weights.
Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels);

/// Two-class probabilities [1 - s, s] from an N x 1 score column.
Tensor binary_probs(const Tensor& scores);

struct LossWeights {
  double w = 2.0;
};

/// w (l_f + l_s) + l_cls + l_reg. Each term must be a finite scalar.
Tensor total_loss(const Tensor& l_f, const Tensor& l_s, const Tensor& l_cls,
                  const Tensor& l_reg, const LossWeights& weights = {});

/// Targets of the toy bird's-eye-view head, one row per cell.
struct HeadTargets {
  std::vector<int> objectness;  // 0 or 1 per cell
  Tensor regression;            // cells x R, read only where objectness is 1
};

/// Cross-entropy of the softmax of `logits` (cells x 2) against objectness,
/// and smooth-L1 summed over the regression columns and averaged over the
/// positive cells (0 without positives).
std::pair<Tensor, Tensor> head_losses(const Tensor& logits, const Tensor& regression,
                                      const HeadTargets& targets);

}  // namespace fms
