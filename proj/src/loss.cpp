#include "fms/loss.hpp"

#include <cmath>

namespace fms {

void FocalConfig::check(std::size_t classes) const {
  if (!(gamma >= 0.0)) throw ContractError("focal: gamma must be >= 0");
  if (!beta.empty() && beta.size() != classes)
    throw ContractError("focal: " + std::to_string(beta.size()) + " weights for " +
                        std::to_string(classes) + " classes");
  for (double b : beta)
    if (!(b > 0.0)) throw ContractError("focal: class weights must be > 0");
}

Tensor focal_loss(const Tensor& probs, const std::vector<int>& labels,
                  const FocalConfig& cfg) {
  if (probs.shape().size() != 2)
    throw ContractError("focal: expected N x C probabilities, got " + shape_str(probs.shape()));
  const std::size_t n = probs.rows();
  const std::size_t c = probs.cols();
  cfg.check(c);
  if (labels.size() != n)
    throw ContractError("focal: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(n) + " rows");
  if (n == 0) return Tensor::scalar(0.0);
  Index pick(n);
  std::vector<double> weight(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ContractError("focal: label " + std::to_string(labels[i]) + " at row " +
                          std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
    pick[i] = static_cast<std::int64_t>(i * c + static_cast<std::size_t>(labels[i]));
    weight[i] = cfg.beta.empty() ? 1.0 : cfg.beta[static_cast<std::size_t>(labels[i])];
  }
  Tensor p = clamp(gather(reshape(probs, {n * c, 1}), 0, pick), kProbClamp, 1.0 - kProbClamp);
  Tensor term = mul(log(p), Tensor::from({n, 1}, std::move(weight)));
  if (cfg.gamma != 0.0) term = mul(term, pow_scalar(add_scalar(scale(p, -1.0), 1.0), cfg.gamma));
  return scale(mean(term), -1.0);
}

Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  FocalConfig cfg;
  cfg.gamma = 0.0;
  return focal_loss(probs, labels, cfg);
}

Tensor binary_probs(const Tensor& scores) {
  return concat({add_scalar(scale(scores, -1.0), 1.0), scores}, 1);
}

Tensor total_loss(const Tensor& l_f, const Tensor& l_s, const Tensor& l_cls,
                  const Tensor& l_reg, const LossWeights& weights) {
  const char* names[] = {"L_f", "L_s", "L_cls", "L_reg"};
  const Tensor* terms[] = {&l_f, &l_s, &l_cls, &l_reg};
  for (int i = 0; i < 4; ++i) {
    if (terms[i]->numel() != 1)
      throw ContractError(std::string("total_loss: ") + names[i] + " is not a scalar");
    if (!std::isfinite(terms[i]->item()))
      throw ContractError(std::string("total_loss: ") + names[i] + " is not finite");
  }
  if (!std::isfinite(weights.w)) throw ContractError("total_loss: weight is not finite");
  return add(scale(add(l_f, l_s), weights.w), add(l_cls, l_reg));
}

std::pair<Tensor, Tensor> head_losses(const Tensor& logits, const Tensor& regression,
                                      const HeadTargets& targets) {
  const std::size_t n = logits.rows();
  if (logits.shape() != Shape{n, 2})
    throw ContractError("head: logits " + shape_str(logits.shape()) + ", expected N x 2");
  if (targets.objectness.size() != n || regression.rows() != n ||
      targets.regression.shape() != regression.shape())
    throw ContractError("head: predictions " + shape_str(regression.shape()) +
                        " vs targets " + shape_str(targets.regression.shape()));
  Tensor l_cls = cross_entropy(softmax(logits), targets.objectness);
  Index pos;
  for (std::size_t i = 0; i < n; ++i)
    if (targets.objectness[i] == 1) pos.push_back(static_cast<std::int64_t>(i));
  if (pos.empty()) return {l_cls, Tensor::scalar(0.0)};
  Tensor r = sub(gather(regression, 0, pos), gather(targets.regression, 0, pos));
  Tensor l_reg = scale(sum(smooth_l1(r)), 1.0 / static_cast<double>(pos.size()));
  return {l_cls, l_reg};
}

}  // namespace fms
