#include "ctxseg/objectives.hpp"

#include <cmath>

#include "ctxseg/ops.hpp"

namespace ctxseg {

void LossConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorCode::config, "loss: lambda must be >= 0");
  if (!(margin > 0.0) || !std::isfinite(margin)) fail(ErrorCode::config, "loss: margin must be > 0");
  for (const double w : class_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorCode::config, "loss: class weights must be >= 0");
  }
}

template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::span<const std::uint8_t> mask, const LossConfig& config) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != mask.size()) {
    fail(ErrorCode::shape_mismatch, "cross_entropy_loss: logits " + shape_str(s) + " for " +
                                        std::to_string(mask.size()) + " pixels");
  }
  std::vector<std::int32_t> labels(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] >= s[1]) fail(ErrorCode::unknown_label, "mask value " + std::to_string(mask[i]) + " outside vocabulary");
    labels[i] = mask[i];
  }
  if (!config.class_weights.empty() && config.class_weights.size() != s[1]) {
    fail(ErrorCode::config, "loss: expected " + std::to_string(s[1]) + " class weights");
  }
  return ops::softmax_cross_entropy(logits, std::span<const std::int32_t>(labels),
                                    std::span<const double>(config.class_weights));
}

template <typename T>
Var<T> contrastive_loss(const Var<T>& embeddings, std::span<const std::size_t> class_ids,
                        const SimilarityPairs& pairs, std::size_t vocab_size, const LossConfig& config) {
  const std::size_t rows = embeddings.shape()[0];
  if (embeddings.shape().size() != 2 || class_ids.size() != rows) {
    fail(ErrorCode::shape_mismatch, "contrastive_loss: " + std::to_string(class_ids.size()) + " ids for " +
                                        shape_str(embeddings.shape()));
  }
  if (rows < 2) fail(ErrorCode::invalid_argument, "contrastive_loss needs at least one pair");
  for (const auto c : class_ids) {
    if (c >= vocab_size) fail(ErrorCode::unknown_label, "contrastive_loss: class id " + std::to_string(c));
  }
  for (const auto& [a, b] : pairs.positives()) {
    if (a >= vocab_size || b >= vocab_size) fail(ErrorCode::unknown_label, "similarity pair outside vocabulary");
  }
  std::vector<std::int64_t> left, right;
  Tensor<T> positive(Shape{rows * (rows - 1) / 2});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = i + 1; j < rows; ++j) {
      positive[left.size()] = pairs.is_positive(class_ids[i], class_ids[j]) ? T(1) : T(0);
      left.push_back(static_cast<std::int64_t>(i));
      right.push_back(static_cast<std::int64_t>(j));
    }
  }
  auto& tape = embeddings.tape();
  Tensor<T> negative(positive.shape());
  for (std::size_t k = 0; k < positive.size(); ++k) negative[k] = T(1) - positive[k];

  const auto unit = ops::l2_normalize_rows(embeddings);
  const auto diff = ops::sub(ops::gather_rows(unit, std::span<const std::int64_t>(left)),
                             ops::gather_rows(unit, std::span<const std::int64_t>(right)));
  const auto d2 = ops::sum_last(ops::square(diff));
  const auto hinge = ops::relu(ops::add_scalar(ops::scale(ops::sqrt(d2), -1.0), config.margin));
  const auto terms = ops::add(ops::mul(tape.constant(std::move(positive)), d2),
                              ops::mul(tape.constant(std::move(negative)), ops::square(hinge)));
  return ops::mean(terms);
}

template <typename T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& contrastive, const LossConfig& config) {
  if (ce.value().size() != 1 || contrastive.value().size() != 1) {
    fail(ErrorCode::shape_mismatch, "total_loss expects scalar components");
  }
  if (config.lambda == 0.0) return ce;
  return ops::add(ce, ops::scale(contrastive, config.lambda));
}

#define CTXSEG_INSTANTIATE_OBJECTIVES(T)                                                                   \
  template Var<T> cross_entropy_loss(const Var<T>&, std::span<const std::uint8_t>, const LossConfig&);     \
  template Var<T> contrastive_loss(const Var<T>&, std::span<const std::size_t>, const SimilarityPairs&,    \
                                   std::size_t, const LossConfig&);                                        \
  template Var<T> total_loss(const Var<T>&, const Var<T>&, const LossConfig&);

CTXSEG_INSTANTIATE_OBJECTIVES(float)
CTXSEG_INSTANTIATE_OBJECTIVES(double)

}  // namespace ctxseg
