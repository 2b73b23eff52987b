#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/embeddings.hpp"

namespace ctxseg {

struct LossConfig {
  double lambda = 0.1;
  double margin = 1.0;
  /// Optional per-class weights indexed by mask id (background first).
  std::vector<double> class_weights;

  void validate() const;
};

/// Mean over pixels of -log softmax(logits)[p, mask[p]]; logits [P x (n+1)],
/// mask values are class ids with background 0.
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::span<const std::uint8_t> mask, const LossConfig& config);

/// Pairwise margin loss over all unordered pairs of rows:
/// y d^2 + (1 - y) max(0, m - d)^2 with d the distance between unit-normalised
/// rows and y = 1 for pairs listed as similar. `class_ids[r]` is the
/// vocabulary id of row r; at least two rows are required.
template <typename T>
Var<T> contrastive_loss(const Var<T>& embeddings, std::span<const std::size_t> class_ids,
                        const SimilarityPairs& pairs, std::size_t vocab_size, const LossConfig& config);

/// L = L_ce + lambda * L_contrastive.
template <typename T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& contrastive, const LossConfig& config);

}  // namespace ctxseg
