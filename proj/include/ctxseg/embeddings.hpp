#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctxseg/tensor.hpp"

namespace ctxseg {

/// Ordered foreground labels. Class id i is label i; in masks and logits the
/// background takes id 0 and label i is stored as i + 1.
class LabelVocabulary {
 public:
  static constexpr std::uint8_t kBackgroundMaskId = 0;

  explicit LabelVocabulary(std::vector<std::string> labels);

  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::string& label(std::size_t id) const { return labels_.at(id); }
  /// Throws ErrorCode::unknown_label.
  std::size_t id_of(const std::string& label) const;
  bool contains(const std::string& label) const;
  std::uint8_t mask_id(std::size_t id) const { return static_cast<std::uint8_t>(id + 1); }

  friend bool operator==(const LabelVocabulary& a, const LabelVocabulary& b) { return a.labels_ == b.labels_; }

 private:
  std::vector<std::string> labels_;
};

/// Unordered positive pairs of class ids; every other pair is negative.
class SimilarityPairs {
 public:
  SimilarityPairs() = default;
  /// Throws unknown_label for labels outside the vocabulary and
  /// invalid_argument for self-pairs.
  static SimilarityPairs from_labels(const LabelVocabulary& vocab,
                                     const std::vector<std::pair<std::string, std::string>>& pairs);

  bool is_positive(std::size_t a, std::size_t b) const;
  /// Canonical (smaller id first), sorted, no duplicates.
  const std::vector<std::pair<std::size_t, std::size_t>>& positives() const noexcept { return positives_; }

 private:
  std::vector<std::pair<std::size_t, std::size_t>> positives_;
};

enum class EmbeddingProvenance { file, hashed, remote };
std::string to_string(EmbeddingProvenance p);

struct LabelEmbeddingSet {
  std::size_t dim = 0;
  Tensor<double> vectors;  // [n x dim], row i is label i, unit norm
  EmbeddingProvenance provenance = EmbeddingProvenance::hashed;
};

struct EmbeddingConfig {
  std::string provider = "hashed";  // hashed | file | remote
  std::size_t dim = 32;
  std::uint64_t seed = 0;
  std::string path;       // file provider
  std::string endpoint;   // remote provider, e.g. http://127.0.0.1:8080
  double timeout_seconds = 5.0;
  bool trainable = false;
};

using RawEmbeddings = std::map<std::string, std::vector<double>>;

LabelEmbeddingSet embed_labels(const LabelVocabulary& vocab, const EmbeddingConfig& config);

/// Seeded label hash: label bytes select an Rng stream, dim Gaussian draws,
/// then unit normalisation.
std::vector<double> hashed_embedding(const std::string& label, std::size_t dim, std::uint64_t seed);

/// Lines `label<TAB>v1,v2,...,vd`. Throws parse, dimension_mismatch,
/// duplicate_label or io.
RawEmbeddings load_embedding_file(const std::string& path);
RawEmbeddings parse_embedding_text(const std::string& text);

/// POST <endpoint>/embed with {"labels":[...]}; expects
/// {"dim":d,"vectors":{"label":[...]}}. Throws transport, timeout,
/// malformed_response, dimension_mismatch or missing_label.
RawEmbeddings fetch_remote_embeddings(const std::string& endpoint, const LabelVocabulary& vocab,
                                      double timeout_seconds);

/// Unit-normalises each row; a zero row is an error.
Tensor<double> normalize_rows(const Tensor<double>& rows);

/// Rows of `raw` in vocabulary order; throws missing_label or dimension_mismatch.
Tensor<double> assemble(const RawEmbeddings& raw, const LabelVocabulary& vocab, std::size_t expected_dim);

}  // namespace ctxseg
