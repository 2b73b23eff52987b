#include "ctxseg/embeddings.hpp"

#include <algorithm>
#include <chrono>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg {
namespace {

std::vector<double> parse_vector(const std::string& text, std::size_t line_no) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (item.empty() || used != item.size() || !std::isfinite(v)) {
      fail(ErrorCode::parse, "embedding file line " + std::to_string(line_no) + ": bad value '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) fail(ErrorCode::parse, "embedding file line " + std::to_string(line_no) + ": no values");
  return out;
}

}  // namespace

LabelVocabulary::LabelVocabulary(std::vector<std::string> labels) : labels_(std::move(labels)) {
  if (labels_.empty()) fail(ErrorCode::invalid_argument, "label vocabulary is empty");
  if (labels_.size() > 254) fail(ErrorCode::invalid_argument, "label vocabulary exceeds 254 labels");
  std::set<std::string> seen;
  for (const auto& l : labels_) {
    if (l.empty()) fail(ErrorCode::invalid_argument, "empty label in vocabulary");
    if (!seen.insert(l).second) fail(ErrorCode::duplicate_label, "duplicate label '" + l + "'");
  }
}

std::size_t LabelVocabulary::id_of(const std::string& label) const {
  const auto it = std::find(labels_.begin(), labels_.end(), label);
  if (it == labels_.end()) fail(ErrorCode::unknown_label, "unknown label '" + label + "'");
  return static_cast<std::size_t>(it - labels_.begin());
}

bool LabelVocabulary::contains(const std::string& label) const {
  return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

SimilarityPairs SimilarityPairs::from_labels(const LabelVocabulary& vocab,
                                             const std::vector<std::pair<std::string, std::string>>& pairs) {
  SimilarityPairs out;
  for (const auto& [a, b] : pairs) {
    const std::size_t i = vocab.id_of(a), j = vocab.id_of(b);
    if (i == j) fail(ErrorCode::invalid_argument, "self-pair '" + a + "'");
    out.positives_.emplace_back(std::min(i, j), std::max(i, j));
  }
  std::sort(out.positives_.begin(), out.positives_.end());
  out.positives_.erase(std::unique(out.positives_.begin(), out.positives_.end()), out.positives_.end());
  return out;
}

bool SimilarityPairs::is_positive(std::size_t a, std::size_t b) const {
  return std::binary_search(positives_.begin(), positives_.end(), std::pair{std::min(a, b), std::max(a, b)});
}

std::string to_string(EmbeddingProvenance p) {
  switch (p) {
    case EmbeddingProvenance::file: return "file";
    case EmbeddingProvenance::hashed: return "hashed";
    case EmbeddingProvenance::remote: return "remote";
  }
  return "unknown";
}

std::vector<double> hashed_embedding(const std::string& label, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) fail(ErrorCode::invalid_argument, "embedding dimension must be positive");
  Rng rng(seed, fnv1a64(label.data(), label.size()));
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  Tensor<double> row(Shape{1, dim}, v);
  row = normalize_rows(row);
  return {row.data().begin(), row.data().end()};
}

Tensor<double> normalize_rows(const Tensor<double>& rows) {
  if (rows.rank() != 2) fail(ErrorCode::shape_mismatch, "normalize_rows expects a matrix");
  Tensor<double> out = rows;
  for (std::size_t i = 0; i < rows.dim(0); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < rows.dim(1); ++j) sq += rows.at(i, j) * rows.at(i, j);
    if (!(sq > 0.0) || !std::isfinite(sq)) fail(ErrorCode::non_finite, "cannot normalise a zero or non-finite embedding");
    const double n = std::sqrt(sq);
    for (std::size_t j = 0; j < rows.dim(1); ++j) out.at(i, j) = rows.at(i, j) / n;
  }
  return out;
}

RawEmbeddings parse_embedding_text(const std::string& text) {
  RawEmbeddings out;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0, dim = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      fail(ErrorCode::parse, "embedding file line " + std::to_string(line_no) + ": expected label<TAB>values");
    }
    const std::string label = line.substr(0, tab);
    auto vec = parse_vector(line.substr(tab + 1), line_no);
    if (dim == 0) dim = vec.size();
    if (vec.size() != dim) {
      fail(ErrorCode::dimension_mismatch, "embedding file line " + std::to_string(line_no) + ": dimension " +
                                              std::to_string(vec.size()) + " != " + std::to_string(dim));
    }
    if (!out.emplace(label, std::move(vec)).second) fail(ErrorCode::duplicate_label, "duplicate label '" + label + "'");
  }
  if (out.empty()) fail(ErrorCode::parse, "embedding file has no records");
  return out;
}

RawEmbeddings load_embedding_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open embedding file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_embedding_text(buf.str());
}

RawEmbeddings fetch_remote_embeddings(const std::string& endpoint, const LabelVocabulary& vocab,
                                      double timeout_seconds) {
  if (!(timeout_seconds > 0.0)) fail(ErrorCode::invalid_argument, "remote timeout must be positive");
  httplib::Client client(endpoint);
  if (!client.is_valid()) fail(ErrorCode::transport, "invalid endpoint '" + endpoint + "'");
  const auto timeout = std::chrono::duration<double>(timeout_seconds);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(timeout);
  client.set_connection_timeout(micros);
  client.set_read_timeout(micros);
  client.set_write_timeout(micros);

  const nlohmann::json request = {{"labels", vocab.labels()}};
  const auto start = std::chrono::steady_clock::now();
  const auto res = client.Post("/embed", request.dump(), "application/json");
  if (!res) {
    const auto elapsed = std::chrono::steady_clock::now() - start;
    const auto err = res.error();
    // A read that stalls until the deadline surfaces as a read error.
    if (err == httplib::Error::ConnectionTimeout ||
        (err == httplib::Error::Read && elapsed >= timeout * 0.9)) {
      fail(ErrorCode::timeout, "remote embedding request timed out after " + std::to_string(timeout_seconds) + "s");
    }
    fail(ErrorCode::transport, "remote embedding request failed: " + httplib::to_string(err));
  }
  if (res->status != 200) fail(ErrorCode::transport, "remote embedding service returned HTTP " + std::to_string(res->status));

  nlohmann::json body;
  try {
    body = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_response, std::string("remote response is not JSON: ") + e.what());
  }
  if (!body.is_object() || !body.contains("dim") || !body["dim"].is_number_unsigned() || !body.contains("vectors") ||
      !body["vectors"].is_object()) {
    fail(ErrorCode::malformed_response, "remote response lacks dim/vectors");
  }
  const auto dim = body["dim"].get<std::size_t>();
  if (dim == 0) fail(ErrorCode::malformed_response, "remote response has dim 0");
  RawEmbeddings out;
  for (const auto& [label, vec] : body["vectors"].items()) {
    if (!vec.is_array()) fail(ErrorCode::malformed_response, "vector for '" + label + "' is not an array");
    std::vector<double> v;
    for (const auto& x : vec) {
      if (!x.is_number()) fail(ErrorCode::malformed_response, "non-numeric value for '" + label + "'");
      v.push_back(x.get<double>());
      if (!std::isfinite(v.back())) fail(ErrorCode::malformed_response, "non-finite value for '" + label + "'");
    }
    if (v.size() != dim) fail(ErrorCode::dimension_mismatch, "vector for '" + label + "' has wrong dimension");
    out.emplace(label, std::move(v));
  }
  for (const auto& l : vocab.labels()) {
    if (!out.count(l)) fail(ErrorCode::missing_label, "remote response omits label '" + l + "'");
  }
  return out;
}

Tensor<double> assemble(const RawEmbeddings& raw, const LabelVocabulary& vocab, std::size_t expected_dim) {
  Tensor<double> rows(Shape{vocab.size(), expected_dim});
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto it = raw.find(vocab.label(i));
    if (it == raw.end()) fail(ErrorCode::missing_label, "no embedding for label '" + vocab.label(i) + "'");
    if (it->second.size() != expected_dim) {
      fail(ErrorCode::dimension_mismatch, "embedding for '" + vocab.label(i) + "' has dimension " +
                                              std::to_string(it->second.size()) + ", expected " +
                                              std::to_string(expected_dim));
    }
    for (std::size_t j = 0; j < expected_dim; ++j) rows.at(i, j) = it->second[j];
  }
  return rows;
}

LabelEmbeddingSet embed_labels(const LabelVocabulary& vocab, const EmbeddingConfig& config) {
  LabelEmbeddingSet out;
  out.dim = config.dim;
  if (config.provider == "hashed") {
    RawEmbeddings raw;
    for (const auto& l : vocab.labels()) raw.emplace(l, hashed_embedding(l, config.dim, config.seed));
    out.vectors = assemble(raw, vocab, config.dim);
    out.provenance = EmbeddingProvenance::hashed;
  } else if (config.provider == "file") {
    out.vectors = normalize_rows(assemble(load_embedding_file(config.path), vocab, config.dim));
    out.provenance = EmbeddingProvenance::file;
  } else if (config.provider == "remote") {
    out.vectors = normalize_rows(
        assemble(fetch_remote_embeddings(config.endpoint, vocab, config.timeout_seconds), vocab, config.dim));
    out.provenance = EmbeddingProvenance::remote;
  } else {
    fail(ErrorCode::config, "unknown embedding provider '" + config.provider + "'");
  }
  return out;
}

}  // namespace ctxseg
