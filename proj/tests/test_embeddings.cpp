#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctxseg/embeddings.hpp"
#include "ctxseg/error.hpp"
#include "stub_server.hpp"

using namespace ctxseg;
using ctxseg::testing::StubServer;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::state;
}

double row_norm(const Tensor<double>& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t j = 0; j < t.dim(1); ++j) s += t.at(r, j) * t.at(r, j);
  return std::sqrt(s);
}

const LabelVocabulary kFixtureVocab({"alpha", "beta", "gamma"});

std::string fixture(const std::string& name) { return std::string(CTXSEG_FIXTURE_DIR) + "/" + name; }

void reply_json(httplib::Response& res, const nlohmann::json& j) { res.set_content(j.dump(), "application/json"); }

}  // namespace

TEST_CASE("vocabulary: ids, mask ids and validation") {
  const LabelVocabulary v({"medic", "pedestrian", "hospital"});
  CHECK(v.size() == 3);
  CHECK(v.id_of("pedestrian") == 1);
  CHECK(v.mask_id(1) == 2);
  CHECK(code_of([&] { v.id_of("dog"); }) == ErrorCode::unknown_label);
  CHECK(code_of([] { LabelVocabulary({"a", "b", "a"}); }) == ErrorCode::duplicate_label);
  CHECK(code_of([] { LabelVocabulary(std::vector<std::string>{}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("similarity pairs: symmetric, no self-pairs, unknown labels rejected") {
  const LabelVocabulary v({"a", "b", "c"});
  const auto p = SimilarityPairs::from_labels(v, {{"c", "a"}, {"a", "c"}});
  CHECK(p.positives().size() == 1);
  CHECK(p.is_positive(0, 2));
  CHECK(p.is_positive(2, 0));
  CHECK_FALSE(p.is_positive(0, 1));
  CHECK(code_of([&] { SimilarityPairs::from_labels(v, {{"a", "a"}}); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { SimilarityPairs::from_labels(v, {{"a", "z"}}); }) == ErrorCode::unknown_label);
}

TEST_CASE("hashed provider: deterministic, unit norm, per-label locality") {
  const LabelVocabulary v({"medic", "pedestrian", "hospital", "street"});
  EmbeddingConfig cfg;
  cfg.seed = 7;
  const auto a = embed_labels(v, cfg);
  const auto b = embed_labels(v, cfg);
  CHECK(a.vectors == b.vectors);
  CHECK(a.provenance == EmbeddingProvenance::hashed);
  CHECK(a.vectors.shape() == Shape{4, 32});
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(row_norm(a.vectors, i) - 1.0) <= 1e-6);

  const LabelVocabulary w({"medic", "nurse", "hospital", "street"});
  const auto c = embed_labels(w, cfg);
  for (std::size_t i : {0u, 2u, 3u})
    for (std::size_t j = 0; j < 32; ++j) CHECK(c.vectors.at(i, j) == a.vectors.at(i, j));
  bool changed = false;
  for (std::size_t j = 0; j < 32; ++j) changed = changed || c.vectors.at(1, j) != a.vectors.at(1, j);
  CHECK(changed);

  cfg.seed = 8;
  CHECK_FALSE(embed_labels(v, cfg).vectors == a.vectors);
}

TEST_CASE("normalisation is idempotent") {
  const Tensor<double> raw = Tensor<double>::matrix({{3, 4}, {-1, 2}, {1e-3, 5e-4}});
  const auto once = normalize_rows(raw);
  const auto twice = normalize_rows(once);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(once[i] - twice[i]) <= 1e-15);
  CHECK(code_of([] { normalize_rows(Tensor<double>(Shape{1, 3})); }) == ErrorCode::non_finite);
}

TEST_CASE("file provider: fixture vectors, normalised") {
  const auto raw = load_embedding_file(fixture("embeddings3.tsv"));
  CHECK(raw.size() == 3);
  CHECK(raw.at("alpha") == std::vector<double>{3, 4, 0});
  CHECK(raw.at("gamma") == std::vector<double>{1, -1, 1});

  EmbeddingConfig cfg;
  cfg.provider = "file";
  cfg.path = fixture("embeddings3.tsv");
  cfg.dim = 3;
  const auto set = embed_labels(kFixtureVocab, cfg);
  CHECK(set.provenance == EmbeddingProvenance::file);
  const double r3 = 1.0 / std::sqrt(3.0);
  const double expected[3][3] = {{0.6, 0.8, 0.0}, {0.0, 0.0, 1.0}, {r3, -r3, r3}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(set.vectors.at(i, j) - expected[i][j]) <= 1e-15);

  cfg.dim = 4;
  CHECK(code_of([&] { embed_labels(kFixtureVocab, cfg); }) == ErrorCode::dimension_mismatch);
  cfg.dim = 3;
  CHECK(code_of([&] { embed_labels(LabelVocabulary({"alpha", "delta"}), cfg); }) == ErrorCode::missing_label);
}

TEST_CASE("embedding file parser: malformed input") {
  CHECK(code_of([] { parse_embedding_text(""); }) == ErrorCode::parse);
  CHECK(code_of([] { parse_embedding_text("a\t1,2\nb\t1,2,3\n"); }) == ErrorCode::dimension_mismatch);
  CHECK(code_of([] { parse_embedding_text("a\t1,2\na\t3,4\n"); }) == ErrorCode::duplicate_label);
  CHECK(code_of([] { parse_embedding_text("a 1,2\n"); }) == ErrorCode::parse);
  CHECK(code_of([] { parse_embedding_text("a\t1,x\n"); }) == ErrorCode::parse);
  CHECK(code_of([] { parse_embedding_text("a\t1,,2\n"); }) == ErrorCode::parse);
  CHECK(code_of([] { load_embedding_file("/nonexistent/embeddings.tsv"); }) == ErrorCode::io);
  CHECK(parse_embedding_text("a\t1.5,-2e-1\r\n").at("a") == std::vector<double>{1.5, -0.2});
}

TEST_CASE("remote provider: stub server success") {
  std::string seen_body;
  StubServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen_body = req.body;
    reply_json(res, {{"dim", 3}, {"vectors", {{"alpha", {3, 4, 0}}, {"beta", {0, 0, 2}}, {"gamma", {1, -1, 1}}}}});
  });
  EmbeddingConfig cfg;
  cfg.provider = "remote";
  cfg.endpoint = server.endpoint();
  cfg.dim = 3;
  const auto set = embed_labels(kFixtureVocab, cfg);
  CHECK(set.provenance == EmbeddingProvenance::remote);
  CHECK(std::abs(set.vectors.at(0, 1) - 0.8) <= 1e-15);
  CHECK(nlohmann::json::parse(seen_body) == nlohmann::json({{"labels", {"alpha", "beta", "gamma"}}}));
}

TEST_CASE("remote provider: failure matrix") {
  SUBCASE("5xx is a transport error") {
    StubServer server([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    CHECK(code_of([&] { fetch_remote_embeddings(server.endpoint(), kFixtureVocab, 2.0); }) == ErrorCode::transport);
  }
  SUBCASE("missing label") {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
      reply_json(res, {{"dim", 2}, {"vectors", {{"alpha", {1, 0}}, {"beta", {0, 1}}}}});
    });
    CHECK(code_of([&] { fetch_remote_embeddings(server.endpoint(), kFixtureVocab, 2.0); }) ==
          ErrorCode::missing_label);
  }
  SUBCASE("malformed body") {
    StubServer server([](const httplib::Request&, httplib::Response& res) { res.set_content("{not json", "text/plain"); });
    CHECK(code_of([&] { fetch_remote_embeddings(server.endpoint(), kFixtureVocab, 2.0); }) ==
          ErrorCode::malformed_response);
  }
  SUBCASE("schema violation") {
    StubServer server([](const httplib::Request&, httplib::Response& res) { reply_json(res, {{"vectors", {}}}); });
    CHECK(code_of([&] { fetch_remote_embeddings(server.endpoint(), kFixtureVocab, 2.0); }) ==
          ErrorCode::malformed_response);
  }
  SUBCASE("declared dimension disagrees with vectors") {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
      reply_json(res, {{"dim", 3}, {"vectors", {{"alpha", {1, 0}}, {"beta", {0, 1}}, {"gamma", {1, 1}}}}});
    });
    CHECK(code_of([&] { fetch_remote_embeddings(server.endpoint(), kFixtureVocab, 2.0); }) ==
          ErrorCode::dimension_mismatch);
  }
  SUBCASE("slow server times out") {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
      std::this_thread::sleep_for(std::chrono::milliseconds(1500));
      res.set_content("{}", "application/json");
    });
    CHECK(code_of([&] { fetch_remote_embeddings(server.endpoint(), kFixtureVocab, 0.3); }) == ErrorCode::timeout);
  }
  SUBCASE("nothing listening") {
    // Port 1 is privileged and unused in the sandbox: the connect is refused.
    CHECK(code_of([&] {
            fetch_remote_embeddings("http://127.0.0.1:1", kFixtureVocab, 1.0);
          }) == ErrorCode::transport);
  }
}

TEST_CASE("provider selection errors") {
  EmbeddingConfig cfg;
  cfg.provider = "gpt";
  CHECK(code_of([&] { embed_labels(kFixtureVocab, cfg); }) == ErrorCode::config);
}
