#include <doctest.h>

#include <algorithm>
#include <set>

#include "eyedx/corpus.hpp"
#include "eyedx/preprocess.hpp"
#include "test_util.hpp"

using namespace eyedx;
using testutil::read_file;
using testutil::same_document;
using testutil::scratch_dir;

namespace {

GenConfig small_config(int n_docs, std::uint64_t seed) {
  GenConfig cfg = default_gen_config();
  cfg.n_docs = n_docs;
  cfg.seed = seed;
  return cfg;
}

// Independent re-derivation of labels from the generator's rule table:
// label l is set for an eye iff some sentence normalizes to one of disease
// l's templates and is tagged to that eye (directly or via Both).
void rederive_labels(const GenConfig& cfg, const OemrDocument& doc,
                     std::vector<std::uint8_t>& left,
                     std::vector<std::uint8_t>& right) {
  left.assign(cfg.diseases.size(), 0);
  right.assign(cfg.diseases.size(), 0);
  for (std::size_t l = 0; l < cfg.diseases.size(); ++l) {
    std::set<std::string> norms;
    for (const IndicativeTemplate& t : cfg.diseases[l].templates)
      norms.insert(
          normalize_sentence(render_template(t.text, Laterality::Left)));
    for (const Sentence& s : doc.sentences) {
      if (!norms.count(normalize_sentence(s.tokens))) continue;
      if (s.laterality == Laterality::Left || s.laterality == Laterality::Both)
        left[l] = 1;
      if (s.laterality == Laterality::Right ||
          s.laterality == Laterality::Both)
        right[l] = 1;
    }
  }
}

}  // namespace

TEST_CASE("generate_corpus is byte-identical for identical configs") {
  auto dir = scratch_dir();
  GenConfig cfg = small_config(100, 7);
  generate_corpus(cfg, (dir / "a.jsonl").string());
  generate_corpus(cfg, (dir / "b.jsonl").string());
  CHECK(read_file(dir / "a.jsonl") == read_file(dir / "b.jsonl"));
  CHECK(!read_file(dir / "a.jsonl").empty());
}

TEST_CASE("n_docs = 0 produces a valid empty corpus") {
  auto dir = scratch_dir();
  generate_corpus(small_config(0, 1), (dir / "empty.jsonl").string());
  CHECK(read_file(dir / "empty.jsonl").empty());
  CHECK(load_corpus((dir / "empty.jsonl").string()).empty());
}

TEST_CASE("generated labels match an independent re-derivation") {
  GenConfig cfg = small_config(300, 1);
  REQUIRE(cfg.label_noise == 0.0);
  auto docs = generate_documents(cfg);
  REQUIRE(docs.size() == 300);
  std::vector<std::uint8_t> left, right;
  for (const OemrDocument& doc : docs) {
    rederive_labels(cfg, doc, left, right);
    CHECK(left == doc.labels_left);
    CHECK(right == doc.labels_right);
  }
}

TEST_CASE("label noise flips labels away from the rule table") {
  GenConfig cfg = small_config(200, 3);
  cfg.label_noise = 0.3;
  auto docs = generate_documents(cfg);
  int mismatches = 0;
  std::vector<std::uint8_t> left, right;
  for (const OemrDocument& doc : docs) {
    rederive_labels(cfg, doc, left, right);
    if (left != doc.labels_left || right != doc.labels_right) ++mismatches;
  }
  CHECK(mismatches > 0);
}

TEST_CASE("save then load is lossless") {
  auto dir = scratch_dir();
  for (std::uint64_t seed : {1ULL, 9ULL}) {
    GenConfig cfg = small_config(40, seed);
    auto docs = generate_documents(cfg);
    const std::string path = (dir / ("c" + std::to_string(seed) + ".jsonl")).string();
    save_corpus(docs, path);
    auto loaded = load_corpus(path);
    REQUIRE(loaded.size() == docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i)
      CHECK(same_document(docs[i], loaded[i]));
  }
}

TEST_CASE("load errors carry diagnostics") {
  auto dir = scratch_dir();

  SUBCASE("truncated JSON reports the line number") {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"id":"doc-0","sentences":[{"tokens":["a"],"section":"CC","laterality":"U","template":false}],"labels_left":[1],"labels_right":[0]})"
        << "\n";
    out << R"({"id":"doc-1","sentences":[{"tok)" << "\n";
    out.close();
    try {
      load_corpus((dir / "bad.jsonl").string());
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line == 2);
    }
  }

  SUBCASE("missing labels_right field") {
    std::ofstream out(dir / "schema.jsonl");
    out << R"({"id":"doc-0","sentences":[{"tokens":["a"],"section":"CC","laterality":"U","template":false}],"labels_left":[1]})"
        << "\n";
    out.close();
    CHECK_THROWS_AS(load_corpus((dir / "schema.jsonl").string()), SchemaError);
  }

  SUBCASE("document without sentences") {
    std::ofstream out(dir / "nosent.jsonl");
    out << R"({"id":"doc-0","sentences":[],"labels_left":[1],"labels_right":[0]})"
        << "\n";
    out.close();
    CHECK_THROWS_AS(load_corpus((dir / "nosent.jsonl").string()), SchemaError);
  }

  SUBCASE("unreadable path") {
    CHECK_THROWS_AS(load_corpus((dir / "does-not-exist.jsonl").string()),
                    IoError);
  }
}

TEST_CASE("split_corpus") {
  auto docs = generate_documents(small_config(100, 2));

  SUBCASE("70/15/15 on 100 documents") {
    SplitResult s = split_corpus(docs, 0.7, 0.15, 0.15, 11);
    CHECK(s.train.size() == 70);
    CHECK(s.val.size() == 15);
    CHECK(s.test.size() == 15);
  }

  SUBCASE("same seed gives identical partitions") {
    SplitResult a = split_corpus(docs, 0.7, 0.15, 0.15, 5);
    SplitResult b = split_corpus(docs, 0.7, 0.15, 0.15, 5);
    for (std::size_t i = 0; i < a.train.size(); ++i)
      CHECK(a.train[i].id == b.train[i].id);
    for (std::size_t i = 0; i < a.test.size(); ++i)
      CHECK(a.test[i].id == b.test[i].id);
  }

  SUBCASE("bad ratios rejected") {
    CHECK_THROWS_AS(split_corpus(docs, 0.5, 0.5, 0.5, 1), ConfigError);
    CHECK_THROWS_AS(split_corpus(docs, -0.1, 0.6, 0.5, 1), ConfigError);
  }

  SUBCASE("partition property over ratios and seeds") {
    const double ratios[][3] = {
        {0.7, 0.15, 0.15}, {0.6, 0.2, 0.2}, {1.0, 0.0, 0.0}, {0.33, 0.33, 0.34}};
    for (const auto& r : ratios) {
      for (std::uint64_t seed : {0ULL, 1ULL, 42ULL}) {
        SplitResult s = split_corpus(docs, r[0], r[1], r[2], seed);
        CHECK(s.train.size() + s.val.size() + s.test.size() == docs.size());
        std::set<std::string> ids;
        for (const auto& d : s.train) ids.insert(d.id);
        for (const auto& d : s.val) ids.insert(d.id);
        for (const auto& d : s.test) ids.insert(d.id);
        CHECK(ids.size() == docs.size());  // disjoint and covering
      }
    }
  }
}

TEST_CASE("vocabulary construction") {
  SUBCASE("two content tokens plus reserved and type ids") {
    OemrDocument doc;
    doc.id = "d0";
    doc.sentences = {testutil::sent("b a", Section::CC),
                     testutil::sent("a", Section::ER)};
    doc.labels_left = {1};
    doc.labels_right = {0};
    Vocabulary v = build_vocabulary({doc});
    CHECK(v.size() == 2 + 3 + 3);
    CHECK(v.encode("a") == Vocabulary::kFirstContentId);
    CHECK(v.encode("b") == Vocabulary::kFirstContentId + 1);
    CHECK(v.encode("zzz") == Vocabulary::kUnk);
    CHECK(v.type_token_id(Section::CC) == 3);
    CHECK(v.type_token_id(Section::HPI) == 4);
    CHECK(v.type_token_id(Section::ER) == 5);
  }

  SUBCASE("deterministic across builds") {
    auto docs = generate_documents(small_config(30, 4));
    Vocabulary a = build_vocabulary(docs);
    Vocabulary b = build_vocabulary(docs);
    CHECK(a.id_to_token() == b.id_to_token());
  }

  SUBCASE("empty corpus rejected") {
    CHECK_THROWS_AS(build_vocabulary({}), EmptyInputError);
  }
}

TEST_CASE("generator config validation") {
  GenConfig cfg = small_config(10, 1);
  cfg.diseases[0].templates.clear();
  CHECK_THROWS_AS(generate_documents(cfg), ConfigError);

  GenConfig cfg2 = small_config(10, 1);
  cfg2.template_pool[0].target_frequency = 0.0;
  CHECK_THROWS_AS(generate_documents(cfg2), ConfigError);

  GenConfig cfg3 = small_config(10, 1);
  cfg3.label_noise = 1.0;
  CHECK_THROWS_AS(generate_documents(cfg3), ConfigError);
}
