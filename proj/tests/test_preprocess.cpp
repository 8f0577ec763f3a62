#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "eyedx/preprocess.hpp"
#include "test_util.hpp"

using namespace eyedx;
using testutil::same_sentence;
using testutil::sent;

namespace {

OemrDocument doc_of(std::string id, std::vector<Sentence> sentences) {
  OemrDocument d;
  d.id = std::move(id);
  d.sentences = std::move(sentences);
  d.labels_left = {0};
  d.labels_right = {0};
  return d;
}

// Brute-force re-count and re-application of the filtering rule, written
// independently of FreqTable/filter_asymptomatic.
std::vector<Sentence> oracle_filter(const std::vector<OemrDocument>& corpus,
                                    const OemrDocument& doc, double threshold) {
  auto norm = [](const std::vector<std::string>& tokens) {
    std::string joined;
    for (const std::string& t : tokens) {
      if (!joined.empty()) joined += ' ';
      for (char c : t)
        joined += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    for (const char* marker : {"left eye", "right eye", "both eyes"}) {
      std::string m = marker;
      for (std::size_t p = joined.find(m); p != std::string::npos;
           p = joined.find(m))
        joined.replace(p, m.size(), "<eye>");
    }
    return joined;
  };
  std::map<std::string, int> counts;
  for (const OemrDocument& d : corpus) {
    std::set<std::string> seen;
    for (const Sentence& s : d.sentences) seen.insert(norm(s.tokens));
    for (const std::string& n : seen) ++counts[n];
  }
  std::vector<Sentence> kept;
  for (const Sentence& s : doc.sentences) {
    const double f =
        static_cast<double>(counts[norm(s.tokens)]) / corpus.size();
    if (s.is_asymptomatic_template && f > threshold) continue;
    kept.push_back(s);
  }
  return kept;
}

}  // namespace

TEST_CASE("sentence frequencies") {
  SUBCASE("present in 2 of 10 documents -> 0.2") {
    std::vector<OemrDocument> corpus;
    for (int i = 0; i < 10; ++i) {
      std::vector<Sentence> ss = {sent("filler number " + std::to_string(i))};
      if (i < 2) ss.push_back(sent("no edema seen"));
      corpus.push_back(doc_of("d" + std::to_string(i), ss));
    }
    FreqTable t = compute_sentence_frequencies(corpus);
    CHECK(t.lookup("no edema seen") == doctest::Approx(0.2));
    CHECK(t.corpus_size == 10);
  }

  SUBCASE("duplicate inside one document counts once") {
    std::vector<OemrDocument> corpus = {
        doc_of("d0", {sent("no edema seen"), sent("no edema seen")}),
        doc_of("d1", {sent("something else")}),
    };
    FreqTable t = compute_sentence_frequencies(corpus);
    CHECK(t.lookup("no edema seen") == doctest::Approx(0.5));
  }

  SUBCASE("mirrored laterality templates pool into one entry") {
    std::vector<OemrDocument> corpus = {
        doc_of("d0", {sent("no edema in left eye")}),
        doc_of("d1", {sent("no edema in right eye")}),
        doc_of("d2", {sent("unrelated sentence")}),
        doc_of("d3", {sent("No Edema in BOTH EYES")}),
    };
    FreqTable t = compute_sentence_frequencies(corpus);
    CHECK(t.lookup("no edema in <eye>") == doctest::Approx(0.75));
    CHECK(t.lookup("no edema in left eye") == 0.0);
  }

  SUBCASE("empty corpus rejected") {
    CHECK_THROWS_AS(compute_sentence_frequencies({}), EmptyInputError);
  }

  SUBCASE("every stored frequency is in (0,1]") {
    GenConfig cfg = default_gen_config();
    cfg.n_docs = 60;
    cfg.seed = 5;
    FreqTable t = compute_sentence_frequencies(generate_documents(cfg));
    for (const auto& [k, f] : t.freq) {
      CHECK(f > 0.0);
      CHECK(f <= 1.0);
    }
  }
}

TEST_CASE("filter_asymptomatic") {
  // table: template X at 0.2, template Y at 0.05, symptomatic Z at 0.9
  std::vector<OemrDocument> corpus;
  for (int i = 0; i < 20; ++i) {
    std::vector<Sentence> ss;
    if (i < 4) ss.push_back(sent("template x finding", Section::ER,
                                 Laterality::Unspecified, true));
    if (i < 1) ss.push_back(sent("template y finding", Section::ER,
                                 Laterality::Unspecified, true));
    if (i < 18) ss.push_back(sent("symptom z present", Section::CC));
    ss.push_back(sent("pad " + std::to_string(i)));
    corpus.push_back(doc_of("d" + std::to_string(i), ss));
  }
  FreqTable table = compute_sentence_frequencies(corpus);
  REQUIRE(table.lookup("template x finding") == doctest::Approx(0.2));
  REQUIRE(table.lookup("template y finding") == doctest::Approx(0.05));
  REQUIRE(table.lookup("symptom z present") == doctest::Approx(0.9));
  PreprocessConfig cfg;
  cfg.threshold_b = 0.1;

  OemrDocument doc = doc_of(
      "q", {sent("template x finding", Section::ER, Laterality::Unspecified,
                 true),
            sent("template y finding", Section::ER, Laterality::Unspecified,
                 true),
            sent("symptom z present", Section::CC)});

  SUBCASE("frequency above B removes templates, below keeps them") {
    OemrDocument out = filter_asymptomatic(doc, table, cfg);
    REQUIRE(out.sentences.size() == 2);
    CHECK(normalize_sentence(out.sentences[0].tokens) == "template y finding");
    CHECK(normalize_sentence(out.sentences[1].tokens) == "symptom z present");
  }

  SUBCASE("frequent symptomatic sentences are never filtered") {
    OemrDocument out = filter_asymptomatic(doc, table, cfg);
    bool has_z = false;
    for (const Sentence& s : out.sentences)
      has_z |= normalize_sentence(s.tokens) == "symptom z present";
    CHECK(has_z);
  }

  SUBCASE("lexicon matching substitutes for flags") {
    OemrDocument unflagged = doc_of(
        "u", {sent("template x finding", Section::ER)});  // no flag
    PreprocessConfig lex_cfg;
    lex_cfg.threshold_b = 0.1;
    OemrDocument kept = filter_asymptomatic(unflagged, table, lex_cfg);
    CHECK(kept.sentences.size() == 1);
    lex_cfg.template_lexicon.insert("template x finding");
    OemrDocument removed = filter_asymptomatic(unflagged, table, lex_cfg);
    REQUIRE(removed.sentences.size() == 1);
    CHECK(is_empty_sentinel(removed.sentences[0]));
  }

  SUBCASE("sentinel appears when nothing survives") {
    OemrDocument only_template = doc_of(
        "t", {sent("template x finding", Section::ER, Laterality::Unspecified,
                   true)});
    OemrDocument out = filter_asymptomatic(only_template, table, cfg);
    REQUIRE(out.sentences.size() == 1);
    CHECK(is_empty_sentinel(out.sentences[0]));
  }

  SUBCASE("threshold out of range") {
    PreprocessConfig bad;
    bad.threshold_b = 1.5;
    CHECK_THROWS_AS(filter_asymptomatic(doc, table, bad), ConfigError);
  }
}

TEST_CASE("split_by_eye") {
  OemrDocument doc = doc_of(
      "s", {sent("right only finding", Section::ER, Laterality::Right),
            sent("both eyes finding", Section::ER, Laterality::Both),
            sent("free text", Section::HPI, Laterality::Unspecified),
            sent("left only finding", Section::CC, Laterality::Left)});
  doc.labels_left = {1, 0};
  doc.labels_right = {0, 1};
  auto [left, right] = split_by_eye(doc);

  CHECK(left.eye == Eye::Left);
  CHECK(right.eye == Eye::Right);
  CHECK(left.source_id == "s");
  CHECK(left.labels == std::vector<std::uint8_t>{1, 0});
  CHECK(right.labels == std::vector<std::uint8_t>{0, 1});

  REQUIRE(left.sentences.size() == 3);   // both, unspecified, left
  REQUIRE(right.sentences.size() == 3);  // right, both, unspecified
  CHECK(right.sentences[0].laterality == Laterality::Right);
  CHECK(left.sentences[0].laterality == Laterality::Both);
  // original order preserved
  CHECK(left.sentences[2].laterality == Laterality::Left);
  CHECK(right.sentences[2].laterality == Laterality::Unspecified);

  SUBCASE("one-sided documents get the sentinel on the other side") {
    OemrDocument lonly = doc_of(
        "l", {sent("left only", Section::ER, Laterality::Left)});
    auto [l2, r2] = split_by_eye(lonly);
    CHECK(l2.sentences.size() == 1);
    REQUIRE(r2.sentences.size() == 1);
    CHECK(is_empty_sentinel(r2.sentences[0]));
  }
}

TEST_CASE("preprocess_corpus") {
  GenConfig gcfg = default_gen_config();
  gcfg.n_docs = 100;
  gcfg.seed = 8;
  auto corpus = generate_documents(gcfg);
  FreqTable table = compute_sentence_frequencies(corpus);
  PreprocessConfig cfg;
  cfg.threshold_b = 0.1;

  SUBCASE("emits two monocular documents per input") {
    auto mono = preprocess_corpus(corpus, table, cfg);
    CHECK(mono.size() == 200);
    for (std::size_t i = 0; i < mono.size(); i += 2) {
      CHECK(mono[i].eye == Eye::Left);
      CHECK(mono[i + 1].eye == Eye::Right);
      CHECK(mono[i].source_id == mono[i + 1].source_id);
      CHECK(!mono[i].sentences.empty());
    }
  }

  SUBCASE("B=0 removes every template that occurs in the table") {
    PreprocessConfig zero;
    zero.threshold_b = 0.0;
    auto mono = preprocess_corpus(corpus, table, zero);
    for (const MonocularDocument& m : mono)
      for (const Sentence& s : m.sentences)
        CHECK(!s.is_asymptomatic_template);
  }

  SUBCASE("equals composing filter and split document-wise") {
    auto mono = preprocess_corpus(corpus, table, cfg);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      auto [l, r] = split_by_eye(filter_asymptomatic(corpus[i], table, cfg));
      REQUIRE(mono[2 * i].sentences.size() == l.sentences.size());
      REQUIRE(mono[2 * i + 1].sentences.size() == r.sentences.size());
      for (std::size_t k = 0; k < l.sentences.size(); ++k)
        CHECK(same_sentence(mono[2 * i].sentences[k], l.sentences[k]));
    }
  }

  SUBCASE("deterministic and idempotent given the same table") {
    auto a = preprocess_corpus(corpus, table, cfg);
    auto b = preprocess_corpus(corpus, table, cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].sentences.size() == b[i].sentences.size());
      for (std::size_t k = 0; k < a[i].sentences.size(); ++k)
        CHECK(same_sentence(a[i].sentences[k], b[i].sentences[k]));
    }
  }

  SUBCASE("filtering is monotone in B") {
    const double thresholds[] = {0.0, 0.05, 0.1, 0.2, 0.3, 1.0};
    for (std::size_t bi = 0; bi + 1 < std::size(thresholds); ++bi) {
      PreprocessConfig lo, hi;
      lo.threshold_b = thresholds[bi];
      hi.threshold_b = thresholds[bi + 1];
      for (const OemrDocument& doc : corpus) {
        OemrDocument flo = filter_asymptomatic(doc, table, lo);
        OemrDocument fhi = filter_asymptomatic(doc, table, hi);
        std::multiset<std::string> keep_lo, keep_hi;
        for (const Sentence& s : flo.sentences)
          if (!is_empty_sentinel(s)) keep_lo.insert(normalize_sentence(s.tokens));
        for (const Sentence& s : fhi.sentences)
          if (!is_empty_sentinel(s)) keep_hi.insert(normalize_sentence(s.tokens));
        CHECK(std::includes(keep_hi.begin(), keep_hi.end(), keep_lo.begin(),
                            keep_lo.end()));
      }
    }
  }

  SUBCASE("splitting loses nothing and tokens are untouched") {
    for (const OemrDocument& doc : corpus) {
      auto [l, r] = split_by_eye(doc);
      for (const Sentence& s : doc.sentences) {
        const bool left_has =
            std::any_of(l.sentences.begin(), l.sentences.end(),
                        [&](const Sentence& x) { return same_sentence(x, s); });
        const bool right_has =
            std::any_of(r.sentences.begin(), r.sentences.end(),
                        [&](const Sentence& x) { return same_sentence(x, s); });
        if (s.laterality == Laterality::Left) {
          CHECK(left_has);
          CHECK(!right_has);
        } else if (s.laterality == Laterality::Right) {
          CHECK(right_has);
          CHECK(!left_has);
        } else {
          CHECK(left_has);
          CHECK(right_has);
        }
      }
    }
  }

  SUBCASE("filter output matches the brute-force oracle at the sweep values") {
    for (double b : {0.05, 0.1, 0.2, 0.3}) {
      PreprocessConfig pc;
      pc.threshold_b = b;
      for (const OemrDocument& doc : corpus) {
        std::vector<Sentence> expect = oracle_filter(corpus, doc, b);
        OemrDocument got = filter_asymptomatic(doc, table, pc);
        std::vector<Sentence> got_s = got.sentences;
        if (expect.empty()) {
          REQUIRE(got_s.size() == 1);
          CHECK(is_empty_sentinel(got_s[0]));
          continue;
        }
        REQUIRE(got_s.size() == expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i)
          CHECK(same_sentence(got_s[i], expect[i]));
      }
    }
  }
}

TEST_CASE("monocular jsonl roundtrip") {
  GenConfig gcfg = default_gen_config();
  gcfg.n_docs = 20;
  gcfg.seed = 12;
  auto corpus = generate_documents(gcfg);
  FreqTable table = compute_sentence_frequencies(corpus);
  PreprocessConfig cfg;
  auto mono = preprocess_corpus(corpus, table, cfg);

  auto dir = testutil::scratch_dir();
  const std::string path = (dir / "mono.jsonl").string();
  save_monocular(mono, path);
  auto loaded = load_monocular(path);
  REQUIRE(loaded.size() == mono.size());
  for (std::size_t i = 0; i < mono.size(); ++i) {
    CHECK(loaded[i].eye == mono[i].eye);
    CHECK(loaded[i].labels == mono[i].labels);
    CHECK(loaded[i].source_id == mono[i].source_id);
    REQUIRE(loaded[i].sentences.size() == mono[i].sentences.size());
    for (std::size_t k = 0; k < mono[i].sentences.size(); ++k)
      CHECK(same_sentence(loaded[i].sentences[k], mono[i].sentences[k]));
  }
}
