#include "eyedx/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace eyedx {

using ojson = nlohmann::ordered_json;

std::string to_string(Section s) {
  switch (s) {
    case Section::CC: return "CC";
    case Section::HPI: return "HPI";
    case Section::ER: return "ER";
  }
  return "?";
}

std::string to_string(Laterality l) {
  switch (l) {
    case Laterality::Left: return "L";
    case Laterality::Right: return "R";
    case Laterality::Both: return "B";
    case Laterality::Unspecified: return "U";
  }
  return "?";
}

Section section_from_string(const std::string& s) {
  if (s == "CC") return Section::CC;
  if (s == "HPI") return Section::HPI;
  if (s == "ER") return Section::ER;
  throw SchemaError("unknown section '" + s + "'");
}

Laterality laterality_from_string(const std::string& s) {
  if (s == "L") return Laterality::Left;
  if (s == "R") return Laterality::Right;
  if (s == "B") return Laterality::Both;
  if (s == "U") return Laterality::Unspecified;
  throw SchemaError("unknown laterality '" + s + "'");
}

Sentence empty_sentinel() {
  Sentence s;
  s.tokens = {"<empty>"};
  s.section = Section::CC;
  s.laterality = Laterality::Both;
  s.is_asymptomatic_template = false;
  return s;
}

bool is_empty_sentinel(const Sentence& s) {
  return s.tokens.size() == 1 && s.tokens[0] == "<empty>";
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {
const char* kReservedTokens[] = {"<pad>", "<unk>", "<empty>"};
const char* kTypeTokens[] = {"<cc>", "<hpi>", "<er>"};

bool is_reserved_literal(const std::string& t) {
  for (const char* r : kReservedTokens)
    if (t == r) return true;
  for (const char* r : kTypeTokens)
    if (t == r) return true;
  return false;
}
}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> content_tokens)
    : content_(std::move(content_tokens)) {
  for (std::size_t i = 0; i < content_.size(); ++i)
    token_to_id_[content_[i]] = kFirstContentId + static_cast<int>(i);
}

int Vocabulary::encode(const std::string& token) const {
  if (token == "<pad>") return kPad;
  if (token == "<empty>") return kEmpty;
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

std::vector<std::string> Vocabulary::id_to_token() const {
  std::vector<std::string> out;
  out.reserve(size());
  for (const char* r : kReservedTokens) out.emplace_back(r);
  for (const char* r : kTypeTokens) out.emplace_back(r);
  for (const std::string& t : content_) out.push_back(t);
  return out;
}

Vocabulary build_vocabulary(const std::vector<OemrDocument>& corpus) {
  if (corpus.empty()) throw EmptyInputError("build_vocabulary: empty corpus");
  std::set<std::string> tokens;
  for (const OemrDocument& doc : corpus)
    for (const Sentence& s : doc.sentences)
      for (const std::string& t : s.tokens)
        if (!is_reserved_literal(t)) tokens.insert(t);
  return Vocabulary(std::vector<std::string>(tokens.begin(), tokens.end()));
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

GenConfig default_gen_config() {
  GenConfig cfg;
  cfg.n_docs = 0;
  cfg.seed = 0;
  auto disease = [](std::string name, double prevalence, double both,
                    std::vector<IndicativeTemplate> tpls) {
    DiseaseSpec d;
    d.name = std::move(name);
    d.prevalence = prevalence;
    d.both_given_present = both;
    d.templates = std::move(tpls);
    return d;
  };
  cfg.diseases = {
      disease("cataract", 0.30, 0.30,
              {{"vision blurred and foggy in {eye} for several months",
                Section::CC},
               {"gradual painless decrease of vision in {eye}", Section::HPI},
               {"lens cortex shows grayish white opacity in {eye}",
                Section::ER}}),
      disease("glaucoma", 0.25, 0.25,
              {{"distending pain around {eye} with intermittent headache",
                Section::CC},
               {"intraocular pressure measured above normal range in {eye}",
                Section::ER},
               {"optic disc cupping enlarged in {eye}", Section::ER}}),
      disease("diabetic_retinopathy", 0.25, 0.35,
              {{"long history of diabetes with recent blurred vision in {eye}",
                Section::HPI},
               {"scattered dot and blot hemorrhages on the retina of {eye}",
                Section::ER},
               {"hard exudates and microaneurysms in the macula of {eye}",
                Section::ER}}),
      disease("dry_eye", 0.30, 0.45,
              {{"burning and foreign body sensation in {eye}", Section::CC},
               {"dryness of {eye} worse after prolonged screen use",
                Section::HPI},
               {"tear film break up time shortened in {eye}", Section::ER}}),
      disease("pterygium", 0.20, 0.20,
              {{"fleshy tissue growing over the nasal cornea of {eye}",
                Section::CC},
               {"triangular fibrovascular membrane invading the cornea of "
                "{eye}",
                Section::ER}}),
      disease("mgd", 0.25, 0.40,
              {{"sticky discharge and crusting of the lid margins of {eye}",
                Section::CC},
               {"meibomian gland orifices plugged with turbid secretion in "
                "{eye}",
                Section::ER},
               {"eyelid margin thickened and irregular in {eye}",
                Section::ER}}),
  };
  cfg.template_pool = {
      {"no congestion or edema in the conjunctiva of {eye}", Section::ER, 0.85},
      {"cornea clear and transparent in {eye}", Section::ER, 0.80},
      {"pupil round and reactive to light in {eye}", Section::ER, 0.75},
      {"anterior chamber of normal depth in {eye}", Section::ER, 0.70},
      {"eyelashes arranged neatly without trichiasis in {eye}", Section::ER,
       0.60},
      {"no abnormal secretion in the conjunctival sac of {eye}", Section::ER,
       0.55},
      {"lens in place without obvious opacity in {eye}", Section::ER, 0.50},
      {"ocular position normal with full duction in {eye}", Section::ER, 0.45},
      {"no tenderness over the lacrimal sac region of {eye}", Section::ER,
       0.35},
      {"optic disc boundary clear on fundus examination of {eye}", Section::ER,
       0.30},
      {"vitreous transparent without floaters in {eye}", Section::ER, 0.25},
      {"no visual field defect reported for {eye}", Section::HPI, 0.15},
      {"intraocular lens well positioned in {eye}", Section::ER, 0.08},
  };
  cfg.fillers = {
      {"patient presents for ophthalmic examination", Section::CC, 0.50},
      {"symptoms began about two weeks ago", Section::HPI, 0.35},
      {"no systemic medication history reported", Section::HPI, 0.25},
  };
  return cfg;
}

void validate(const GenConfig& cfg) {
  if (cfg.n_docs < 0) throw ConfigError("gen: n_docs must be >= 0");
  if (cfg.diseases.empty()) throw ConfigError("gen: no diseases configured");
  for (const DiseaseSpec& d : cfg.diseases) {
    if (d.templates.empty())
      throw ConfigError("gen: disease '" + d.name +
                        "' has no indicative template");
    if (d.prevalence < 0.0 || d.prevalence > 1.0)
      throw ConfigError("gen: prevalence out of [0,1] for '" + d.name + "'");
  }
  for (const AsymptomaticTemplate& t : cfg.template_pool)
    if (t.target_frequency <= 0.0 || t.target_frequency > 1.0)
      throw ConfigError("gen: template target frequency must be in (0,1]");
  if (cfg.label_noise < 0.0 || cfg.label_noise >= 1.0)
    throw ConfigError("gen: label_noise must be in [0,1)");
}

std::vector<std::string> render_template(const std::string& text,
                                         Laterality lat) {
  std::string phrase;
  switch (lat) {
    case Laterality::Left: phrase = "left eye"; break;
    case Laterality::Right: phrase = "right eye"; break;
    case Laterality::Both: phrase = "both eyes"; break;
    case Laterality::Unspecified: phrase = ""; break;
  }
  std::string rendered = text;
  const std::string slot = "{eye}";
  for (std::size_t pos = rendered.find(slot); pos != std::string::npos;
       pos = rendered.find(slot, pos))
    rendered.replace(pos, slot.size(), phrase);
  std::vector<std::string> tokens;
  std::istringstream is(rendered);
  std::string tok;
  while (is >> tok) tokens.push_back(tok);
  return tokens;
}

namespace {

int section_rank(Section s) { return static_cast<int>(s); }

Sentence make_sentence(const std::string& text, Section section,
                       Laterality lat, bool is_template) {
  Sentence s;
  s.tokens = render_template(text, lat);
  s.section = section;
  s.laterality = lat;
  s.is_asymptomatic_template = is_template;
  return s;
}

}  // namespace

std::vector<OemrDocument> generate_documents(const GenConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(cfg.seed, 0x67656eULL));
  const int L = static_cast<int>(cfg.diseases.size());
  std::vector<OemrDocument> docs;
  docs.reserve(cfg.n_docs);

  for (int di = 0; di < cfg.n_docs; ++di) {
    OemrDocument doc;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "doc-%06d", di);
    doc.id = idbuf;
    doc.labels_left.assign(L, 0);
    doc.labels_right.assign(L, 0);

    for (int l = 0; l < L; ++l) {
      const DiseaseSpec& d = cfg.diseases[l];
      if (!rng.bernoulli(d.prevalence)) continue;
      bool both = rng.bernoulli(d.both_given_present);
      bool left = both || rng.bernoulli(0.5);
      bool right = both || !left;
      if (left) doc.labels_left[l] = 1;
      if (right) doc.labels_right[l] = 1;

      auto pick = [&](int exclude) {
        int n = static_cast<int>(d.templates.size());
        if (n == 1) return 0;
        int k = static_cast<int>(rng.below(exclude < 0 ? n : n - 1));
        if (exclude >= 0 && k >= exclude) ++k;
        return k;
      };
      auto emit = [&](Laterality lat) {
        int first = pick(-1);
        doc.sentences.push_back(make_sentence(d.templates[first].text,
                                              d.templates[first].section, lat,
                                              false));
        if (d.templates.size() > 1 && rng.bernoulli(cfg.extra_indicative)) {
          int second = pick(first);
          doc.sentences.push_back(make_sentence(d.templates[second].text,
                                                d.templates[second].section,
                                                lat, false));
        }
      };
      if (both) {
        if (rng.bernoulli(0.5)) {
          emit(Laterality::Both);
        } else {
          emit(Laterality::Left);
          emit(Laterality::Right);
        }
      } else {
        emit(left ? Laterality::Left : Laterality::Right);
      }
    }

    for (const AsymptomaticTemplate& t : cfg.template_pool) {
      if (!rng.bernoulli(t.target_frequency)) continue;
      Laterality lat;
      switch (rng.below(3)) {
        case 0: lat = Laterality::Left; break;
        case 1: lat = Laterality::Right; break;
        default: lat = Laterality::Both; break;
      }
      doc.sentences.push_back(make_sentence(t.text, t.section, lat, true));
    }

    for (const FillerTemplate& f : cfg.fillers)
      if (rng.bernoulli(f.frequency))
        doc.sentences.push_back(
            make_sentence(f.text, f.section, Laterality::Unspecified, false));

    if (doc.sentences.empty())
      doc.sentences.push_back(
          make_sentence("routine eye examination with no specific complaint",
                        Section::CC, Laterality::Unspecified, false));

    // shuffle, then group by section so records read CC -> HPI -> ER
    for (std::size_t i = doc.sentences.size(); i > 1; --i)
      std::swap(doc.sentences[i - 1], doc.sentences[rng.below(i)]);
    std::stable_sort(doc.sentences.begin(), doc.sentences.end(),
                     [](const Sentence& a, const Sentence& b) {
                       return section_rank(a.section) < section_rank(b.section);
                     });

    if (cfg.label_noise > 0.0) {
      for (int l = 0; l < L; ++l) {
        if (rng.bernoulli(cfg.label_noise)) doc.labels_left[l] ^= 1;
        if (rng.bernoulli(cfg.label_noise)) doc.labels_right[l] ^= 1;
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// JSONL I/O
// ---------------------------------------------------------------------------

namespace {

ojson sentence_to_json(const Sentence& s) {
  ojson j;
  j["tokens"] = s.tokens;
  j["section"] = to_string(s.section);
  j["laterality"] = to_string(s.laterality);
  j["template"] = s.is_asymptomatic_template;
  return j;
}

Sentence sentence_from_json(const ojson& j) {
  Sentence s;
  if (!j.contains("tokens") || !j["tokens"].is_array())
    throw SchemaError("sentence missing 'tokens'");
  for (const auto& t : j["tokens"]) {
    if (!t.is_string()) throw SchemaError("sentence token must be a string");
    s.tokens.push_back(t.get<std::string>());
  }
  if (s.tokens.empty()) throw SchemaError("sentence has no tokens");
  if (!j.contains("section") || !j["section"].is_string())
    throw SchemaError("sentence missing 'section'");
  s.section = section_from_string(j["section"].get<std::string>());
  if (!j.contains("laterality") || !j["laterality"].is_string())
    throw SchemaError("sentence missing 'laterality'");
  s.laterality = laterality_from_string(j["laterality"].get<std::string>());
  if (!j.contains("template") || !j["template"].is_boolean())
    throw SchemaError("sentence missing 'template'");
  s.is_asymptomatic_template = j["template"].get<bool>();
  return s;
}

std::vector<std::uint8_t> labels_from_json(const ojson& j, const char* field) {
  if (!j.contains(field) || !j[field].is_array())
    throw SchemaError(std::string("document missing '") + field + "'");
  std::vector<std::uint8_t> out;
  for (const auto& v : j[field]) {
    if (!v.is_number_integer())
      throw SchemaError(std::string(field) + " entries must be 0/1");
    int b = v.get<int>();
    if (b != 0 && b != 1)
      throw SchemaError(std::string(field) + " entries must be 0/1");
    out.push_back(static_cast<std::uint8_t>(b));
  }
  if (out.empty()) throw SchemaError(std::string(field) + " is empty");
  return out;
}

}  // namespace

void save_corpus(const std::vector<OemrDocument>& docs,
                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const OemrDocument& doc : docs) {
    ojson j;
    j["id"] = doc.id;
    ojson sents = ojson::array();
    for (const Sentence& s : doc.sentences) sents.push_back(sentence_to_json(s));
    j["sentences"] = std::move(sents);
    j["labels_left"] = doc.labels_left;
    j["labels_right"] = doc.labels_right;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::string generate_corpus(const GenConfig& cfg, const std::string& path) {
  save_corpus(generate_documents(cfg), path);
  return path;
}

std::vector<OemrDocument> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<OemrDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  int label_width = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    OemrDocument doc;
    if (!j.contains("id") || !j["id"].is_string())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": document missing 'id'");
    doc.id = j["id"].get<std::string>();
    if (!j.contains("sentences") || !j["sentences"].is_array())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": document missing 'sentences'");
    for (const auto& sj : j["sentences"]) doc.sentences.push_back(sentence_from_json(sj));
    if (doc.sentences.empty())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": document has no sentences");
    doc.labels_left = labels_from_json(j, "labels_left");
    doc.labels_right = labels_from_json(j, "labels_right");
    if (doc.labels_left.size() != doc.labels_right.size())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": label vectors differ in length");
    if (label_width < 0) label_width = static_cast<int>(doc.labels_left.size());
    if (static_cast<int>(doc.labels_left.size()) != label_width)
      throw SchemaError("line " + std::to_string(lineno) +
                        ": label width differs from previous documents");
    docs.push_back(std::move(doc));
  }
  return docs;
}

SplitResult split_corpus(const std::vector<OemrDocument>& corpus,
                         double r_train, double r_val, double r_test,
                         std::uint64_t seed) {
  if (r_train < 0 || r_val < 0 || r_test < 0 ||
      std::abs(r_train + r_val + r_test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be nonnegative and sum to 1");
  const std::size_t n = corpus.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x73706c6974ULL));
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[rng.below(i)]);

  // floor-based sizes; the remainder joins the training split
  const auto floor_count = [n](double r) {
    return static_cast<std::size_t>(std::floor(n * r + 1e-9));
  };
  const std::size_t n_val = floor_count(r_val);
  const std::size_t n_test = floor_count(r_test);
  const std::size_t n_train = n - n_val - n_test;

  SplitResult out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n_train; ++i) out.train.push_back(corpus[idx[k++]]);
  for (std::size_t i = 0; i < n_val; ++i) out.val.push_back(corpus[idx[k++]]);
  for (std::size_t i = 0; i < n_test; ++i) out.test.push_back(corpus[idx[k++]]);
  return out;
}

}  // namespace eyedx
