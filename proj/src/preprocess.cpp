#include "eyedx/preprocess.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>

namespace eyedx {

using ojson = nlohmann::ordered_json;

std::string to_string(Eye e) { return e == Eye::Left ? "L" : "R"; }

Eye eye_from_string(const std::string& s) {
  if (s == "L") return Eye::Left;
  if (s == "R") return Eye::Right;
  throw SchemaError("unknown eye '" + s + "'");
}

namespace {

void replace_all(std::string& s, const std::string& from,
                 const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos;
       pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

void check_config(const PreprocessConfig& cfg) {
  if (cfg.threshold_b < 0.0 || cfg.threshold_b > 1.0)
    throw ConfigError("preprocess: threshold B must be in [0,1]");
}

}  // namespace

std::string normalize_sentence(const std::vector<std::string>& tokens) {
  std::string joined;
  for (const std::string& t : tokens) {
    if (!joined.empty()) joined += ' ';
    for (char c : t) joined += static_cast<char>(std::tolower(
        static_cast<unsigned char>(c)));
  }
  replace_all(joined, "left eye", "<eye>");
  replace_all(joined, "right eye", "<eye>");
  replace_all(joined, "both eyes", "<eye>");
  return joined;
}

FreqTable compute_sentence_frequencies(
    const std::vector<OemrDocument>& corpus) {
  if (corpus.empty())
    throw EmptyInputError("compute_sentence_frequencies: empty corpus");
  FreqTable table;
  table.corpus_size = static_cast<int>(corpus.size());
  std::unordered_map<std::string, int> counts;
  std::set<std::string> seen;
  for (const OemrDocument& doc : corpus) {
    seen.clear();
    for (const Sentence& s : doc.sentences)
      seen.insert(normalize_sentence(s.tokens));  // once per document
    for (const std::string& n : seen) ++counts[n];
  }
  for (const auto& [sentence, count] : counts)
    table.freq[sentence] = static_cast<double>(count) / table.corpus_size;
  return table;
}

OemrDocument filter_asymptomatic(const OemrDocument& doc,
                                 const FreqTable& table,
                                 const PreprocessConfig& cfg) {
  check_config(cfg);
  OemrDocument out;
  out.id = doc.id;
  out.labels_left = doc.labels_left;
  out.labels_right = doc.labels_right;
  for (const Sentence& s : doc.sentences) {
    const std::string norm = normalize_sentence(s.tokens);
    const bool is_template =
        s.is_asymptomatic_template || cfg.template_lexicon.count(norm) > 0;
    if (is_template && table.lookup(norm) > cfg.threshold_b) continue;
    out.sentences.push_back(s);
  }
  if (out.sentences.empty()) out.sentences.push_back(empty_sentinel());
  return out;
}

std::pair<MonocularDocument, MonocularDocument> split_by_eye(
    const OemrDocument& doc) {
  MonocularDocument left, right;
  left.eye = Eye::Left;
  right.eye = Eye::Right;
  left.source_id = right.source_id = doc.id;
  left.labels = doc.labels_left;
  right.labels = doc.labels_right;
  for (const Sentence& s : doc.sentences) {
    if (s.laterality != Laterality::Right) left.sentences.push_back(s);
    if (s.laterality != Laterality::Left) right.sentences.push_back(s);
  }
  if (left.sentences.empty()) left.sentences.push_back(empty_sentinel());
  if (right.sentences.empty()) right.sentences.push_back(empty_sentinel());
  return {std::move(left), std::move(right)};
}

std::vector<MonocularDocument> preprocess_corpus(
    const std::vector<OemrDocument>& corpus, const FreqTable& table,
    const PreprocessConfig& cfg) {
  check_config(cfg);
  std::vector<MonocularDocument> out;
  out.reserve(corpus.size() * 2);
  for (const OemrDocument& doc : corpus) {
    auto [left, right] = split_by_eye(filter_asymptomatic(doc, table, cfg));
    out.push_back(std::move(left));
    out.push_back(std::move(right));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL I/O — same sentence schema as the binocular corpus plus "eye"
// ---------------------------------------------------------------------------

void save_monocular(const std::vector<MonocularDocument>& docs,
                    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const MonocularDocument& doc : docs) {
    ojson j;
    j["id"] = doc.source_id;
    j["eye"] = to_string(doc.eye);
    ojson sents = ojson::array();
    for (const Sentence& s : doc.sentences) {
      ojson sj;
      sj["tokens"] = s.tokens;
      sj["section"] = to_string(s.section);
      sj["laterality"] = to_string(s.laterality);
      sj["template"] = s.is_asymptomatic_template;
      sents.push_back(std::move(sj));
    }
    j["sentences"] = std::move(sents);
    j["labels"] = doc.labels;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::vector<MonocularDocument> load_monocular(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<MonocularDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    MonocularDocument doc;
    if (!j.contains("id") || !j["id"].is_string())
      throw SchemaError("line " + std::to_string(lineno) + ": missing 'id'");
    doc.source_id = j["id"].get<std::string>();
    if (!j.contains("eye") || !j["eye"].is_string())
      throw SchemaError("line " + std::to_string(lineno) + ": missing 'eye'");
    doc.eye = eye_from_string(j["eye"].get<std::string>());
    if (!j.contains("sentences") || !j["sentences"].is_array())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": missing 'sentences'");
    for (const auto& sj : j["sentences"]) {
      Sentence s;
      if (!sj.contains("tokens") || !sj["tokens"].is_array())
        throw SchemaError("line " + std::to_string(lineno) +
                          ": sentence missing 'tokens'");
      for (const auto& t : sj["tokens"]) s.tokens.push_back(t.get<std::string>());
      if (s.tokens.empty())
        throw SchemaError("line " + std::to_string(lineno) +
                          ": sentence has no tokens");
      s.section = section_from_string(sj.at("section").get<std::string>());
      s.laterality =
          laterality_from_string(sj.at("laterality").get<std::string>());
      s.is_asymptomatic_template = sj.at("template").get<bool>();
      doc.sentences.push_back(std::move(s));
    }
    if (doc.sentences.empty())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": document has no sentences");
    if (!j.contains("labels") || !j["labels"].is_array())
      throw SchemaError("line " + std::to_string(lineno) +
                        ": missing 'labels'");
    for (const auto& v : j["labels"])
      doc.labels.push_back(static_cast<std::uint8_t>(v.get<int>()));
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::set<std::string> load_template_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

}  // namespace eyedx
