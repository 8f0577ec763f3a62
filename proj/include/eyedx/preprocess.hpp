#pragma once

#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eyedx/corpus.hpp"

namespace eyedx {

enum class Eye { Left, Right };
std::string to_string(Eye e);
Eye eye_from_string(const std::string& s);

// Per-eye document produced by laterality splitting. Sentences with
// laterality Both or Unspecified appear in both eyes' documents.
struct MonocularDocument {
  Eye eye = Eye::Left;
  std::vector<Sentence> sentences;
  std::vector<std::uint8_t> labels;
  std::string source_id;
};

// Document frequencies of normalized sentences over a corpus. A sentence
// occurring in k of n documents maps to exactly k/n; mirrored left/right
// templates pool into a single entry via laterality normalization.
struct FreqTable {
  std::unordered_map<std::string, double> freq;
  int corpus_size = 0;
  double lookup(const std::string& normalized) const {
    auto it = freq.find(normalized);
    return it == freq.end() ? 0.0 : it->second;
  }
};

struct PreprocessConfig {
  double threshold_b = 0.1;  // document-frequency fraction in [0,1]
  // normalized sentence strings; optional when documents carry template flags
  std::set<std::string> template_lexicon;
};

// Lowercases, joins with single spaces, and replaces the laterality markers
// "left eye" / "right eye" / "both eyes" with a placeholder.
std::string normalize_sentence(const std::vector<std::string>& tokens);

FreqTable compute_sentence_frequencies(const std::vector<OemrDocument>& corpus);

// Removes a sentence iff it is an asymptomatic template (flag or lexicon)
// AND its normalized document frequency exceeds cfg.threshold_b.
OemrDocument filter_asymptomatic(const OemrDocument& doc,
                                 const FreqTable& table,
                                 const PreprocessConfig& cfg);

std::pair<MonocularDocument, MonocularDocument> split_by_eye(
    const OemrDocument& doc);

// filter then split, document-wise; emits exactly 2 * |corpus| documents.
// The table must be built over the training split only.
std::vector<MonocularDocument> preprocess_corpus(
    const std::vector<OemrDocument>& corpus, const FreqTable& table,
    const PreprocessConfig& cfg);

void save_monocular(const std::vector<MonocularDocument>& docs,
                    const std::string& path);
std::vector<MonocularDocument> load_monocular(const std::string& path);

// one normalized sentence per line
std::set<std::string> load_template_lexicon(const std::string& path);

}  // namespace eyedx
