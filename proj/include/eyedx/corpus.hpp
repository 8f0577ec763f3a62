#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "eyedx/common.hpp"

namespace eyedx {

enum class Section { CC, HPI, ER };
enum class Laterality { Left, Right, Both, Unspecified };

std::string to_string(Section s);
std::string to_string(Laterality l);
Section section_from_string(const std::string& s);
Laterality laterality_from_string(const std::string& s);

struct Sentence {
  std::vector<std::string> tokens;
  Section section = Section::CC;
  Laterality laterality = Laterality::Unspecified;
  // ground truth in synthetic corpora; derived from a lexicon otherwise
  bool is_asymptomatic_template = false;
};

// Sentinel inserted wherever preprocessing leaves a document empty.
Sentence empty_sentinel();
bool is_empty_sentinel(const Sentence& s);

// A multi-section record covering both eyes, with one label set per eye.
struct OemrDocument {
  std::string id;
  std::vector<Sentence> sentences;
  std::vector<std::uint8_t> labels_left;
  std::vector<std::uint8_t> labels_right;
};

// ---------------------------------------------------------------------------
// Vocabulary
//
// Ids are dense and deterministic: reserved tokens first, then one type
// token per section, then content tokens in sorted order.
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEmpty = 2;
  static constexpr int kNumReserved = 3;
  static constexpr int kNumSections = 3;
  static constexpr int kFirstContentId = kNumReserved + kNumSections;

  Vocabulary() = default;
  // content tokens must be sorted and unique
  explicit Vocabulary(std::vector<std::string> content_tokens);

  int size() const { return kFirstContentId + static_cast<int>(content_.size()); }
  int encode(const std::string& token) const;
  int type_token_id(Section s) const { return kNumReserved + static_cast<int>(s); }
  const std::vector<std::string>& content_tokens() const { return content_; }
  // full id -> token string listing (reserved + type + content)
  std::vector<std::string> id_to_token() const;

 private:
  std::vector<std::string> content_;
  std::map<std::string, int> token_to_id_;
};

Vocabulary build_vocabulary(const std::vector<OemrDocument>& corpus);

// ---------------------------------------------------------------------------
// Synthetic corpus generation
//
// Substitute for a private clinical dataset: labels are a deterministic
// function of planted indicative sentences, so learning and explanation
// are independently checkable.
// ---------------------------------------------------------------------------

struct IndicativeTemplate {
  std::string text;  // contains the "{eye}" slot
  Section section = Section::ER;
};

struct DiseaseSpec {
  std::string name;
  std::vector<IndicativeTemplate> templates;
  double prevalence = 0.3;          // P(disease present in the record)
  double both_given_present = 0.3;  // P(both eyes | present)
};

struct AsymptomaticTemplate {
  std::string text;  // contains the "{eye}" slot
  Section section = Section::ER;
  double target_frequency = 0.5;  // fraction of documents carrying it
};

struct FillerTemplate {
  std::string text;  // no eye slot; laterality Unspecified
  Section section = Section::CC;
  double frequency = 0.5;
};

struct GenConfig {
  int n_docs = 0;
  std::vector<DiseaseSpec> diseases;
  std::vector<AsymptomaticTemplate> template_pool;
  std::vector<FillerTemplate> fillers;
  double label_noise = 0.0;  // probability in [0,1)
  std::uint64_t seed = 0;
  // chance of a second, distinct indicative sentence per (disease, eye)
  double extra_indicative = 0.35;
};

// Six-disease configuration used throughout the tests and the CLI defaults.
GenConfig default_gen_config();

void validate(const GenConfig& cfg);

// Renders "{eye}" with the laterality phrase and splits on whitespace.
std::vector<std::string> render_template(const std::string& text,
                                         Laterality lat);

std::vector<OemrDocument> generate_documents(const GenConfig& cfg);
void save_corpus(const std::vector<OemrDocument>& docs,
                 const std::string& path);
// generate + save; returns the path written
std::string generate_corpus(const GenConfig& cfg, const std::string& path);

std::vector<OemrDocument> load_corpus(const std::string& path);

struct SplitResult {
  std::vector<OemrDocument> train, val, test;
};

// Deterministic shuffle, floor-based sizes, remainder to train.
SplitResult split_corpus(const std::vector<OemrDocument>& corpus,
                         double r_train, double r_val, double r_test,
                         std::uint64_t seed);

}  // namespace eyedx
