#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "eyedx/corpus.hpp"

namespace testutil {

// fresh per-process scratch directory
inline std::filesystem::path scratch_dir() {
  static int counter = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("eyedx-test-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter++));
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline eyedx::Sentence sent(const std::string& text,
                            eyedx::Section section = eyedx::Section::ER,
                            eyedx::Laterality lat =
                                eyedx::Laterality::Unspecified,
                            bool is_template = false) {
  eyedx::Sentence s;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) s.tokens.push_back(tok);
  s.section = section;
  s.laterality = lat;
  s.is_asymptomatic_template = is_template;
  return s;
}

inline bool same_sentence(const eyedx::Sentence& a, const eyedx::Sentence& b) {
  return a.tokens == b.tokens && a.section == b.section &&
         a.laterality == b.laterality &&
         a.is_asymptomatic_template == b.is_asymptomatic_template;
}

inline bool same_document(const eyedx::OemrDocument& a,
                          const eyedx::OemrDocument& b) {
  if (a.id != b.id || a.labels_left != b.labels_left ||
      a.labels_right != b.labels_right ||
      a.sentences.size() != b.sentences.size())
    return false;
  for (std::size_t i = 0; i < a.sentences.size(); ++i)
    if (!same_sentence(a.sentences[i], b.sentences[i])) return false;
  return true;
}

}  // namespace testutil
