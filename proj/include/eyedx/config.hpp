#pragma once

#include <string>

#include "eyedx/corpus.hpp"
#include "eyedx/model.hpp"
#include "eyedx/preprocess.hpp"
#include "eyedx/train.hpp"

namespace eyedx {

struct SplitRatios {
  double train = 0.7, val = 0.15, test = 0.15;
};

// One JSON file drives the whole pipeline; CLI flags override file values.
struct PipelineConfig {
  std::string corpus_path;
  GenConfig gen;
  PreprocessConfig preprocess;
  std::string template_lexicon_path;
  ModelConfig model;  // n_labels and vocab_size are filled at run time
  TrainConfig train;
  SplitRatios split;
  std::uint64_t seed = 1;
};

PipelineConfig default_pipeline_config();
PipelineConfig load_pipeline_config(const std::string& path);
PipelineConfig parse_pipeline_config(const std::string& json_text);

// Routes one seed to every random consumer (generation, split, training).
void apply_seed(PipelineConfig& cfg, std::uint64_t seed);

std::string gen_config_to_json(const GenConfig& cfg, int indent = 2);
GenConfig gen_config_from_json_text(const std::string& json_text);

}  // namespace eyedx
