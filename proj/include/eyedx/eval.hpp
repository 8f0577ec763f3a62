#pragma once

#include <string>
#include <vector>

#include "eyedx/config.hpp"
#include "eyedx/train.hpp"

namespace eyedx {

struct LabelMetrics {
  std::string name;
  long tp = 0, fp = 0, fn = 0;
  long positives = 0, negatives = 0;
  double precision = 0, recall = 0, f1 = 0, auc = 0;
  bool in_macro_f1 = false;  // false when TP+FP+FN == 0
  bool in_macro_auc = false; // false without both classes present
};

struct MetricsReport {
  double macro_f1 = 0, micro_f1 = 0, macro_auc = 0, micro_auc = 0;
  std::vector<LabelMetrics> per_label;
  int excluded_from_macro_f1 = 0;
  int excluded_from_macro_auc = 0;
  std::size_t n_instances = 0;
  std::uint64_t seed = 0;
  std::string variant = "full";
  std::string to_json(int indent = -1) const;
};

struct F1Result {
  double macro_f1 = 0, micro_f1 = 0;
  std::vector<LabelMetrics> per_label;
  int excluded = 0;
};

// predictions/truths: one length-L bit vector per instance (threshold 0.5
// applied upstream). Macro averages skip labels with TP+FP+FN == 0.
F1Result f1_scores(const std::vector<std::vector<std::uint8_t>>& predictions,
                   const std::vector<std::vector<std::uint8_t>>& truths);

struct AucResult {
  double macro_auc = 0, micro_auc = 0;
  std::vector<double> per_label;
  std::vector<bool> defined;
  int excluded = 0;
};

// Rank-based (Mann-Whitney) AUC with half credit for ties. Labels without
// both classes are excluded from the macro average; micro pools every
// (instance, label) pair.
AucResult auc_scores(const std::vector<std::vector<double>>& probabilities,
                     const std::vector<std::vector<std::uint8_t>>& truths);

// Single binary AUC; requires at least one positive and one negative.
double rank_auc(const std::vector<double>& scores,
                const std::vector<std::uint8_t>& labels);

// Deterministic eval-mode scoring of a document list.
MetricsReport evaluate_split(const Checkpoint& ckpt,
                             const std::vector<MonocularDocument>& docs);

// Lightweight hook for checkpoint selection during training.
double validation_macro_auc(const ModelParams& params, const ModelConfig& cfg,
                            const Vocabulary& vocab,
                            const std::vector<MonocularDocument>& docs,
                            Variant variant);

// Full pipeline for one ablation variant: split, preprocess (except wo_p,
// which feeds unsplit documents and predicts 2L outputs), train, and score
// the test split.
MetricsReport run_ablation(Variant variant, const PipelineConfig& cfg,
                           const std::vector<OemrDocument>& corpus);

struct AblationRun {
  Checkpoint checkpoint;
  TrainHistory history;
  MetricsReport report;
};
AblationRun run_ablation_full(Variant variant, const PipelineConfig& cfg,
                              const std::vector<OemrDocument>& corpus);

// The monocular instances the given variant trains and evaluates on.
struct VariantData {
  Vocabulary vocab;
  std::vector<MonocularDocument> train, val, test;
  ModelConfig model_cfg;
  std::vector<std::string> label_names;
};
VariantData prepare_variant_data(Variant variant, const PipelineConfig& cfg,
                                 const std::vector<OemrDocument>& corpus);

// CSV heatmap: one row per sentence (original order, text in the first
// column), one column per disease; every disease column sums to 1.
void export_attention(const Checkpoint& ckpt, const MonocularDocument& doc,
                      const std::string& path);
std::string attention_csv(const Checkpoint& ckpt, const MonocularDocument& doc);

}  // namespace eyedx
