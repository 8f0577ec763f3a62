#include "eyedx/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace eyedx {

using ojson = nlohmann::ordered_json;

namespace {

void check_pair_shapes(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": " + std::to_string(a) + " vs " +
                     std::to_string(b));
}

int label_width(const std::vector<std::vector<std::uint8_t>>& truths) {
  if (truths.empty()) throw EmptyInputError("metrics: no instances");
  const int L = static_cast<int>(truths[0].size());
  for (const auto& t : truths)
    if (static_cast<int>(t.size()) != L)
      throw ShapeError("metrics: ragged label vectors");
  return L;
}

}  // namespace

F1Result f1_scores(const std::vector<std::vector<std::uint8_t>>& predictions,
                   const std::vector<std::vector<std::uint8_t>>& truths) {
  check_pair_shapes(predictions.size(), truths.size(), "f1: instance count");
  const int L = label_width(truths);
  for (const auto& p : predictions)
    if (static_cast<int>(p.size()) != L)
      throw ShapeError("f1: prediction width mismatch");

  F1Result out;
  out.per_label.resize(L);
  long tp_sum = 0, fp_sum = 0, fn_sum = 0;
  double macro_acc = 0;
  int included = 0;
  for (int l = 0; l < L; ++l) {
    LabelMetrics& m = out.per_label[l];
    for (std::size_t i = 0; i < truths.size(); ++i) {
      const bool y = truths[i][l], p = predictions[i][l];
      if (y && p) ++m.tp;
      if (!y && p) ++m.fp;
      if (y && !p) ++m.fn;
      if (y) ++m.positives;
      else ++m.negatives;
    }
    tp_sum += m.tp;
    fp_sum += m.fp;
    fn_sum += m.fn;
    if (m.tp + m.fp + m.fn > 0) {
      m.precision = m.tp + m.fp > 0 ? double(m.tp) / (m.tp + m.fp) : 0.0;
      m.recall = m.tp + m.fn > 0 ? double(m.tp) / (m.tp + m.fn) : 0.0;
      m.f1 = 2.0 * m.tp / double(2 * m.tp + m.fp + m.fn);
      m.in_macro_f1 = true;
      macro_acc += m.f1;
      ++included;
    } else {
      ++out.excluded;
    }
  }
  out.macro_f1 = included > 0 ? macro_acc / included : 0.0;
  out.micro_f1 = tp_sum + fp_sum + fn_sum > 0
                     ? 2.0 * tp_sum / double(2 * tp_sum + fp_sum + fn_sum)
                     : 0.0;
  return out;
}

double rank_auc(const std::vector<double>& scores,
                const std::vector<std::uint8_t>& labels) {
  check_pair_shapes(scores.size(), labels.size(), "auc: score count");
  long pos = 0, neg = 0;
  for (std::uint8_t y : labels) (y ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw EmptyInputError("rank_auc: needs both classes");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  // average ranks over ties, 1-based
  double pos_rank_sum = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = (double(i + 1) + double(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[idx[k]]) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  return (pos_rank_sum - double(pos) * (pos + 1) / 2.0) /
         (double(pos) * double(neg));
}

AucResult auc_scores(const std::vector<std::vector<double>>& probabilities,
                     const std::vector<std::vector<std::uint8_t>>& truths) {
  check_pair_shapes(probabilities.size(), truths.size(),
                    "auc: instance count");
  const int L = label_width(truths);
  for (const auto& p : probabilities)
    if (static_cast<int>(p.size()) != L)
      throw ShapeError("auc: probability width mismatch");

  AucResult out;
  out.per_label.assign(L, 0.0);
  out.defined.assign(L, false);
  double macro_acc = 0;
  int included = 0;
  std::vector<double> col(truths.size());
  std::vector<std::uint8_t> lab(truths.size());
  for (int l = 0; l < L; ++l) {
    long pos = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      col[i] = probabilities[i][l];
      lab[i] = truths[i][l];
      pos += lab[i];
    }
    if (pos == 0 || pos == static_cast<long>(truths.size())) {
      ++out.excluded;
      continue;
    }
    out.per_label[l] = rank_auc(col, lab);
    out.defined[l] = true;
    macro_acc += out.per_label[l];
    ++included;
  }
  out.macro_auc = included > 0 ? macro_acc / included : 0.0;

  std::vector<double> pooled;
  std::vector<std::uint8_t> pooled_lab;
  pooled.reserve(truths.size() * L);
  pooled_lab.reserve(truths.size() * L);
  long pos = 0;
  for (std::size_t i = 0; i < truths.size(); ++i)
    for (int l = 0; l < L; ++l) {
      pooled.push_back(probabilities[i][l]);
      pooled_lab.push_back(truths[i][l]);
      pos += truths[i][l];
    }
  out.micro_auc = (pos > 0 && pos < static_cast<long>(pooled.size()))
                      ? rank_auc(pooled, pooled_lab)
                      : 0.5;
  return out;
}

// ---------------------------------------------------------------------------
// split evaluation
// ---------------------------------------------------------------------------

namespace {

void score_documents(const ModelParams& params, const ModelConfig& cfg,
                     const Vocabulary& vocab,
                     const std::vector<MonocularDocument>& docs,
                     Variant variant,
                     std::vector<std::vector<double>>& probs,
                     std::vector<std::vector<std::uint8_t>>& truths) {
  probs.clear();
  truths.clear();
  probs.reserve(docs.size());
  truths.reserve(docs.size());
  for (const MonocularDocument& doc : docs) {
    Prediction pred = forward_monocular(doc.sentences, params, vocab, cfg,
                                        variant);
    probs.emplace_back(pred.probs.begin(), pred.probs.end());
    truths.push_back(doc.labels);
  }
}

}  // namespace

double validation_macro_auc(const ModelParams& params, const ModelConfig& cfg,
                            const Vocabulary& vocab,
                            const std::vector<MonocularDocument>& docs,
                            Variant variant) {
  std::vector<std::vector<double>> probs;
  std::vector<std::vector<std::uint8_t>> truths;
  score_documents(params, cfg, vocab, docs, variant, probs, truths);
  return auc_scores(probs, truths).macro_auc;
}

MetricsReport evaluate_split(const Checkpoint& ckpt,
                             const std::vector<MonocularDocument>& docs) {
  if (docs.empty()) throw EmptyInputError("evaluate_split: no documents");
  const ModelConfig& cfg = ckpt.params.cfg;
  for (const MonocularDocument& d : docs)
    if (static_cast<int>(d.labels.size()) != cfg.n_labels)
      throw ConfigError("evaluate_split: document label width " +
                        std::to_string(d.labels.size()) +
                        " does not match checkpoint n_labels " +
                        std::to_string(cfg.n_labels));

  std::vector<std::vector<double>> probs;
  std::vector<std::vector<std::uint8_t>> truths;
  score_documents(ckpt.params, cfg, ckpt.vocab, docs, ckpt.variant, probs,
                  truths);

  std::vector<std::vector<std::uint8_t>> preds(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    preds[i].resize(probs[i].size());
    for (std::size_t l = 0; l < probs[i].size(); ++l)
      preds[i][l] = probs[i][l] > 0.5 ? 1 : 0;
  }

  F1Result f1 = f1_scores(preds, truths);
  AucResult auc = auc_scores(probs, truths);

  MetricsReport report;
  report.macro_f1 = f1.macro_f1;
  report.micro_f1 = f1.micro_f1;
  report.macro_auc = auc.macro_auc;
  report.micro_auc = auc.micro_auc;
  report.per_label = std::move(f1.per_label);
  for (std::size_t l = 0; l < report.per_label.size(); ++l) {
    report.per_label[l].name =
        l < ckpt.disease_names.size() ? ckpt.disease_names[l]
                                      : "label_" + std::to_string(l);
    report.per_label[l].auc = auc.per_label[l];
    report.per_label[l].in_macro_auc = auc.defined[l];
  }
  report.excluded_from_macro_f1 = f1.excluded;
  report.excluded_from_macro_auc = auc.excluded;
  report.n_instances = docs.size();
  report.seed = ckpt.train_cfg.seed;
  report.variant = to_string(ckpt.variant);
  return report;
}

std::string MetricsReport::to_json(int indent) const {
  ojson j;
  j["variant"] = variant;
  j["seed"] = seed;
  j["n_instances"] = n_instances;
  j["macro_f1"] = macro_f1;
  j["micro_f1"] = micro_f1;
  j["macro_auc"] = macro_auc;
  j["micro_auc"] = micro_auc;
  j["excluded_from_macro_f1"] = excluded_from_macro_f1;
  j["excluded_from_macro_auc"] = excluded_from_macro_auc;
  ojson labels = ojson::array();
  for (const LabelMetrics& m : per_label) {
    ojson lj;
    lj["name"] = m.name;
    lj["precision"] = m.precision;
    lj["recall"] = m.recall;
    lj["f1"] = m.f1;
    lj["auc"] = m.auc;
    lj["tp"] = m.tp;
    lj["fp"] = m.fp;
    lj["fn"] = m.fn;
    lj["positives"] = m.positives;
    lj["negatives"] = m.negatives;
    lj["in_macro_f1"] = m.in_macro_f1;
    lj["in_macro_auc"] = m.in_macro_auc;
    labels.push_back(std::move(lj));
  }
  j["per_label"] = std::move(labels);
  return indent >= 0 ? j.dump(indent) : j.dump();
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

VariantData prepare_variant_data(Variant variant, const PipelineConfig& cfg,
                                 const std::vector<OemrDocument>& corpus) {
  if (corpus.empty()) throw EmptyInputError("ablation: empty corpus");
  const int L = static_cast<int>(corpus[0].labels_left.size());
  SplitResult split = split_corpus(corpus, cfg.split.train, cfg.split.val,
                                   cfg.split.test, cfg.seed);
  if (split.train.empty()) throw EmptyInputError("ablation: empty train split");

  VariantData data;
  data.vocab = build_vocabulary(split.train);

  std::vector<std::string> names;
  if (static_cast<int>(cfg.gen.diseases.size()) == L)
    for (const DiseaseSpec& d : cfg.gen.diseases) names.push_back(d.name);
  else
    for (int l = 0; l < L; ++l) names.push_back("label_" + std::to_string(l));

  if (variant == Variant::wo_p) {
    auto to_instance = [L](const OemrDocument& doc) {
      MonocularDocument m;
      m.eye = Eye::Left;  // placeholder; the instance covers both eyes
      m.sentences = doc.sentences;
      m.source_id = doc.id;
      m.labels = doc.labels_left;
      m.labels.insert(m.labels.end(), doc.labels_right.begin(),
                      doc.labels_right.end());
      (void)L;
      return m;
    };
    for (const OemrDocument& d : split.train) data.train.push_back(to_instance(d));
    for (const OemrDocument& d : split.val) data.val.push_back(to_instance(d));
    for (const OemrDocument& d : split.test) data.test.push_back(to_instance(d));
    data.label_names.clear();
    for (const std::string& n : names) data.label_names.push_back(n + ":L");
    for (const std::string& n : names) data.label_names.push_back(n + ":R");
  } else {
    PreprocessConfig pcfg = cfg.preprocess;
    if (!cfg.template_lexicon_path.empty()) {
      std::set<std::string> lex = load_template_lexicon(cfg.template_lexicon_path);
      pcfg.template_lexicon.insert(lex.begin(), lex.end());
    }
    FreqTable table = compute_sentence_frequencies(split.train);
    data.train = preprocess_corpus(split.train, table, pcfg);
    data.val = split.val.empty() ? std::vector<MonocularDocument>{}
                                 : preprocess_corpus(split.val, table, pcfg);
    data.test = split.test.empty() ? std::vector<MonocularDocument>{}
                                   : preprocess_corpus(split.test, table, pcfg);
    data.label_names = names;
  }

  data.model_cfg = cfg.model;
  data.model_cfg.n_labels = variant == Variant::wo_p ? 2 * L : L;
  data.model_cfg.vocab_size = data.vocab.size();
  data.model_cfg.dropout = cfg.train.dropout;
  return data;
}

AblationRun run_ablation_full(Variant variant, const PipelineConfig& cfg,
                              const std::vector<OemrDocument>& corpus) {
  VariantData data = prepare_variant_data(variant, cfg, corpus);
  AblationRun run;
  auto [ckpt, history] =
      train_loop(cfg.train, data.model_cfg, data.vocab, data.train, data.val,
                 variant, data.label_names);
  run.checkpoint = std::move(ckpt);
  run.history = std::move(history);
  run.report = evaluate_split(run.checkpoint, data.test);
  return run;
}

MetricsReport run_ablation(Variant variant, const PipelineConfig& cfg,
                           const std::vector<OemrDocument>& corpus) {
  return run_ablation_full(variant, cfg, corpus).report;
}

// ---------------------------------------------------------------------------
// attention export
// ---------------------------------------------------------------------------

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

std::string attention_csv(const Checkpoint& ckpt,
                          const MonocularDocument& doc) {
  Prediction pred = forward_monocular(doc.sentences, ckpt.params, ckpt.vocab,
                                      ckpt.params.cfg, ckpt.variant);
  const int L = pred.trace.alpha.rows();
  const int N = pred.trace.alpha.cols();
  std::string out = "sentence";
  for (int l = 0; l < L; ++l) {
    out += ',';
    out += csv_escape(l < static_cast<int>(ckpt.disease_names.size())
                          ? ckpt.disease_names[l]
                          : "label_" + std::to_string(l));
  }
  out += '\n';
  for (int n = 0; n < N; ++n) {
    const int si = pred.trace.sentence_indices[n];
    std::string text;
    if (si < static_cast<int>(doc.sentences.size())) {
      for (const std::string& t : doc.sentences[si].tokens) {
        if (!text.empty()) text += ' ';
        text += t;
      }
    }
    out += csv_escape(text);
    for (int l = 0; l < L; ++l) {
      out += ',';
      out += fmt_float(pred.trace.alpha.at(l, n));
    }
    out += '\n';
  }
  return out;
}

void export_attention(const Checkpoint& ckpt, const MonocularDocument& doc,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << attention_csv(ckpt, doc);
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace eyedx
