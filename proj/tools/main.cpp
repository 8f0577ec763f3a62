#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>

#include "eyedx/config.hpp"
#include "eyedx/eval.hpp"

using namespace eyedx;
using ojson = nlohmann::ordered_json;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string corpus_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double threshold_b = 0.0;
  bool threshold_set = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_corpus = true) {
  cmd->add_option("--config", f.config_path, "pipeline config JSON file");
  if (with_corpus)
    cmd->add_option("--corpus", f.corpus_path,
                    "corpus JSONL path (overrides the config)");
  cmd->add_option("--seed", f.seed, "master seed; overrides all config seeds")
      ->each([&f](const std::string&) { f.seed_set = true; });
  cmd->add_option("--threshold-b", f.threshold_b,
                  "asymptomatic-description filtering threshold")
      ->each([&f](const std::string&) { f.threshold_set = true; });
}

PipelineConfig resolve_config(const CommonFlags& f) {
  PipelineConfig cfg = f.config_path.empty()
                           ? default_pipeline_config()
                           : load_pipeline_config(f.config_path);
  if (f.seed_set) apply_seed(cfg, f.seed);
  if (f.threshold_set) {
    cfg.preprocess.threshold_b = f.threshold_b;
    cfg.train.threshold_b = f.threshold_b;
  }
  if (!f.corpus_path.empty()) cfg.corpus_path = f.corpus_path;
  return cfg;
}

std::vector<OemrDocument> load_required_corpus(const PipelineConfig& cfg) {
  if (cfg.corpus_path.empty())
    throw ConfigError("no corpus path; pass --corpus or set \"corpus\"");
  return load_corpus(cfg.corpus_path);
}

void emit(const ojson& j) { std::cout << j.dump(2) << std::endl; }

EpochCallback stderr_epoch_logger(int max_epochs) {
  return [max_epochs](int epoch, double loss, double val_auc) {
    std::cerr << "epoch " << (epoch + 1) << "/" << max_epochs
              << " train_loss=" << loss;
    if (!std::isnan(val_auc)) std::cerr << " val_macro_auc=" << val_auc;
    std::cerr << std::endl;
  };
}

ojson report_to_ojson(const MetricsReport& r) { return ojson::parse(r.to_json()); }

int cmd_generate(const CommonFlags& flags, const std::string& out) {
  PipelineConfig cfg = resolve_config(flags);
  std::string path = out.empty() ? cfg.corpus_path : out;
  if (path.empty())
    throw ConfigError("generate: pass --out or set \"corpus\" in the config");
  generate_corpus(cfg.gen, path);
  ojson j;
  j["command"] = "generate";
  j["path"] = path;
  j["n_docs"] = cfg.gen.n_docs;
  ojson names = ojson::array();
  for (const DiseaseSpec& d : cfg.gen.diseases) names.push_back(d.name);
  j["diseases"] = std::move(names);
  j["seed"] = cfg.gen.seed;
  emit(j);
  return 0;
}

int cmd_preprocess(const CommonFlags& flags, const std::string& out) {
  PipelineConfig cfg = resolve_config(flags);
  if (out.empty()) throw ConfigError("preprocess: pass --out");
  auto corpus = load_required_corpus(cfg);
  SplitResult split = split_corpus(corpus, cfg.split.train, cfg.split.val,
                                   cfg.split.test, cfg.seed);
  if (split.train.empty()) throw EmptyInputError("preprocess: empty train split");
  // frequencies come from the training split only
  FreqTable table = compute_sentence_frequencies(split.train);
  PreprocessConfig pcfg = cfg.preprocess;
  if (!cfg.template_lexicon_path.empty()) {
    auto lex = load_template_lexicon(cfg.template_lexicon_path);
    pcfg.template_lexicon.insert(lex.begin(), lex.end());
  }
  auto mono = preprocess_corpus(corpus, table, pcfg);
  save_monocular(mono, out);
  ojson j;
  j["command"] = "preprocess";
  j["path"] = out;
  j["n_documents"] = corpus.size();
  j["n_monocular"] = mono.size();
  j["threshold_b"] = pcfg.threshold_b;
  emit(j);
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& out,
              const std::string& variant_name) {
  PipelineConfig cfg = resolve_config(flags);
  if (out.empty()) throw ConfigError("train: pass --out for the checkpoint");
  const Variant variant = variant_from_string(variant_name);
  auto corpus = load_required_corpus(cfg);
  VariantData data = prepare_variant_data(variant, cfg, corpus);
  std::cerr << "training " << to_string(variant) << " on " << data.train.size()
            << " documents (" << data.val.size() << " validation)" << std::endl;
  auto [ckpt, history] =
      train_loop(cfg.train, data.model_cfg, data.vocab, data.train, data.val,
                 variant, data.label_names,
                 stderr_epoch_logger(cfg.train.max_epochs));
  save_checkpoint(ckpt, out);
  ojson j;
  j["command"] = "train";
  j["checkpoint"] = out;
  j["variant"] = to_string(variant);
  j["seed"] = cfg.train.seed;
  j["best_epoch"] = history.best_epoch;
  j["best_val_macro_auc"] = ckpt.best_val_metric;
  j["final_train_loss"] = history.train_loss.back();
  j["history"] = ojson{{"train_loss", history.train_loss},
                       {"val_macro_auc", history.val_macro_auc}};
  emit(j);
  return 0;
}

int cmd_evaluate(const CommonFlags& flags, const std::string& checkpoint,
                 const std::string& split_name) {
  PipelineConfig cfg = resolve_config(flags);
  Checkpoint ckpt = load_checkpoint(checkpoint);
  auto corpus = load_required_corpus(cfg);
  VariantData data = prepare_variant_data(ckpt.variant, cfg, corpus);
  const std::vector<MonocularDocument>* docs = &data.test;
  if (split_name == "train") docs = &data.train;
  else if (split_name == "val") docs = &data.val;
  else if (split_name != "test")
    throw ConfigError("evaluate: --split must be train, val or test");
  MetricsReport report = evaluate_split(ckpt, *docs);
  std::cout << report.to_json(2) << std::endl;
  return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& variant_name,
               bool all) {
  PipelineConfig cfg = resolve_config(flags);
  auto corpus = load_required_corpus(cfg);
  if (!all) {
    if (variant_name.empty())
      throw ConfigError("ablate: pass --variant or --all");
    MetricsReport report =
        run_ablation(variant_from_string(variant_name), cfg, corpus);
    std::cout << report.to_json(2) << std::endl;
    return 0;
  }
  ojson out;
  out["command"] = "ablate";
  out["seed"] = cfg.seed;
  out["threshold_b"] = cfg.preprocess.threshold_b;
  ojson table = ojson::array();
  ojson details;
  for (Variant v : {Variant::full, Variant::wo_p, Variant::wo_c, Variant::wo_s,
                    Variant::wo_l, Variant::wo_w}) {
    std::cerr << "running variant " << to_string(v) << std::endl;
    MetricsReport r = run_ablation(v, cfg, corpus);
    table.push_back(ojson{{"variant", to_string(v)},
                          {"macro_f1", r.macro_f1},
                          {"micro_f1", r.micro_f1},
                          {"macro_auc", r.macro_auc},
                          {"micro_auc", r.micro_auc}});
    details[to_string(v)] = report_to_ojson(r);
  }
  out["table"] = std::move(table);
  out["reports"] = std::move(details);
  emit(out);
  return 0;
}

int cmd_explain(const CommonFlags& flags, const std::string& checkpoint,
                const std::string& doc_id, const std::string& eye_name,
                const std::string& out) {
  PipelineConfig cfg = resolve_config(flags);
  Checkpoint ckpt = load_checkpoint(checkpoint);
  auto corpus = load_required_corpus(cfg);
  VariantData data = prepare_variant_data(ckpt.variant, cfg, corpus);
  const Eye eye = eye_from_string(eye_name);
  const MonocularDocument* found = nullptr;
  auto search = [&](const std::vector<MonocularDocument>& docs) {
    for (const MonocularDocument& d : docs)
      if (d.source_id == doc_id &&
          (ckpt.variant == Variant::wo_p || d.eye == eye))
        found = &d;
  };
  search(data.train);
  search(data.val);
  search(data.test);
  if (!found)
    throw ConfigError("explain: document '" + doc_id + "' not found");
  if (out.empty()) {
    std::cout << attention_csv(ckpt, *found);
    return 0;
  }
  export_attention(ckpt, *found, out);
  ojson j;
  j["command"] = "explain";
  j["path"] = out;
  j["doc_id"] = doc_id;
  j["eye"] = to_string(eye);
  j["n_sentences"] = found->sentences.size();
  ojson names = ojson::array();
  for (const std::string& n : ckpt.disease_names) names.push_back(n);
  j["diseases"] = std::move(names);
  emit(j);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double eps) {
  Vocabulary vocab = [] {
    GenConfig g = default_gen_config();
    g.n_docs = 4;
    g.seed = 1;
    return build_vocabulary(generate_documents(g));
  }();
  ModelConfig cfg;
  cfg.d = 8;
  cfg.n_word_layers = 2;
  cfg.n_heads = 2;
  cfg.n_labels = 2;
  cfg.vocab_size = vocab.size();
  cfg.dropout = 0.0;
  ModelParamsT<double> params = init_params_t<double>(cfg, seed);

  std::vector<Sentence> sentences;
  {
    Sentence a;
    a.tokens = {"vision", "blurred", "and", "foggy"};
    a.section = Section::CC;
    Sentence b;
    b.tokens = {"intraocular", "pressure", "measured", "above", "normal"};
    b.section = Section::ER;
    Sentence c;
    c.tokens = {"cornea", "clear", "and", "transparent"};
    c.section = Section::ER;
    sentences = {a, b, c};
  }
  const std::vector<std::uint8_t> labels = {1, 0};

  std::vector<Tensor<double>*> tensors;
  for_each_tensor(params, [&](const std::string&, Tensor<double>& t) {
    tensors.push_back(&t);
  });
  auto build = [&](Tape<double>& t, const std::vector<Var<double>>& vars) {
    BoundParams<double> bound = bound_from_vars(vars, cfg, &params.positional);
    ForwardNodes<double> f = build_forward(t, bound, cfg, sentences, vocab,
                                           Variant::full, false, nullptr);
    return bce_sum(f.probs, labels, 1e-7);
  };
  const double err = grad_check(tensors, build, eps);
  const double threshold = 1e-4;
  ojson j;
  j["command"] = "gradcheck";
  j["max_rel_error"] = err;
  j["eps"] = eps;
  j["threshold"] = threshold;
  j["pass"] = err < threshold;
  emit(j);
  return err < threshold ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "per-eye multi-label disease tagging over ophthalmic EMR-style "
      "documents: corpus generation, preprocessing, training, evaluation, "
      "ablations and attention export"};
  app.require_subcommand(1);

  CommonFlags gen_f, pre_f, train_f, eval_f, abl_f, expl_f;
  std::string gen_out, pre_out, train_out, expl_out;
  std::string train_variant = "full", abl_variant, eval_split = "test";
  std::string eval_ckpt, expl_ckpt, expl_doc, expl_eye = "L";
  bool abl_all = false;
  std::uint64_t gc_seed = 0;
  double gc_eps = 1e-5;

  CLI::App* generate = app.add_subcommand("generate",
                                          "write a synthetic JSONL corpus");
  add_common(generate, gen_f, false);
  generate->add_option("--out", gen_out, "output corpus path");

  CLI::App* preprocess = app.add_subcommand(
      "preprocess", "filter templated descriptions and split by eye");
  add_common(preprocess, pre_f);
  preprocess->add_option("--out", pre_out, "output monocular JSONL path");

  CLI::App* train = app.add_subcommand("train", "train and save a checkpoint");
  add_common(train, train_f);
  train->add_option("--out", train_out, "checkpoint directory");
  train->add_option("--variant", train_variant,
                    "model variant (default full)");

  CLI::App* evaluate = app.add_subcommand("evaluate",
                                          "score a checkpoint on a split");
  add_common(evaluate, eval_f);
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint directory")
      ->required();
  evaluate->add_option("--split", eval_split, "train, val or test");

  CLI::App* ablate = app.add_subcommand(
      "ablate", "train and score one ablation variant (or --all)");
  add_common(ablate, abl_f);
  ablate->add_option("--variant", abl_variant,
                     "full, wo_p, wo_c, wo_s, wo_l or wo_w");
  ablate->add_flag("--all", abl_all, "run all six variants with one seed");

  CLI::App* explain = app.add_subcommand(
      "explain", "export the label-attention heatmap for one document");
  add_common(explain, expl_f);
  explain->add_option("--checkpoint", expl_ckpt, "checkpoint directory")
      ->required();
  explain->add_option("--doc-id", expl_doc, "source document id")->required();
  explain->add_option("--eye", expl_eye, "L or R (default L)");
  explain->add_option("--out", expl_out, "output CSV path (stdout if absent)");

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "compare analytic gradients against finite differences");
  gradcheck->add_option("--seed", gc_seed, "parameter init seed");
  gradcheck->add_option("--eps", gc_eps, "finite-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (generate->parsed()) return cmd_generate(gen_f, gen_out);
    if (preprocess->parsed()) return cmd_preprocess(pre_f, pre_out);
    if (train->parsed()) return cmd_train(train_f, train_out, train_variant);
    if (evaluate->parsed()) return cmd_evaluate(eval_f, eval_ckpt, eval_split);
    if (ablate->parsed()) return cmd_ablate(abl_f, abl_variant, abl_all);
    if (explain->parsed())
      return cmd_explain(expl_f, expl_ckpt, expl_doc, expl_eye, expl_out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_eps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 1;
}
