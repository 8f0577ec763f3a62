#include "eyedx/config.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace eyedx {

using ojson = nlohmann::ordered_json;

namespace {

ojson indicative_to_json(const IndicativeTemplate& t) {
  return ojson{{"text", t.text}, {"section", to_string(t.section)}};
}

IndicativeTemplate indicative_from_json(const ojson& j) {
  IndicativeTemplate t;
  t.text = j.at("text").get<std::string>();
  t.section = section_from_string(j.value("section", std::string("ER")));
  return t;
}

template <typename T>
T get_or(const ojson& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

}  // namespace

std::string gen_config_to_json(const GenConfig& cfg, int indent) {
  ojson j;
  j["n_docs"] = cfg.n_docs;
  j["seed"] = cfg.seed;
  j["label_noise"] = cfg.label_noise;
  j["extra_indicative"] = cfg.extra_indicative;
  ojson ds = ojson::array();
  for (const DiseaseSpec& d : cfg.diseases) {
    ojson dj;
    dj["name"] = d.name;
    dj["prevalence"] = d.prevalence;
    dj["both_given_present"] = d.both_given_present;
    ojson ts = ojson::array();
    for (const IndicativeTemplate& t : d.templates)
      ts.push_back(indicative_to_json(t));
    dj["templates"] = std::move(ts);
    ds.push_back(std::move(dj));
  }
  j["diseases"] = std::move(ds);
  ojson pool = ojson::array();
  for (const AsymptomaticTemplate& t : cfg.template_pool)
    pool.push_back(ojson{{"text", t.text},
                         {"section", to_string(t.section)},
                         {"target_frequency", t.target_frequency}});
  j["template_pool"] = std::move(pool);
  ojson fillers = ojson::array();
  for (const FillerTemplate& f : cfg.fillers)
    fillers.push_back(ojson{{"text", f.text},
                            {"section", to_string(f.section)},
                            {"frequency", f.frequency}});
  j["fillers"] = std::move(fillers);
  return indent >= 0 ? j.dump(indent) : j.dump();
}

namespace {

GenConfig gen_config_from_json(const ojson& j) {
  GenConfig defaults = default_gen_config();
  GenConfig cfg;
  cfg.n_docs = get_or(j, "n_docs", 0);
  cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
  cfg.label_noise = get_or(j, "label_noise", 0.0);
  cfg.extra_indicative = get_or(j, "extra_indicative", defaults.extra_indicative);
  if (j.contains("diseases")) {
    for (const auto& dj : j.at("diseases")) {
      DiseaseSpec d;
      d.name = dj.at("name").get<std::string>();
      d.prevalence = get_or(dj, "prevalence", 0.3);
      d.both_given_present = get_or(dj, "both_given_present", 0.3);
      if (dj.contains("templates"))
        for (const auto& tj : dj.at("templates"))
          d.templates.push_back(indicative_from_json(tj));
      cfg.diseases.push_back(std::move(d));
    }
  } else {
    cfg.diseases = defaults.diseases;
  }
  if (j.contains("template_pool")) {
    for (const auto& tj : j.at("template_pool")) {
      AsymptomaticTemplate t;
      t.text = tj.at("text").get<std::string>();
      t.section = section_from_string(tj.value("section", std::string("ER")));
      t.target_frequency = get_or(tj, "target_frequency", 0.5);
      cfg.template_pool.push_back(std::move(t));
    }
  } else {
    cfg.template_pool = defaults.template_pool;
  }
  if (j.contains("fillers")) {
    for (const auto& fj : j.at("fillers")) {
      FillerTemplate f;
      f.text = fj.at("text").get<std::string>();
      f.section = section_from_string(fj.value("section", std::string("CC")));
      f.frequency = get_or(fj, "frequency", 0.5);
      cfg.fillers.push_back(std::move(f));
    }
  } else {
    cfg.fillers = defaults.fillers;
  }
  return cfg;
}

ModelConfig model_config_from_json(const ojson& j, const ModelConfig& base) {
  ModelConfig c = base;
  c.d = get_or(j, "d", c.d);
  c.n_word_layers = get_or(j, "n_word_layers", c.n_word_layers);
  c.n_heads = get_or(j, "n_heads", c.n_heads);
  c.max_tokens_per_sentence =
      get_or(j, "max_tokens_per_sentence", c.max_tokens_per_sentence);
  c.max_sentences = get_or(j, "max_sentences", c.max_sentences);
  c.max_tokens_flat = get_or(j, "max_tokens_flat", c.max_tokens_flat);
  c.dropout = get_or(j, "dropout", c.dropout);
  return c;
}

TrainConfig train_config_from_json(const ojson& j, const TrainConfig& base) {
  TrainConfig c = base;
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.dropout = get_or(j, "dropout", c.dropout);
  c.max_epochs = get_or(j, "max_epochs", c.max_epochs);
  c.seed = get_or(j, "seed", c.seed);
  c.clip_norm = get_or(j, "clip_norm", c.clip_norm);
  c.select_metric = get_or(j, "select_metric", c.select_metric);
  return c;
}

}  // namespace

GenConfig gen_config_from_json_text(const std::string& json_text) {
  ojson j;
  try {
    j = ojson::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("gen config: ") + e.what());
  }
  return gen_config_from_json(j);
}

PipelineConfig default_pipeline_config() {
  PipelineConfig cfg;
  cfg.gen = default_gen_config();
  cfg.model.d = 48;
  cfg.model.n_word_layers = 2;
  cfg.model.n_heads = 4;
  cfg.train.max_epochs = 20;
  return cfg;
}

PipelineConfig parse_pipeline_config(const std::string& json_text) {
  ojson j;
  try {
    j = ojson::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  PipelineConfig cfg = default_pipeline_config();
  cfg.corpus_path = get_or(j, "corpus", std::string());
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
  bool gen_seed_given = j.contains("gen") && j.at("gen").contains("seed");
  bool train_seed_given = j.contains("train") && j.at("train").contains("seed");
  if (j.contains("gen")) cfg.gen = gen_config_from_json(j.at("gen"));
  if (j.contains("preprocess")) {
    const ojson& p = j.at("preprocess");
    cfg.preprocess.threshold_b =
        get_or(p, "threshold_b", cfg.preprocess.threshold_b);
    cfg.template_lexicon_path = get_or(p, "template_lexicon", std::string());
  }
  if (j.contains("model"))
    cfg.model = model_config_from_json(j.at("model"), cfg.model);
  if (j.contains("train"))
    cfg.train = train_config_from_json(j.at("train"), cfg.train);
  if (j.contains("split")) {
    const ojson& s = j.at("split");
    cfg.split.train = get_or(s, "train", cfg.split.train);
    cfg.split.val = get_or(s, "val", cfg.split.val);
    cfg.split.test = get_or(s, "test", cfg.split.test);
  }
  cfg.train.threshold_b = cfg.preprocess.threshold_b;
  // section seeds derive from the single top-level seed unless given
  if (!gen_seed_given) cfg.gen.seed = derive_seed(cfg.seed, 0xa1);
  if (!train_seed_given) cfg.train.seed = derive_seed(cfg.seed, 0xa2);
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pipeline_config(ss.str());
}

void apply_seed(PipelineConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.gen.seed = derive_seed(seed, 0xa1);
  cfg.train.seed = derive_seed(seed, 0xa2);
}

}  // namespace eyedx
