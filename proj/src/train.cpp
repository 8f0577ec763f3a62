#include "eyedx/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "eyedx/eval.hpp"

namespace eyedx {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kProbClamp = 1e-7;
constexpr int kCheckpointVersion = 1;
}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.learning_rate <= 0.0) throw ConfigError("train: learning rate > 0");
  if (cfg.weight_decay < 0.0) throw ConfigError("train: weight decay >= 0");
  if (cfg.batch_size < 1) throw ConfigError("train: batch size >= 1");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
    throw ConfigError("train: dropout in [0,1)");
  if (cfg.max_epochs < 1) throw ConfigError("train: max_epochs >= 1");
  if (cfg.threshold_b < 0.0 || cfg.threshold_b > 1.0)
    throw ConfigError("train: threshold B in [0,1]");
  if (cfg.clip_norm < 0.0) throw ConfigError("train: clip_norm >= 0");
}

double bce_loss(const std::vector<float>& probs,
                const std::vector<std::uint8_t>& labels) {
  if (probs.size() != labels.size())
    throw ShapeError("bce_loss: " + std::to_string(probs.size()) +
                     " probabilities vs " + std::to_string(labels.size()) +
                     " labels");
  double loss = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double p = std::clamp(static_cast<double>(probs[i]), kProbClamp,
                          1.0 - kProbClamp);
    loss -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return loss;
}

GradStore zero_grads(const ModelParams& params) {
  GradStore grads;
  grads.reserve(tensor_count(params.cfg));
  for_each_tensor(params, [&](const std::string&, const Tensor<float>& t) {
    grads.emplace_back(t.rows(), t.cols());
  });
  return grads;
}

AdamState init_adam_state(const ModelParams& params) {
  AdamState s;
  s.m = zero_grads(params);
  s.v = zero_grads(params);
  return s;
}

void optimizer_step(ModelParams& params, const GradStore& grads,
                    AdamState& state, const TrainConfig& cfg) {
  validate(cfg);
  if (grads.size() != state.m.size())
    throw ShapeError("optimizer_step: gradient store size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  std::size_t ti = 0;
  for_each_tensor(params, [&](const std::string&, Tensor<float>& t) {
    const Tensor<float>& g = grads[ti];
    Tensor<float>& m = state.m[ti];
    Tensor<float>& v = state.v[ti];
    if (!g.same_shape(t))
      throw ShapeError("optimizer_step: gradient shape mismatch");
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double gi = g[i];
      const double mi = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
      const double vi = kBeta2 * v[i] + (1.0 - kBeta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      const double theta = t[i];
      t[i] = static_cast<float>(theta -
                                cfg.learning_rate * mhat /
                                    (std::sqrt(vhat) + kAdamEps) -
                                cfg.learning_rate * cfg.weight_decay * theta);
    }
    ++ti;
  });
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

std::pair<Checkpoint, TrainHistory> train_loop(
    const TrainConfig& cfg, const ModelConfig& model_cfg,
    const Vocabulary& vocab, const std::vector<MonocularDocument>& train_docs,
    const std::vector<MonocularDocument>& val_docs, Variant variant,
    std::vector<std::string> disease_names, const EpochCallback& on_epoch) {
  validate(cfg);
  if (train_docs.empty()) throw EmptyInputError("train_loop: no documents");
  ModelConfig mcfg = model_cfg;
  mcfg.dropout = cfg.dropout;
  mcfg.vocab_size = vocab.size();
  validate(mcfg);
  for (const MonocularDocument& d : train_docs)
    if (static_cast<int>(d.labels.size()) != mcfg.n_labels)
      throw ConfigError("train_loop: document label width " +
                        std::to_string(d.labels.size()) + " != n_labels " +
                        std::to_string(mcfg.n_labels));

  ModelParams params = init_params(mcfg, derive_seed(cfg.seed, 0x1111));
  AdamState adam = init_adam_state(params);
  TrainHistory history;

  ModelParams best_params = params;
  double best_metric = -1.0;
  int best_epoch = -1;

  const std::size_t n = train_docs.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 0x2222, epoch));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double epoch_loss = 0;
    std::size_t pos = 0;
    while (pos < n) {
      const std::size_t batch_n =
          std::min<std::size_t>(cfg.batch_size, n - pos);
      GradStore grads = zero_grads(params);
      for (std::size_t k = 0; k < batch_n; ++k) {
        const MonocularDocument& doc = train_docs[order[pos + k]];
        Rng drop_rng(derive_seed(cfg.seed, 0x3333 + epoch, pos + k));
        Tape<float> tape;
        BoundParams<float> bound = bind_params(tape, params);
        ForwardNodes<float> f = build_forward(tape, bound, mcfg, doc.sentences,
                                              vocab, variant, true, &drop_rng);
        Var<float> loss = bce_sum(f.probs, doc.labels, kProbClamp);
        epoch_loss += tape.value(loss.id)[0];
        tape.backward(loss);
        for (std::size_t ti = 0; ti < bound.leaf_ids.size(); ++ti) {
          const Tensor<float>& g = tape.grad_ref(bound.leaf_ids[ti]);
          Tensor<float>& acc = grads[ti];
          for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
        }
      }
      const float inv = 1.0f / static_cast<float>(batch_n);
      for (Tensor<float>& g : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= inv;
      if (cfg.clip_norm > 0.0) {
        double sq = 0;
        for (const Tensor<float>& g : grads)
          for (std::size_t i = 0; i < g.numel(); ++i)
            sq += static_cast<double>(g[i]) * g[i];
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
          const float sc = static_cast<float>(cfg.clip_norm / norm);
          for (Tensor<float>& g : grads)
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= sc;
        }
      }
      optimizer_step(params, grads, adam, cfg);
      pos += batch_n;
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(n));

    double val_auc = std::numeric_limits<double>::quiet_NaN();
    if (!val_docs.empty()) {
      val_auc = validation_macro_auc(params, mcfg, vocab, val_docs, variant);
      history.val_macro_auc.push_back(val_auc);
      if (val_auc > best_metric) {
        best_metric = val_auc;
        best_epoch = epoch;
        best_params = params;
      }
    }
    if (on_epoch) on_epoch(epoch, history.train_loss.back(), val_auc);
  }

  if (best_epoch < 0) {  // no validation split: keep the final parameters
    best_params = params;
    best_epoch = cfg.max_epochs - 1;
    best_metric = 0.0;
  }
  history.best_epoch = best_epoch;

  Checkpoint ckpt;
  ckpt.params = std::move(best_params);
  ckpt.vocab = vocab;
  ckpt.disease_names = std::move(disease_names);
  ckpt.variant = variant;
  ckpt.train_cfg = cfg;
  ckpt.best_epoch = best_epoch;
  ckpt.best_val_metric = best_metric;
  return {std::move(ckpt), std::move(history)};
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return __builtin_bswap32(v);
}

void write_f32(std::ofstream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  bits = to_le(bits);
  out.write(reinterpret_cast<const char*>(&bits), 4);
}

float read_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  bits = to_le(bits);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

ojson model_config_to_json(const ModelConfig& c) {
  ojson j;
  j["d"] = c.d;
  j["n_word_layers"] = c.n_word_layers;
  j["n_heads"] = c.n_heads;
  j["n_labels"] = c.n_labels;
  j["vocab_size"] = c.vocab_size;
  j["max_tokens_per_sentence"] = c.max_tokens_per_sentence;
  j["max_sentences"] = c.max_sentences;
  j["max_tokens_flat"] = c.max_tokens_flat;
  j["dropout"] = c.dropout;
  j["n_sentence_layers"] = c.n_sentence_layers;
  return j;
}

ModelConfig model_config_from_json(const ojson& j) {
  ModelConfig c;
  c.d = j.at("d").get<int>();
  c.n_word_layers = j.at("n_word_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_labels = j.at("n_labels").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_tokens_per_sentence = j.at("max_tokens_per_sentence").get<int>();
  c.max_sentences = j.at("max_sentences").get<int>();
  c.max_tokens_flat = j.at("max_tokens_flat").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.n_sentence_layers = j.at("n_sentence_layers").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
  fs::create_directories(dir);
  ojson manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["model_config"] = model_config_to_json(ckpt.params.cfg);
  ojson tensors = ojson::array();
  std::size_t total = 0;
  for_each_tensor(ckpt.params,
                  [&](const std::string& name, const Tensor<float>& t) {
                    ojson tj;
                    tj["name"] = name;
                    tj["shape"] = {t.rows(), t.cols()};
                    tensors.push_back(std::move(tj));
                    total += t.numel();
                  });
  manifest["tensors"] = std::move(tensors);
  manifest["vocab"] = ckpt.vocab.content_tokens();
  manifest["diseases"] = ckpt.disease_names;
  ojson meta;
  meta["variant"] = to_string(ckpt.variant);
  meta["seed"] = ckpt.train_cfg.seed;
  meta["learning_rate"] = ckpt.train_cfg.learning_rate;
  meta["weight_decay"] = ckpt.train_cfg.weight_decay;
  meta["batch_size"] = ckpt.train_cfg.batch_size;
  meta["dropout"] = ckpt.train_cfg.dropout;
  meta["max_epochs"] = ckpt.train_cfg.max_epochs;
  meta["threshold_b"] = ckpt.train_cfg.threshold_b;
  meta["clip_norm"] = ckpt.train_cfg.clip_norm;
  meta["best_epoch"] = ckpt.best_epoch;
  meta["best_val_metric"] = ckpt.best_val_metric;
  manifest["metadata"] = std::move(meta);

  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ofstream mout(mpath);
  if (!mout) throw IoError("cannot write '" + mpath.string() + "'");
  mout << manifest.dump(2) << '\n';
  mout.close();

  const fs::path bpath = fs::path(dir) / "params.bin";
  std::ofstream bout(bpath, std::ios::binary);
  if (!bout) throw IoError("cannot write '" + bpath.string() + "'");
  for_each_tensor(ckpt.params,
                  [&](const std::string&, const Tensor<float>& t) {
                    for (std::size_t i = 0; i < t.numel(); ++i)
                      write_f32(bout, t[i]);
                  });
  bout.close();
  if (!bout) throw IoError("write to '" + bpath.string() + "' failed");
  (void)total;
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream min(mpath);
  if (!min) throw IoError("cannot read '" + mpath.string() + "'");
  ojson manifest;
  try {
    manifest = ojson::parse(min);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptCheckpointError(std::string("manifest: ") + e.what());
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"].get<int>() != kCheckpointVersion)
    throw VersionError("unsupported checkpoint format version");

  Checkpoint ckpt;
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(manifest.at("model_config"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(std::string("model_config: ") + e.what());
  }
  // allocate tensors from config, then verify the manifest agrees
  ckpt.params = init_params(cfg, 0);
  std::vector<std::pair<std::string, std::pair<int, int>>> expected;
  std::size_t total = 0;
  for_each_tensor(ckpt.params,
                  [&](const std::string& name, const Tensor<float>& t) {
                    expected.push_back({name, {t.rows(), t.cols()}});
                    total += t.numel();
                  });
  const auto& tj = manifest.at("tensors");
  if (tj.size() != expected.size())
    throw CorruptCheckpointError("manifest tensor count mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tj[i].at("name").get<std::string>() != expected[i].first ||
        tj[i].at("shape")[0].get<int>() != expected[i].second.first ||
        tj[i].at("shape")[1].get<int>() != expected[i].second.second)
      throw CorruptCheckpointError("manifest tensor '" + expected[i].first +
                                   "' does not match the model config");
  }

  const fs::path bpath = fs::path(dir) / "params.bin";
  std::ifstream bin(bpath, std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("cannot read '" + bpath.string() + "'");
  const std::size_t fsize = static_cast<std::size_t>(bin.tellg());
  if (fsize != total * 4)
    throw CorruptCheckpointError(
        "params.bin holds " + std::to_string(fsize) + " bytes, expected " +
        std::to_string(total * 4));
  bin.seekg(0);
  std::vector<char> blob(fsize);
  bin.read(blob.data(), static_cast<std::streamsize>(fsize));
  if (!bin) throw CorruptCheckpointError("params.bin read failed");
  std::size_t off = 0;
  for_each_tensor(ckpt.params, [&](const std::string&, Tensor<float>& t) {
    for (std::size_t i = 0; i < t.numel(); ++i, off += 4)
      t[i] = read_f32(blob.data() + off);
  });

  std::vector<std::string> content;
  for (const auto& v : manifest.at("vocab"))
    content.push_back(v.get<std::string>());
  ckpt.vocab = Vocabulary(std::move(content));
  if (ckpt.vocab.size() != cfg.vocab_size)
    throw CorruptCheckpointError("vocabulary size does not match model config");
  for (const auto& v : manifest.at("diseases"))
    ckpt.disease_names.push_back(v.get<std::string>());

  const auto& meta = manifest.at("metadata");
  ckpt.variant = variant_from_string(meta.at("variant").get<std::string>());
  ckpt.train_cfg.seed = meta.at("seed").get<std::uint64_t>();
  ckpt.train_cfg.learning_rate = meta.at("learning_rate").get<double>();
  ckpt.train_cfg.weight_decay = meta.at("weight_decay").get<double>();
  ckpt.train_cfg.batch_size = meta.at("batch_size").get<int>();
  ckpt.train_cfg.dropout = meta.at("dropout").get<double>();
  ckpt.train_cfg.max_epochs = meta.at("max_epochs").get<int>();
  ckpt.train_cfg.threshold_b = meta.at("threshold_b").get<double>();
  ckpt.train_cfg.clip_norm = meta.at("clip_norm").get<double>();
  ckpt.best_epoch = meta.at("best_epoch").get<int>();
  ckpt.best_val_metric = meta.at("best_val_metric").get<double>();
  return ckpt;
}

}  // namespace eyedx
