#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eyedx/model.hpp"
#include "eyedx/preprocess.hpp"

namespace eyedx {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  int batch_size = 32;
  double dropout = 0.1;
  int max_epochs = 50;
  std::uint64_t seed = 1;
  double threshold_b = 0.1;  // preprocessing threshold, kept for provenance
  double clip_norm = 0.0;    // 0 disables gradient clipping
  std::string select_metric = "macro_auc";
};

void validate(const TrainConfig& cfg);

// sum over labels of -[y log p + (1-y) log(1-p)], p clamped to [1e-7, 1-1e-7]
double bce_loss(const std::vector<float>& probs,
                const std::vector<std::uint8_t>& labels);

// Gradients aligned with the canonical tensor order of for_each_tensor.
using GradStore = std::vector<Tensor<float>>;
GradStore zero_grads(const ModelParams& params);

struct AdamState {
  std::vector<Tensor<float>> m, v;
  std::int64_t step = 0;
};
AdamState init_adam_state(const ModelParams& params);

// Decoupled weight decay update with bias correction
// (beta1 0.9, beta2 0.999, eps 1e-8):
//   theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
void optimizer_step(ModelParams& params, const GradStore& grads,
                    AdamState& state, const TrainConfig& cfg);

struct TrainHistory {
  std::vector<double> train_loss;     // per epoch, mean over documents
  std::vector<double> val_macro_auc;  // per epoch; empty if no val split
  int best_epoch = -1;                // argmax of the selection metric
};

struct Checkpoint {
  ModelParams params;
  Vocabulary vocab;
  std::vector<std::string> disease_names;
  Variant variant = Variant::full;
  TrainConfig train_cfg;
  int best_epoch = -1;
  double best_val_metric = 0.0;
};

// epoch index, mean train loss, validation macro-AUC (NaN without val docs)
using EpochCallback = std::function<void(int, double, double)>;

// Shuffles per epoch by seed, accumulates gradients over each batch
// (sum, then mean), steps the optimizer once per batch, and returns the
// parameters of the best validation macro-AUC epoch. With an empty val
// split the final epoch is kept.
std::pair<Checkpoint, TrainHistory> train_loop(
    const TrainConfig& cfg, const ModelConfig& model_cfg,
    const Vocabulary& vocab, const std::vector<MonocularDocument>& train_docs,
    const std::vector<MonocularDocument>& val_docs,
    Variant variant = Variant::full,
    std::vector<std::string> disease_names = {},
    const EpochCallback& on_epoch = {});

// Directory layout: manifest.json + params.bin (row-major IEEE-754 binary32,
// little-endian, tensors in manifest order).
void save_checkpoint(const Checkpoint& ckpt, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace eyedx
