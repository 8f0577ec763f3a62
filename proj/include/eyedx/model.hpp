#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eyedx/autodiff.hpp"
#include "eyedx/corpus.hpp"
#include "eyedx/preprocess.hpp"
#include "eyedx/tensor.hpp"

namespace eyedx {

struct ModelConfig {
  int d = 64;              // embedding dimension
  int n_word_layers = 2;   // word-level transformer depth
  int n_heads = 4;
  int n_labels = 0;
  int vocab_size = 0;
  int max_tokens_per_sentence = 64;
  int max_sentences = 64;
  int max_tokens_flat = 512;
  double dropout = 0.1;
  int n_sentence_layers = 1;  // fixed by design
};

void validate(const ModelConfig& cfg);

// Ablation variants. wo_p additionally changes the data path (no filtering,
// no eye split, 2L outputs); that part lives in eval.
enum class Variant { full, wo_p, wo_c, wo_s, wo_l, wo_w };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

template <typename S>
struct LayerParamsT {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ln1_gain, ln1_bias;
  Tensor<S> ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor<S> ln2_gain, ln2_bias;
};

// All learnable tensors plus the fixed sinusoidal positional encoding.
template <typename S>
struct ModelParamsT {
  ModelConfig cfg;
  Tensor<S> token_embedding;   // (vocab, d)
  Tensor<S> positional;        // (d, max_pos); fixed, not trained
  std::vector<LayerParamsT<S>> word_layers;
  LayerParamsT<S> sentence_layer;
  Tensor<S> label_embeddings;  // (L, d), row l is e_l
  Tensor<S> head_weight;       // (L, d), one affine head per disease
  Tensor<S> head_bias;         // (L, 1)

  ModelParamsT<double> to_double() const;
};

using ModelParams = ModelParamsT<float>;

// Enumerates the trainable tensors in canonical (checkpoint) order.
template <typename S, typename F>
void for_each_tensor(ModelParamsT<S>& p, F&& f) {
  f("token_embedding", p.token_embedding);
  auto layer = [&f](const std::string& prefix, LayerParamsT<S>& l) {
    f(prefix + ".wq", l.wq);
    f(prefix + ".bq", l.bq);
    f(prefix + ".wk", l.wk);
    f(prefix + ".bk", l.bk);
    f(prefix + ".wv", l.wv);
    f(prefix + ".bv", l.bv);
    f(prefix + ".wo", l.wo);
    f(prefix + ".bo", l.bo);
    f(prefix + ".ln1_gain", l.ln1_gain);
    f(prefix + ".ln1_bias", l.ln1_bias);
    f(prefix + ".ff_w1", l.ff_w1);
    f(prefix + ".ff_b1", l.ff_b1);
    f(prefix + ".ff_w2", l.ff_w2);
    f(prefix + ".ff_b2", l.ff_b2);
    f(prefix + ".ln2_gain", l.ln2_gain);
    f(prefix + ".ln2_bias", l.ln2_bias);
  };
  for (std::size_t i = 0; i < p.word_layers.size(); ++i)
    layer("word." + std::to_string(i), p.word_layers[i]);
  layer("sentence.0", p.sentence_layer);
  f("label_embeddings", p.label_embeddings);
  f("head_weight", p.head_weight);
  f("head_bias", p.head_bias);
}

template <typename S, typename F>
void for_each_tensor(const ModelParamsT<S>& p, F&& f) {
  for_each_tensor(const_cast<ModelParamsT<S>&>(p),
                  [&f](const std::string& n, Tensor<S>& t) {
                    f(n, static_cast<const Tensor<S>&>(t));
                  });
}

std::size_t tensor_count(const ModelConfig& cfg);

// Fan-based uniform init for weight matrices, zero biases, unit gains,
// 0.02-std normals for token and label embeddings. Deterministic per seed.
template <typename S>
ModelParamsT<S> init_params_t(const ModelConfig& cfg, std::uint64_t seed);
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Tokenization (vocabulary ids, type token first, truncation applied)
// ---------------------------------------------------------------------------

std::vector<int> sentence_token_ids(const Sentence& s, const Vocabulary& vocab,
                                    const ModelConfig& cfg);
std::vector<std::vector<int>> document_token_ids(
    const std::vector<Sentence>& sentences, const Vocabulary& vocab,
    const ModelConfig& cfg);
std::vector<int> flat_token_ids(const std::vector<Sentence>& sentences,
                                const Vocabulary& vocab,
                                const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Tape-level graph builders (shared by training, eval and gradient checks)
// ---------------------------------------------------------------------------

template <typename S>
struct BoundLayer {
  AttentionWeights<S> attn;
  Var<S> ln1_gain, ln1_bias, ff_w1, ff_b1, ff_w2, ff_b2, ln2_gain, ln2_bias;
};

template <typename S>
struct BoundParams {
  Var<S> token_embedding;
  std::vector<BoundLayer<S>> word_layers;
  BoundLayer<S> sentence_layer;
  Var<S> label_embeddings, head_weight, head_bias;
  std::vector<int> leaf_ids;  // canonical order; empty when vars came from
                              // an external binder such as grad_check
  const Tensor<S>* positional = nullptr;
};

// Registers every trainable tensor as a tape leaf (canonical order).
template <typename S>
BoundParams<S> bind_params(Tape<S>& tape, const ModelParamsT<S>& p);

// Assembles a BoundParams from vars created elsewhere, in canonical order.
template <typename S>
BoundParams<S> bound_from_vars(const std::vector<Var<S>>& vars,
                               const ModelConfig& cfg,
                               const Tensor<S>* positional);

template <typename S>
Var<S> transformer_layer(Var<S> x, const BoundLayer<S>& layer,
                         const Mask& mask, const ModelConfig& cfg, bool train,
                         Rng* rng);

template <typename S>
Var<S> encode_sentence_ids(Tape<S>& tape, const BoundParams<S>& p,
                           const ModelConfig& cfg, const std::vector<int>& ids,
                           bool train, Rng* rng);

template <typename S>
struct EncodedDocument {
  Var<S> A;  // (d, N) pooled sentence embeddings
  Var<S> C;  // (d, N) contextualized sentence representations
};

template <typename S>
EncodedDocument<S> encode_document_ids(
    Tape<S>& tape, const BoundParams<S>& p, const ModelConfig& cfg,
    const std::vector<std::vector<int>>& sentence_ids, bool skip_sentence_layer,
    bool train, Rng* rng);

template <typename S>
struct LabelAttentionNodes {
  Var<S> alpha;  // (L, N)
  Var<S> V;      // (d, L)
};

template <typename S>
LabelAttentionNodes<S> label_attention_nodes(Var<S> C, Var<S> label_embeddings);

template <typename S>
Var<S> encode_flat_ids(Tape<S>& tape, const BoundParams<S>& p,
                       const ModelConfig& cfg, const std::vector<int>& ids,
                       bool train, Rng* rng);

template <typename S>
struct ForwardNodes {
  Var<S> probs;       // (L, 1)
  Var<S> alpha;       // (L, N); unbound for variants without attention
  Var<S> V;           // (d, L); unbound for variants without attention
  bool has_alpha = false;
  int n_positions = 0;  // trace width (sentences kept, or 1 for flat)
};

template <typename S>
ForwardNodes<S> build_forward(Tape<S>& tape, const BoundParams<S>& p,
                              const ModelConfig& cfg,
                              const std::vector<Sentence>& sentences,
                              const Vocabulary& vocab, Variant variant,
                              bool train, Rng* rng);

// ---------------------------------------------------------------------------
// Value-level API (eval mode unless stated otherwise)
// ---------------------------------------------------------------------------

struct DocumentRepresentation {
  Tensor<float> A;  // (d, N)
  Tensor<float> C;  // (d, N)
};

// L x N attention weights; row l sums to 1. sentence_indices maps trace
// columns back to positions in the original sentence list.
struct AttentionTrace {
  Tensor<float> alpha;
  std::vector<int> sentence_indices;
};

struct Prediction {
  std::vector<float> probs;
  AttentionTrace trace;
  Tensor<float> V;  // (d, L) disease-specific vectors
};

Tensor<float> encode_sentence(const Sentence& s, const ModelParams& params,
                              const Vocabulary& vocab, const ModelConfig& cfg,
                              bool train = false, Rng* rng = nullptr);

DocumentRepresentation encode_document(const std::vector<Sentence>& sentences,
                                       const ModelParams& params,
                                       const Vocabulary& vocab,
                                       const ModelConfig& cfg,
                                       bool train = false, Rng* rng = nullptr);

std::pair<Tensor<float>, AttentionTrace> label_attention(
    const Tensor<float>& C, const Tensor<float>& label_embeddings);

std::vector<float> predict_probs(const Tensor<float>& V,
                                 const Tensor<float>& head_weight,
                                 const Tensor<float>& head_bias);

Tensor<float> encode_flat(const std::vector<Sentence>& sentences,
                          const ModelParams& params, const Vocabulary& vocab,
                          const ModelConfig& cfg, bool train = false,
                          Rng* rng = nullptr);

Prediction forward_monocular(const std::vector<Sentence>& sentences,
                             const ModelParams& params,
                             const Vocabulary& vocab, const ModelConfig& cfg,
                             Variant variant = Variant::full);

inline Prediction forward_monocular(const MonocularDocument& doc,
                                    const ModelParams& params,
                                    const Vocabulary& vocab,
                                    const ModelConfig& cfg,
                                    Variant variant = Variant::full) {
  return forward_monocular(doc.sentences, params, vocab, cfg, variant);
}

}  // namespace eyedx
