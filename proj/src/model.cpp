#include "eyedx/model.hpp"

#include <algorithm>
#include <cmath>

namespace eyedx {

void validate(const ModelConfig& cfg) {
  if (cfg.d < 1) throw ConfigError("model: d must be >= 1");
  if (cfg.n_heads < 1 || cfg.d % cfg.n_heads != 0)
    throw ConfigError("model: d must be divisible by n_heads");
  if (cfg.n_word_layers < 1) throw ConfigError("model: n_word_layers >= 1");
  if (cfg.n_sentence_layers != 1)
    throw ConfigError("model: sentence-level layer count is fixed to 1");
  if (cfg.n_labels < 1) throw ConfigError("model: n_labels >= 1");
  if (cfg.vocab_size < Vocabulary::kFirstContentId)
    throw ConfigError("model: vocab_size too small");
  if (cfg.max_tokens_per_sentence < 1 || cfg.max_sentences < 1 ||
      cfg.max_tokens_flat < 2)
    throw ConfigError("model: truncation limits must be positive");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
    throw ConfigError("model: dropout must be in [0,1)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::wo_p: return "wo_p";
    case Variant::wo_c: return "wo_c";
    case Variant::wo_s: return "wo_s";
    case Variant::wo_l: return "wo_l";
    case Variant::wo_w: return "wo_w";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "wo_p") return Variant::wo_p;
  if (s == "wo_c") return Variant::wo_c;
  if (s == "wo_s") return Variant::wo_s;
  if (s == "wo_l") return Variant::wo_l;
  if (s == "wo_w") return Variant::wo_w;
  throw ConfigError("unknown variant '" + s + "'");
}

std::size_t tensor_count(const ModelConfig& cfg) {
  return 1 + 16 * static_cast<std::size_t>(cfg.n_word_layers + 1) + 3;
}

namespace {

template <typename S>
Tensor<S> sinusoidal_positions(int d, int max_pos) {
  Tensor<S> pe(d, max_pos);
  for (int r = 0; r < d; ++r) {
    const int pair = r / 2 * 2;
    const double w = std::pow(10000.0, -static_cast<double>(pair) / d);
    for (int c = 0; c < max_pos; ++c)
      pe.at(r, c) = static_cast<S>(r % 2 == 0 ? std::sin(c * w)
                                              : std::cos(c * w));
  }
  return pe;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename S>
ModelParamsT<S> init_params_t(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ModelParamsT<S> p;
  p.cfg = cfg;
  const int d = cfg.d, L = cfg.n_labels, h = 4 * cfg.d;
  const int max_pos =
      std::max(cfg.max_tokens_per_sentence + 1, cfg.max_tokens_flat);
  p.positional = sinusoidal_positions<S>(d, max_pos);

  p.token_embedding = Tensor<S>(cfg.vocab_size, d);
  auto alloc_layer = [&](LayerParamsT<S>& l) {
    l.wq = Tensor<S>(d, d);
    l.bq = Tensor<S>(d, 1);
    l.wk = Tensor<S>(d, d);
    l.bk = Tensor<S>(d, 1);
    l.wv = Tensor<S>(d, d);
    l.bv = Tensor<S>(d, 1);
    l.wo = Tensor<S>(d, d);
    l.bo = Tensor<S>(d, 1);
    l.ln1_gain = Tensor<S>(d, 1);
    l.ln1_bias = Tensor<S>(d, 1);
    l.ff_w1 = Tensor<S>(h, d);
    l.ff_b1 = Tensor<S>(h, 1);
    l.ff_w2 = Tensor<S>(d, h);
    l.ff_b2 = Tensor<S>(d, 1);
    l.ln2_gain = Tensor<S>(d, 1);
    l.ln2_bias = Tensor<S>(d, 1);
  };
  p.word_layers.resize(cfg.n_word_layers);
  for (auto& l : p.word_layers) alloc_layer(l);
  alloc_layer(p.sentence_layer);
  p.label_embeddings = Tensor<S>(L, d);
  p.head_weight = Tensor<S>(L, d);
  p.head_bias = Tensor<S>(L, 1);

  Rng rng(derive_seed(seed, 0x696e6974ULL));
  for_each_tensor(p, [&](const std::string& name, Tensor<S>& t) {
    if (name == "token_embedding" || name == "label_embeddings") {
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(0.02 * rng.normal());
    } else if (name == "head_weight") {
      const double lim = std::sqrt(6.0 / (t.cols() + 1));  // d -> 1 heads
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>((2.0 * rng.uniform() - 1.0) * lim);
    } else if (ends_with(name, "gain")) {
      t.fill(S(1));
    } else if (t.cols() == 1) {
      t.fill(S(0));  // biases
    } else {
      const double lim = std::sqrt(6.0 / (t.rows() + t.cols()));
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>((2.0 * rng.uniform() - 1.0) * lim);
    }
  });
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  return init_params_t<float>(cfg, seed);
}

template <typename S>
ModelParamsT<double> ModelParamsT<S>::to_double() const {
  ModelParamsT<double> out;
  out.cfg = cfg;
  out.positional = positional.to_double();
  out.word_layers.resize(word_layers.size());
  out.label_embeddings = label_embeddings.to_double();
  out.head_weight = head_weight.to_double();
  out.head_bias = head_bias.to_double();
  out.token_embedding = token_embedding.to_double();
  auto conv = [](const LayerParamsT<S>& a, LayerParamsT<double>& b) {
    b.wq = a.wq.to_double();
    b.bq = a.bq.to_double();
    b.wk = a.wk.to_double();
    b.bk = a.bk.to_double();
    b.wv = a.wv.to_double();
    b.bv = a.bv.to_double();
    b.wo = a.wo.to_double();
    b.bo = a.bo.to_double();
    b.ln1_gain = a.ln1_gain.to_double();
    b.ln1_bias = a.ln1_bias.to_double();
    b.ff_w1 = a.ff_w1.to_double();
    b.ff_b1 = a.ff_b1.to_double();
    b.ff_w2 = a.ff_w2.to_double();
    b.ff_b2 = a.ff_b2.to_double();
    b.ln2_gain = a.ln2_gain.to_double();
    b.ln2_bias = a.ln2_bias.to_double();
  };
  for (std::size_t i = 0; i < word_layers.size(); ++i)
    conv(word_layers[i], out.word_layers[i]);
  conv(sentence_layer, out.sentence_layer);
  return out;
}

// ---------------------------------------------------------------------------
// tokenization
// ---------------------------------------------------------------------------

std::vector<int> sentence_token_ids(const Sentence& s, const Vocabulary& vocab,
                                    const ModelConfig& cfg) {
  std::vector<int> ids;
  const int n = std::min<int>(static_cast<int>(s.tokens.size()),
                              cfg.max_tokens_per_sentence);
  ids.reserve(n + 1);
  ids.push_back(vocab.type_token_id(s.section));
  for (int i = 0; i < n; ++i) ids.push_back(vocab.encode(s.tokens[i]));
  return ids;
}

std::vector<std::vector<int>> document_token_ids(
    const std::vector<Sentence>& sentences, const Vocabulary& vocab,
    const ModelConfig& cfg) {
  const int n = std::min<int>(static_cast<int>(sentences.size()),
                              cfg.max_sentences);
  std::vector<std::vector<int>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(sentence_token_ids(sentences[i], vocab, cfg));
  return out;
}

std::vector<int> flat_token_ids(const std::vector<Sentence>& sentences,
                                const Vocabulary& vocab,
                                const ModelConfig& cfg) {
  std::vector<int> ids;
  for (const Sentence& s : sentences) {
    if (static_cast<int>(ids.size()) >= cfg.max_tokens_flat) break;
    ids.push_back(vocab.type_token_id(s.section));
    for (const std::string& t : s.tokens) {
      if (static_cast<int>(ids.size()) >= cfg.max_tokens_flat) break;
      ids.push_back(vocab.encode(t));
    }
  }
  return ids;
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

template <typename S>
BoundParams<S> bound_from_vars(const std::vector<Var<S>>& vars,
                               const ModelConfig& cfg,
                               const Tensor<S>* positional) {
  if (vars.size() != tensor_count(cfg))
    throw ShapeError("bound_from_vars: expected " +
                     std::to_string(tensor_count(cfg)) + " tensors, got " +
                     std::to_string(vars.size()));
  std::size_t k = 0;
  auto next = [&]() { return vars[k++]; };
  BoundParams<S> b;
  b.positional = positional;
  b.token_embedding = next();
  auto bind_layer = [&](BoundLayer<S>& l) {
    l.attn.wq = next();
    l.attn.bq = next();
    l.attn.wk = next();
    l.attn.bk = next();
    l.attn.wv = next();
    l.attn.bv = next();
    l.attn.wo = next();
    l.attn.bo = next();
    l.ln1_gain = next();
    l.ln1_bias = next();
    l.ff_w1 = next();
    l.ff_b1 = next();
    l.ff_w2 = next();
    l.ff_b2 = next();
    l.ln2_gain = next();
    l.ln2_bias = next();
  };
  b.word_layers.resize(cfg.n_word_layers);
  for (auto& l : b.word_layers) bind_layer(l);
  bind_layer(b.sentence_layer);
  b.label_embeddings = next();
  b.head_weight = next();
  b.head_bias = next();
  return b;
}

template <typename S>
BoundParams<S> bind_params(Tape<S>& tape, const ModelParamsT<S>& p) {
  std::vector<Var<S>> vars;
  vars.reserve(tensor_count(p.cfg));
  for_each_tensor(p, [&](const std::string&, const Tensor<S>& t) {
    vars.push_back(tape.leaf(t));
  });
  BoundParams<S> b = bound_from_vars(vars, p.cfg, &p.positional);
  for (const Var<S>& v : vars) b.leaf_ids.push_back(v.id);
  return b;
}

namespace {

template <typename S>
Var<S> maybe_dropout(Var<S> x, const ModelConfig& cfg, bool train, Rng* rng) {
  if (!train || cfg.dropout <= 0.0 || rng == nullptr) return x;
  return dropout(x, cfg.dropout, true, *rng);
}

template <typename S>
Var<S> embed_with_positions(Tape<S>& tape, const BoundParams<S>& p,
                            const ModelConfig& cfg, const std::vector<int>& ids,
                            bool train, Rng* rng) {
  Var<S> x = embedding_lookup(p.token_embedding, ids);
  const int T = static_cast<int>(ids.size());
  Tensor<S> pe(cfg.d, T);
  for (int r = 0; r < cfg.d; ++r)
    for (int c = 0; c < T; ++c) pe.at(r, c) = p.positional->at(r, c);
  x = add(x, tape.constant(std::move(pe)));
  return maybe_dropout(x, cfg, train, rng);
}

}  // namespace

template <typename S>
Var<S> transformer_layer(Var<S> x, const BoundLayer<S>& layer,
                         const Mask& mask, const ModelConfig& cfg, bool train,
                         Rng* rng) {
  Var<S> h = multi_head_self_attention(x, layer.attn, mask, cfg.n_heads);
  h = maybe_dropout(h, cfg, train, rng);
  Var<S> x1 = layer_norm_cols(add(x, h), layer.ln1_gain, layer.ln1_bias);
  Var<S> f = affine(layer.ff_w2, relu(affine(layer.ff_w1, x1, layer.ff_b1)),
                    layer.ff_b2);
  f = maybe_dropout(f, cfg, train, rng);
  return layer_norm_cols(add(x1, f), layer.ln2_gain, layer.ln2_bias);
}

template <typename S>
Var<S> encode_sentence_ids(Tape<S>& tape, const BoundParams<S>& p,
                           const ModelConfig& cfg, const std::vector<int>& ids,
                           bool train, Rng* rng) {
  Var<S> x = embed_with_positions(tape, p, cfg, ids, train, rng);
  for (const BoundLayer<S>& l : p.word_layers)
    x = transformer_layer(x, l, Mask{}, cfg, train, rng);
  // the type-token position participates in the average
  return masked_mean_pool(x, Mask{});
}

template <typename S>
EncodedDocument<S> encode_document_ids(
    Tape<S>& tape, const BoundParams<S>& p, const ModelConfig& cfg,
    const std::vector<std::vector<int>>& sentence_ids, bool skip_sentence_layer,
    bool train, Rng* rng) {
  std::vector<Var<S>> cols;
  cols.reserve(sentence_ids.size());
  for (const std::vector<int>& ids : sentence_ids)
    cols.push_back(encode_sentence_ids(tape, p, cfg, ids, train, rng));
  EncodedDocument<S> out;
  out.A = concat_cols(cols);
  // sentences are treated as a set: no positional encoding at this level
  out.C = skip_sentence_layer
              ? out.A
              : transformer_layer(out.A, p.sentence_layer, Mask{}, cfg, train,
                                  rng);
  return out;
}

template <typename S>
LabelAttentionNodes<S> label_attention_nodes(Var<S> C,
                                             Var<S> label_embeddings) {
  const int d = C.value().rows();
  LabelAttentionNodes<S> out;
  Var<S> scores =
      scale(matmul(label_embeddings, C), 1.0 / std::sqrt(static_cast<double>(d)));
  out.alpha = softmax_rows(scores);
  out.V = matmul_nt(C, out.alpha);
  return out;
}

template <typename S>
Var<S> encode_flat_ids(Tape<S>& tape, const BoundParams<S>& p,
                       const ModelConfig& cfg, const std::vector<int>& ids,
                       bool train, Rng* rng) {
  Var<S> x = embed_with_positions(tape, p, cfg, ids, train, rng);
  for (const BoundLayer<S>& l : p.word_layers)
    x = transformer_layer(x, l, Mask{}, cfg, train, rng);
  return masked_mean_pool(x, Mask{});
}

template <typename S>
ForwardNodes<S> build_forward(Tape<S>& tape, const BoundParams<S>& p,
                              const ModelConfig& cfg,
                              const std::vector<Sentence>& sentences,
                              const Vocabulary& vocab, Variant variant,
                              bool train, Rng* rng) {
  ForwardNodes<S> out;
  switch (variant) {
    case Variant::full:
    case Variant::wo_p:
    case Variant::wo_s: {
      auto ids = document_token_ids(sentences, vocab, cfg);
      auto enc = encode_document_ids(tape, p, cfg, ids,
                                     variant == Variant::wo_s, train, rng);
      auto la = label_attention_nodes(enc.C, p.label_embeddings);
      out.probs = sigmoid(per_label_affine(la.V, p.head_weight, p.head_bias));
      out.alpha = la.alpha;
      out.V = la.V;
      out.has_alpha = true;
      out.n_positions = static_cast<int>(ids.size());
      return out;
    }
    case Variant::wo_c: {
      auto ids = flat_token_ids(sentences, vocab, cfg);
      Var<S> v = encode_flat_ids(tape, p, cfg, ids, train, rng);
      auto la = label_attention_nodes(v, p.label_embeddings);
      out.probs = sigmoid(per_label_affine(la.V, p.head_weight, p.head_bias));
      out.alpha = la.alpha;
      out.V = la.V;
      out.has_alpha = true;
      out.n_positions = 1;
      return out;
    }
    case Variant::wo_l: {
      auto ids = document_token_ids(sentences, vocab, cfg);
      auto enc = encode_document_ids(tape, p, cfg, ids, false, train, rng);
      Var<S> pooled = masked_mean_pool(enc.C, Mask{});
      out.probs = sigmoid(affine(p.head_weight, pooled, p.head_bias));
      out.n_positions = static_cast<int>(ids.size());
      return out;
    }
    case Variant::wo_w: {
      auto ids = flat_token_ids(sentences, vocab, cfg);
      Var<S> v = encode_flat_ids(tape, p, cfg, ids, train, rng);
      out.probs = sigmoid(affine(p.head_weight, v, p.head_bias));
      out.n_positions = 1;
      return out;
    }
  }
  throw ConfigError("unknown variant");
}

// ---------------------------------------------------------------------------
// value-level wrappers
// ---------------------------------------------------------------------------

Tensor<float> encode_sentence(const Sentence& s, const ModelParams& params,
                              const Vocabulary& vocab, const ModelConfig& cfg,
                              bool train, Rng* rng) {
  Tape<float> tape;
  BoundParams<float> p = bind_params(tape, params);
  Var<float> a = encode_sentence_ids(tape, p, cfg,
                                     sentence_token_ids(s, vocab, cfg), train,
                                     rng);
  return a.value();
}

DocumentRepresentation encode_document(const std::vector<Sentence>& sentences,
                                       const ModelParams& params,
                                       const Vocabulary& vocab,
                                       const ModelConfig& cfg, bool train,
                                       Rng* rng) {
  Tape<float> tape;
  BoundParams<float> p = bind_params(tape, params);
  auto enc = encode_document_ids(tape, p, cfg,
                                 document_token_ids(sentences, vocab, cfg),
                                 false, train, rng);
  return DocumentRepresentation{enc.A.value(), enc.C.value()};
}

std::pair<Tensor<float>, AttentionTrace> label_attention(
    const Tensor<float>& C, const Tensor<float>& label_embeddings) {
  Tape<float> tape;
  Var<float> c = tape.leaf(C);
  Var<float> e = tape.leaf(label_embeddings);
  auto la = label_attention_nodes(c, e);
  AttentionTrace trace;
  trace.alpha = la.alpha.value();
  trace.sentence_indices.resize(C.cols());
  for (int i = 0; i < C.cols(); ++i) trace.sentence_indices[i] = i;
  return {la.V.value(), std::move(trace)};
}

std::vector<float> predict_probs(const Tensor<float>& V,
                                 const Tensor<float>& head_weight,
                                 const Tensor<float>& head_bias) {
  Tape<float> tape;
  Var<float> z = per_label_affine(tape.leaf(V), tape.leaf(head_weight),
                                  tape.leaf(head_bias));
  Var<float> probs = sigmoid(z);
  const Tensor<float>& pv = probs.value();
  return std::vector<float>(pv.data(), pv.data() + pv.numel());
}

Tensor<float> encode_flat(const std::vector<Sentence>& sentences,
                          const ModelParams& params, const Vocabulary& vocab,
                          const ModelConfig& cfg, bool train, Rng* rng) {
  Tape<float> tape;
  BoundParams<float> p = bind_params(tape, params);
  Var<float> v = encode_flat_ids(tape, p, cfg,
                                 flat_token_ids(sentences, vocab, cfg), train,
                                 rng);
  return v.value();
}

Prediction forward_monocular(const std::vector<Sentence>& sentences,
                             const ModelParams& params,
                             const Vocabulary& vocab, const ModelConfig& cfg,
                             Variant variant) {
  Tape<float> tape;
  BoundParams<float> p = bind_params(tape, params);
  ForwardNodes<float> f =
      build_forward(tape, p, cfg, sentences, vocab, variant, false, nullptr);
  Prediction pred;
  const Tensor<float>& pv = f.probs.value();
  pred.probs.assign(pv.data(), pv.data() + pv.numel());
  if (f.has_alpha) {
    pred.trace.alpha = f.alpha.value();
    pred.V = f.V.value();
  } else {
    pred.trace.alpha = Tensor<float>(cfg.n_labels, f.n_positions);
    pred.trace.alpha.fill(1.0f / static_cast<float>(f.n_positions));
  }
  pred.trace.sentence_indices.resize(f.n_positions);
  for (int i = 0; i < f.n_positions; ++i) pred.trace.sentence_indices[i] = i;
  return pred;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define EYEDX_INSTANTIATE_MODEL(S)                                             \
  template ModelParamsT<S> init_params_t<S>(const ModelConfig&,                \
                                            std::uint64_t);                    \
  template ModelParamsT<double> ModelParamsT<S>::to_double() const;            \
  template BoundParams<S> bound_from_vars<S>(const std::vector<Var<S>>&,       \
                                             const ModelConfig&,               \
                                             const Tensor<S>*);                \
  template BoundParams<S> bind_params<S>(Tape<S>&, const ModelParamsT<S>&);    \
  template Var<S> transformer_layer<S>(Var<S>, const BoundLayer<S>&,           \
                                       const Mask&, const ModelConfig&, bool,  \
                                       Rng*);                                  \
  template Var<S> encode_sentence_ids<S>(Tape<S>&, const BoundParams<S>&,      \
                                         const ModelConfig&,                   \
                                         const std::vector<int>&, bool, Rng*); \
  template EncodedDocument<S> encode_document_ids<S>(                          \
      Tape<S>&, const BoundParams<S>&, const ModelConfig&,                     \
      const std::vector<std::vector<int>>&, bool, bool, Rng*);                 \
  template LabelAttentionNodes<S> label_attention_nodes<S>(Var<S>, Var<S>);    \
  template Var<S> encode_flat_ids<S>(Tape<S>&, const BoundParams<S>&,          \
                                     const ModelConfig&,                       \
                                     const std::vector<int>&, bool, Rng*);     \
  template ForwardNodes<S> build_forward<S>(                                   \
      Tape<S>&, const BoundParams<S>&, const ModelConfig&,                     \
      const std::vector<Sentence>&, const Vocabulary&, Variant, bool, Rng*);

EYEDX_INSTANTIATE_MODEL(float)
EYEDX_INSTANTIATE_MODEL(double)

#undef EYEDX_INSTANTIATE_MODEL

}  // namespace eyedx
