#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "eyedx/common.hpp"
#include "eyedx/tensor.hpp"

namespace eyedx {

// Boolean mask over positions (columns). Empty means all positions active.
using Mask = std::vector<std::uint8_t>;

template <typename S>
class Tape;

// Handle to a node on a tape. Cheap to copy; owns nothing.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;
  const Tensor<S>& value() const;
};

// Reverse-mode tape. Nodes are recorded in creation order, which is a
// topological order of the computation graph; backward() walks it in
// reverse. Gradients accumulate additively at fan-out points. A tape is
// confined to a single thread; parameters live outside the tape and are
// registered as leaves per forward pass.
template <typename S>
class Tape {
 public:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool track = true;  // false for constants: no gradient kept
    std::function<void(Tape&, int)> back;  // empty for leaves/constants
  };

  // Registers an input that should receive a gradient.
  Var<S> leaf(Tensor<S> value) {
    return wrap(push(std::move(value), true, nullptr));
  }

  // Registers a value gradients do not flow into (e.g. positional encodings).
  Var<S> constant(Tensor<S> value) {
    return wrap(push(std::move(value), false, nullptr));
  }

  const Tensor<S>& value(int id) const { return nodes_[id].value; }

  // Gradient of the last backward() w.r.t. node `id`; zeros if none flowed.
  Tensor<S> grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty() && n.value.numel() > 0)
      return Tensor<S>(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(const Var<S>& loss);

  std::size_t size() const { return nodes_.size(); }

  // --- used by primitive implementations ---
  int push(Tensor<S> value, bool track, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.track = track;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  Var<S> wrap(int id) { return Var<S>{this, id}; }
  Tensor<S>& grad_ref(int id) { return nodes_[id].grad; }
  bool tracked(int id) const { return nodes_[id].track; }

 private:
  std::vector<Node> nodes_;
};

template <typename S>
inline const Tensor<S>& Var<S>::value() const {
  return tape->value(id);
}

// ---------------------------------------------------------------------------
// Differentiable primitives
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b);
template <typename S>
Var<S> mul(Var<S> a, Var<S> b);
template <typename S>
Var<S> scale(Var<S> a, double c);
template <typename S>
Var<S> matmul(Var<S> a, Var<S> b);
// s * aᵀ b  (used for attention scores)
template <typename S>
Var<S> matmul_tn(Var<S> a, Var<S> b, double s = 1.0);
// a bᵀ  (used for attention-weighted mixing)
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b);
// w x + b, bias broadcast over columns; w:(m,k) x:(k,n) b:(m,1)
template <typename S>
Var<S> affine(Var<S> w, Var<S> x, Var<S> b);
template <typename S>
Var<S> relu(Var<S> x);
template <typename S>
Var<S> sigmoid(Var<S> x);
// table:(vocab,d), output column t is row ids[t] of the table, shape (d,T)
template <typename S>
Var<S> embedding_lookup(Var<S> table, const std::vector<int>& ids);
// identity when train is false; otherwise inverted dropout
template <typename S>
Var<S> dropout(Var<S> x, double rate, bool train, Rng& rng);
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& xs);
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& xs);
// rows [r0, r1)
template <typename S>
Var<S> slice_rows(Var<S> x, int r0, int r1);
template <typename S>
Var<S> transpose(Var<S> x);
// row-wise stabilized softmax; mask applies to columns, masked entries get 0
template <typename S>
Var<S> softmax_rows(Var<S> scores, const Mask& mask = {});
// per-column normalization over rows, then gain/bias; gain,bias:(rows,1)
template <typename S>
Var<S> layer_norm_cols(Var<S> x, Var<S> gain, Var<S> bias, double eps = 1e-5);
// mean over unmasked columns, shape (rows,1)
template <typename S>
Var<S> masked_mean_pool(Var<S> x, const Mask& mask = {});
// z_l = sum_i w(l,i) v(i,l) + b(l); v:(d,L) w:(L,d) b:(L,1) -> (L,1)
template <typename S>
Var<S> per_label_affine(Var<S> v, Var<S> w, Var<S> b);
template <typename S>
Var<S> sum_all(Var<S> x);
// -sum_l [y log p + (1-y) log(1-p)] with p clamped to [eps, 1-eps]
template <typename S>
Var<S> bce_sum(Var<S> probs, const std::vector<std::uint8_t>& labels,
               double eps = 1e-7);

template <typename S>
struct AttentionWeights {
  Var<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product self-attention with per-head scaling 1/sqrt(d/n_heads);
// masked key positions receive zero weight. x:(d,T) -> (d,T).
template <typename S>
Var<S> multi_head_self_attention(Var<S> x, const AttentionWeights<S>& w,
                                 const Mask& key_mask, int n_heads);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit only)
// ---------------------------------------------------------------------------

using LossBuilder =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Compares analytic gradients of build(...) against central differences.
// Returns the max of |a-n| / max(|a|,|n|,1e-8) over all parameter entries.
double grad_check(const std::vector<Tensor<double>*>& params,
                  const LossBuilder& build, double eps);

}  // namespace eyedx
