#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "saff/autodiff.hpp"
#include "saff/rng.hpp"
#include "saff/tensor.hpp"

namespace saff {

// Two-layer MLP mapping the flattened P x P similarity matrix to a
// scalar score, tanh between layers. The output layer starts at zero so
// an untrained model scores every class identically (exact chance).
struct ScorerParams {
  Tensor w1, b1;  // P^2 x H, H
  Tensor w2, b2;  // H, 1

  std::size_t input_width() const { return w1.rows(); }
  std::size_t hidden_width() const { return w1.cols(); }

  static ScorerParams init(std::size_t patches, std::size_t hidden, Rng& rng) {
    const std::size_t in = patches * patches;
    ScorerParams p;
    p.w1 = Tensor::zeros({in, hidden});
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : p.w1.data) v = s * rng.normal();
    p.b1 = Tensor::zeros({hidden});
    p.w2 = Tensor::zeros({hidden});
    p.b2 = Tensor::zeros({1});
    return p;
  }

  template <class F>
  void visit(F&& f) {
    f("scorer.w1", w1);
    f("scorer.b1", b1);
    f("scorer.w2", w2);
    f("scorer.b2", b2);
  }
};

struct ScorerParamVars {
  Var w1, b1, w2, b2;
};

inline ScorerParamVars bind(Tape& t, ScorerParams& p, bool trainable = true) {
  auto reg = [&](Tensor& v) { return trainable ? t.param(v) : t.constant(v); };
  return ScorerParamVars{reg(p.w1), reg(p.b1), reg(p.w2), reg(p.b2)};
}

// S[a][b] = cosine similarity between support patch a and query patch b
inline Var dense_similarity(Tape& t, Var f_support, Var f_query) {
  if (!t.value(f_support).same_shape(t.value(f_query)))
    throw shape_error("dense_similarity: shape mismatch");
  Var sn = t.l2_normalize(f_support, 1);
  Var qn = t.l2_normalize(f_query, 1);
  return t.matmul(sn, t.transpose(qn));
}

inline Tensor dense_similarity(const Tensor& f_support, const Tensor& f_query) {
  Tape t;
  return t.value(dense_similarity(t, t.constant(f_support), t.constant(f_query)));
}

// MLP over the row-major flattening of S; one scalar per pair
inline Var score_pair(Tape& t, Var sim, const ScorerParamVars& p) {
  const Tensor& s = t.value(sim);
  if (s.ndim() != 2 || s.rows() != s.cols()) throw shape_error("score_pair: square matrix expected");
  if (s.size() != t.value(p.w1).rows())
    throw shape_error("score_pair: flatten width disagrees with scorer parameters");
  Var x = t.reshape(sim, {1, s.size()});
  Var h = t.tanh_(t.add(t.matmul(x, p.w1), t.reshape(p.b1, {1, t.value(p.b1).size()})));
  Var out = t.add(t.matmul(h, t.reshape(p.w2, {t.value(p.w2).size(), 1})),
                  t.reshape(p.b2, {1, 1}));
  return t.reshape(out, {});
}

// batched form: rows of flat_sims are flattened similarity matrices,
// identical arithmetic to score_pair per row
inline Var score_pairs(Tape& t, Var flat_sims, const ScorerParamVars& p) {
  const std::size_t n = t.value(flat_sims).rows();
  Var h = t.tanh_(t.add(t.matmul(flat_sims, p.w1), t.broadcast_rows(p.b1, n)));
  Var s = t.matmul(h, t.reshape(p.w2, {t.value(p.w2).size(), 1}));
  Var b = t.broadcast_rows(p.b2, n);
  return t.reshape(t.add(s, b), {n});
}

// s[n][q] = sum_k scores[(n,k)][q]
inline Var aggregate_shots(Tape& t, Var scores, std::size_t n_way, std::size_t k_shot) {
  return t.aggregate_rows(scores, n_way, k_shot);
}

// column-wise softmax over the N classes
inline Var classify(Tape& t, Var s) { return t.softmax(s, 0); }

inline Var cross_entropy(Tape& t, Var p, const std::vector<std::size_t>& labels) {
  return t.cross_entropy(p, labels);
}

}  // namespace saff
