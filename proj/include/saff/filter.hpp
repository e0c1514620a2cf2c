#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "saff/autodiff.hpp"
#include "saff/slot_attention.hpp"
#include "saff/tensor.hpp"

namespace saff {

enum class MaskMode { weighted, binary };

struct FilterConfig {
  double threshold = 0.5;        // on min-max normalized slot similarity
  MaskMode mask_mode = MaskMode::weighted;
  double lambda = 2.0;           // class-token influence in the final addition

  void validate() const {
    if (threshold < 0.0 || threshold > 1.0)
      throw usage_error("filter: threshold must be in [0,1]");
    if (lambda < 0.0) throw usage_error("filter: lambda must be >= 0");
  }
};

struct FilterResult {
  Tensor similarity;           // N, cosine of each refined slot vs class token
  Tensor similarity_norm;      // N, min-max normalized
  Tensor mask;                 // N of {0,1}
  std::size_t n_passing = 0;   // N_M
  Tensor combined;             // P, averaged attention of passing slots
  Tensor weighted_embeddings;  // P x D
  Tensor refined;              // P x D, F
};

// cosine similarity of each L2-normalized slot row against the
// normalized class token
inline Tensor slot_similarity(const Tensor& slots, const Tensor& class_token) {
  if (slots.ndim() != 2 || class_token.ndim() != 1 || slots.cols() != class_token.shape[0])
    throw shape_error("slot_similarity: dimension mismatch");
  const Tensor sn = Tape::l2_normalize_raw(slots, 1);
  const Tensor cn = Tape::l2_normalize_raw(class_token, 0);
  Tensor out = Tensor::zeros({slots.rows()});
  for (std::size_t i = 0; i < slots.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < slots.cols(); ++j) dot += sn.at(i, j) * cn.data[j];
    out.data[i] = dot;
  }
  return out;
}

// (x - min) / (max - min); an all-equal input (max-min below 1e-12) maps
// to all ones so every slot passes the mask
inline Tensor minmax_normalize(const Tensor& similarity) {
  if (similarity.ndim() != 1 || similarity.size() < 2)
    throw usage_error("minmax_normalize: need at least two slots");
  double lo = similarity.data[0], hi = similarity.data[0];
  for (double v : similarity.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12) return Tensor::full(similarity.shape, 1.0);
  Tensor out = similarity;
  for (double& v : out.data) v = (v - lo) / (hi - lo);
  return out;
}

// M_i = 1 iff similarity_norm_i > threshold; the argmax slot always
// passes (its normalized value is exactly 1)
inline std::pair<Tensor, std::size_t> make_mask(const Tensor& similarity_norm,
                                                double threshold) {
  Tensor m = Tensor::zeros(similarity_norm.shape);
  std::size_t n_passing = 0;
  for (std::size_t i = 0; i < similarity_norm.size(); ++i) {
    if (similarity_norm.data[i] > threshold) {
      m.data[i] = 1.0;
      ++n_passing;
    }
  }
  return {m, n_passing};
}

inline Tensor combine_attention(const Tensor& attention, const Tensor& mask,
                                std::size_t n_passing) {
  if (attention.ndim() != 2 || mask.size() != attention.rows())
    throw shape_error("combine_attention: mask/attention mismatch");
  if (n_passing == 0) throw usage_error("combine_attention: no passing slots");
  Tensor out = Tensor::zeros({attention.cols()});
  for (std::size_t s = 0; s < attention.rows(); ++s) {
    if (mask.data[s] == 0.0) continue;
    for (std::size_t p = 0; p < attention.cols(); ++p) out.data[p] += attention.at(s, p);
  }
  for (double& v : out.data) v /= static_cast<double>(n_passing);
  return out;
}

// binary mode zeroes patches whose combined attention falls below half
// of the maximum (the combined values live near 1/N_M, so the cut is
// relative, not an absolute 0.5)
inline std::vector<double> binary_patch_weights(const Tensor& combined) {
  double mx = 0.0;
  for (double v : combined.data) mx = std::max(mx, v);
  std::vector<double> w(combined.size());
  for (std::size_t p = 0; p < combined.size(); ++p)
    w[p] = combined.data[p] > 0.5 * mx ? 1.0 : 0.0;
  return w;
}

inline Tensor apply_filter(const Tensor& embeddings, const Tensor& combined,
                           MaskMode mode) {
  if (embeddings.ndim() != 2 || combined.size() != embeddings.rows())
    throw shape_error("apply_filter: patch count mismatch");
  Tensor out = embeddings;
  if (mode == MaskMode::weighted) {
    for (std::size_t p = 0; p < embeddings.rows(); ++p)
      for (std::size_t j = 0; j < embeddings.cols(); ++j) out.at(p, j) *= combined.data[p];
  } else {
    const std::vector<double> w = binary_patch_weights(combined);
    for (std::size_t p = 0; p < embeddings.rows(); ++p)
      for (std::size_t j = 0; j < embeddings.cols(); ++j) out.at(p, j) *= w[p];
  }
  return out;
}

// F[p] = weighted[p] + lambda * class_token
inline Tensor class_aware_add(const Tensor& weighted, const Tensor& class_token,
                              double lambda) {
  if (weighted.ndim() != 2 || weighted.cols() != class_token.size())
    throw shape_error("class_aware_add: dimension mismatch");
  Tensor out = weighted;
  for (std::size_t p = 0; p < weighted.rows(); ++p)
    for (std::size_t j = 0; j < weighted.cols(); ++j)
      out.at(p, j) += lambda * class_token.data[j];
  return out;
}

inline FilterResult filter(const Tensor& embeddings, const Tensor& class_token,
                           const SlotState& state, const FilterConfig& cfg) {
  cfg.validate();
  FilterResult r;
  r.similarity = slot_similarity(state.slots, class_token);
  r.similarity_norm = minmax_normalize(r.similarity);
  auto [m, n] = make_mask(r.similarity_norm, cfg.threshold);
  r.mask = m;
  r.n_passing = n;
  r.combined = combine_attention(state.attention, r.mask, r.n_passing);
  r.weighted_embeddings = apply_filter(embeddings, r.combined, cfg.mask_mode);
  r.refined = class_aware_add(r.weighted_embeddings, class_token, cfg.lambda);
  return r;
}

// Tape version: the mask (and binary patch weights) are computed from
// recorded values and treated as constants; gradients flow through the
// attention rows, the embeddings, and the class token only.
struct FilterVars {
  Tensor similarity;
  Tensor similarity_norm;
  Tensor mask;
  std::size_t n_passing = 0;
  Var combined;
  Var weighted_embeddings;
  Var refined;
};

inline FilterVars filter_t(Tape& t, Var embeddings, Var class_token, Var slots,
                           Var attention, const FilterConfig& cfg) {
  cfg.validate();
  FilterVars r;
  r.similarity = slot_similarity(t.value(slots), t.value(class_token));
  r.similarity_norm = minmax_normalize(r.similarity);
  auto [m, n] = make_mask(r.similarity_norm, cfg.threshold);
  r.mask = m;
  r.n_passing = n;
  Var masked = t.mul_rows(attention, t.constant(r.mask));
  r.combined = t.scale(t.reduce_sum(masked, 0), 1.0 / static_cast<double>(r.n_passing));
  if (cfg.mask_mode == MaskMode::weighted) {
    r.weighted_embeddings = t.mul_rows(embeddings, r.combined);
  } else {
    r.weighted_embeddings =
        t.mul_rows(embeddings, t.constant(Tensor::vec(binary_patch_weights(t.value(r.combined)))));
  }
  const std::size_t p = t.value(embeddings).rows();
  r.refined = t.add(r.weighted_embeddings,
                    t.broadcast_rows(t.scale(class_token, cfg.lambda), p));
  return r;
}

}  // namespace saff
