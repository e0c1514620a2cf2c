#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "saff/autodiff.hpp"
#include "saff/rng.hpp"
#include "saff/tensor.hpp"

namespace saff {

// Learned machinery of the iterative slot-attention module: q/k/v
// projections, GRU update, residual MLP (D -> 2D -> D, tanh), three
// layer norms, and the slot-seed jitter scale sigma.
struct SlotAttentionParams {
  Tensor w_q, w_k, w_v;                                // D x D
  Tensor gru_wz, gru_uz, gru_bz;                       // D x D, D x D, D
  Tensor gru_wr, gru_ur, gru_br;
  Tensor gru_wh, gru_uh, gru_bh;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;               // D x 2D, 2D, 2D x D, D
  Tensor ln_in_g, ln_in_b, ln_slot_g, ln_slot_b, ln_mlp_g, ln_mlp_b;
  Tensor noise_scale;                                  // 1-element, >= 0

  std::size_t dim() const { return w_q.rows(); }

  static SlotAttentionParams init(std::size_t d, Rng& rng, double sigma = 0.1) {
    auto gauss = [&](std::size_t r, std::size_t c, double s) {
      Tensor t = Tensor::zeros({r, c});
      for (double& v : t.data) v = s * rng.normal();
      return t;
    };
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    SlotAttentionParams p;
    p.w_q = gauss(d, d, s);
    p.w_k = gauss(d, d, s);
    p.w_v = gauss(d, d, s);
    p.gru_wz = gauss(d, d, s);
    p.gru_uz = gauss(d, d, s);
    p.gru_bz = Tensor::zeros({d});
    p.gru_wr = gauss(d, d, s);
    p.gru_ur = gauss(d, d, s);
    p.gru_br = Tensor::zeros({d});
    p.gru_wh = gauss(d, d, s);
    p.gru_uh = gauss(d, d, s);
    p.gru_bh = Tensor::zeros({d});
    p.mlp_w1 = gauss(d, 2 * d, s);
    p.mlp_b1 = Tensor::zeros({2 * d});
    p.mlp_w2 = gauss(2 * d, d, 1.0 / std::sqrt(2.0 * static_cast<double>(d)));
    p.mlp_b2 = Tensor::zeros({d});
    p.ln_in_g = Tensor::full({d}, 1.0);
    p.ln_in_b = Tensor::zeros({d});
    p.ln_slot_g = Tensor::full({d}, 1.0);
    p.ln_slot_b = Tensor::zeros({d});
    p.ln_mlp_g = Tensor::full({d}, 1.0);
    p.ln_mlp_b = Tensor::zeros({d});
    p.noise_scale = Tensor::vec({sigma});
    return p;
  }

  template <class F>
  void visit(F&& f) {
    f("slot.w_q", w_q);
    f("slot.w_k", w_k);
    f("slot.w_v", w_v);
    f("slot.gru_wz", gru_wz);
    f("slot.gru_uz", gru_uz);
    f("slot.gru_bz", gru_bz);
    f("slot.gru_wr", gru_wr);
    f("slot.gru_ur", gru_ur);
    f("slot.gru_br", gru_br);
    f("slot.gru_wh", gru_wh);
    f("slot.gru_uh", gru_uh);
    f("slot.gru_bh", gru_bh);
    f("slot.mlp_w1", mlp_w1);
    f("slot.mlp_b1", mlp_b1);
    f("slot.mlp_w2", mlp_w2);
    f("slot.mlp_b2", mlp_b2);
    f("slot.ln_in_g", ln_in_g);
    f("slot.ln_in_b", ln_in_b);
    f("slot.ln_slot_g", ln_slot_g);
    f("slot.ln_slot_b", ln_slot_b);
    f("slot.ln_mlp_g", ln_mlp_g);
    f("slot.ln_mlp_b", ln_mlp_b);
    f("slot.noise_scale", noise_scale);
  }
};

// Tape-bound handles to the same parameters.
struct SlotParamVars {
  Var w_q, w_k, w_v;
  GruParams gru;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Var ln_in_g, ln_in_b, ln_slot_g, ln_slot_b, ln_mlp_g, ln_mlp_b;
  Var noise_scale;
};

inline SlotParamVars bind(Tape& t, SlotAttentionParams& p, bool trainable = true) {
  auto reg = [&](Tensor& v) { return trainable ? t.param(v) : t.constant(v); };
  SlotParamVars o;
  o.w_q = reg(p.w_q);
  o.w_k = reg(p.w_k);
  o.w_v = reg(p.w_v);
  o.gru = GruParams{reg(p.gru_wz), reg(p.gru_uz), reg(p.gru_bz),
                    reg(p.gru_wr), reg(p.gru_ur), reg(p.gru_br),
                    reg(p.gru_wh), reg(p.gru_uh), reg(p.gru_bh)};
  o.mlp_w1 = reg(p.mlp_w1);
  o.mlp_b1 = reg(p.mlp_b1);
  o.mlp_w2 = reg(p.mlp_w2);
  o.mlp_b2 = reg(p.mlp_b2);
  o.ln_in_g = reg(p.ln_in_g);
  o.ln_in_b = reg(p.ln_in_b);
  o.ln_slot_g = reg(p.ln_slot_g);
  o.ln_slot_b = reg(p.ln_slot_b);
  o.ln_mlp_g = reg(p.ln_mlp_g);
  o.ln_mlp_b = reg(p.ln_mlp_b);
  o.noise_scale = reg(p.noise_scale);
  return o;
}

// slot_i = class_token + sigma * xi_i, xi_i standard normal from rng
inline Tensor init_slots(const Tensor& class_token, std::size_t n_slots, double sigma,
                         Rng& rng) {
  if (n_slots == 0) throw usage_error("init_slots: n_slots must be >= 1");
  if (class_token.ndim() != 1) throw shape_error("init_slots: class token must be 1-D");
  const std::size_t d = class_token.shape[0];
  Tensor slots = Tensor::zeros({n_slots, d});
  for (std::size_t i = 0; i < n_slots; ++i)
    for (std::size_t j = 0; j < d; ++j)
      slots.at(i, j) = class_token.data[j] + sigma * rng.normal();
  return slots;
}

// One refinement step. Patches attend across slots (softmax over the
// slot axis); each slot then takes a weighted mean of v with its
// attention row renormalized along patches.
inline std::pair<Var, Var> attention_step(Tape& t, Var slots, Var inputs,
                                          const SlotParamVars& p) {
  const std::size_t d = t.value(slots).cols();
  Var slots_n = t.layer_norm(slots, p.ln_slot_g, p.ln_slot_b);
  Var inputs_n = t.layer_norm(inputs, p.ln_in_g, p.ln_in_b);
  Var q = t.matmul(slots_n, p.w_q);   // N x D
  Var k = t.matmul(inputs_n, p.w_k);  // P x D
  Var v = t.matmul(inputs_n, p.w_v);  // P x D
  Var logits = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  Var attn = t.softmax(logits, 0);    // N x P, columns sum to 1
  Var denom = t.add_const(t.reduce_sum(attn, 1), 1e-8);
  Var weights = t.div_rows(attn, denom);
  Var updates = t.matmul(weights, v);  // N x D
  Var new_slots = gru_cell(t, updates, slots, p.gru);
  Var pre = t.layer_norm(new_slots, p.ln_mlp_g, p.ln_mlp_b);
  Var hidden = t.tanh_(t.add(t.matmul(pre, p.mlp_w1),
                             t.broadcast_rows(p.mlp_b1, t.value(pre).rows())));
  Var res = t.add(t.matmul(hidden, p.mlp_w2),
                  t.broadcast_rows(p.mlp_b2, t.value(pre).rows()));
  return {t.add(new_slots, res), attn};
}

struct SlotRun {
  Var slots;      // refined slots after the last iteration (N x D)
  Var attention;  // final-iteration attention (N x P)
  std::size_t iterations_run = 0;
  std::vector<Tensor> per_iter_attention;  // filled when trace=true
};

// Seed slots from the class token and refine. The jitter std is
// noise_scale * RMS(class_token) so the scale tracks the token magnitude.
inline SlotRun run_slot_attention(Tape& t, Var inputs, Var class_token,
                                  std::size_t n_slots, std::size_t n_iters,
                                  const SlotParamVars& p, Rng& rng,
                                  bool trace = false) {
  if (n_slots == 0) throw usage_error("run_slot_attention: n_slots must be >= 1");
  if (n_iters == 0) throw usage_error("run_slot_attention: n_iters must be >= 1");
  const Tensor& tok = t.value(class_token);
  const std::size_t d = tok.shape[0];
  double rms = 0.0;
  for (double x : tok.data) rms += x * x;
  rms = std::sqrt(rms / static_cast<double>(d));
  Tensor noise = Tensor::zeros({n_slots, d});
  for (double& x : noise.data) x = rms * rng.normal();
  Var slots = t.add(t.broadcast_rows(class_token, n_slots),
                    t.scale_by(t.constant(std::move(noise)), p.noise_scale));
  SlotRun out;
  for (std::size_t i = 0; i < n_iters; ++i) {
    auto [s, a] = attention_step(t, slots, inputs, p);
    slots = s;
    out.attention = a;
    if (trace) out.per_iter_attention.push_back(t.value(a));
  }
  out.slots = slots;
  out.iterations_run = n_iters;
  return out;
}

// Value-level state for consumers that do not need gradients.
struct SlotState {
  Tensor slots;      // N x D
  Tensor attention;  // N x P
  std::size_t iterations_run = 0;
};

inline SlotState run_slot_attention(const Tensor& inputs, const Tensor& class_token,
                                    std::size_t n_slots, std::size_t n_iters,
                                    SlotAttentionParams& params, Rng& rng) {
  Tape t;
  SlotParamVars pv = bind(t, params, /*trainable=*/false);
  SlotRun r = run_slot_attention(t, t.constant(inputs), t.constant(class_token), n_slots,
                                 n_iters, pv, rng);
  return SlotState{t.value(r.slots), t.value(r.attention), r.iterations_run};
}

}  // namespace saff
