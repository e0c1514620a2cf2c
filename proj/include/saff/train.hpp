#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saff/autodiff.hpp"
#include "saff/data.hpp"
#include "saff/filter.hpp"
#include "saff/model.hpp"
#include "saff/rng.hpp"
#include "saff/scorer.hpp"
#include "saff/slot_attention.hpp"
#include "saff/tensor.hpp"

namespace saff {

enum class Ablation { full, no_filter };

struct SlotConfig {
  std::size_t n_slots = 5;
  std::size_t n_iters = 5;
};

struct TrainConfig {
  std::size_t episodes_train = 2000;
  std::size_t episodes_eval = 1000;
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 15;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t scorer_hidden = 64;
  FilterConfig filter;
  SlotConfig slots;
  Ablation ablation = Ablation::full;

  void validate() const {
    if (n_way == 0 || k_shot == 0 || q_per_class == 0)
      throw usage_error("config: episode counts must be positive");
    if (slots.n_slots == 0 || slots.n_iters == 0)
      throw usage_error("config: slot counts must be positive");
    filter.validate();
  }
};

struct EpisodeScores {
  Tensor pair_scores;    // N*K x Q_total
  Tensor aggregated;     // N x Q_total
  Tensor probabilities;  // N x Q_total, columns sum to 1
};

struct EpisodeForward {
  Var loss;
  Var probabilities;
  EpisodeScores scores;
};

// Full pipeline for one episode: slot attention + filtering per image,
// dense cosine similarity for every (support, query) pair, MLP scores,
// shot aggregation, softmax, cross entropy.
inline EpisodeForward forward_episode(Tape& t, ModelVars& mv, const Episode& ep,
                                      const TrainConfig& cfg, Rng& noise_rng) {
  const std::size_t nk = ep.support.size();
  const std::size_t qt = ep.query.size();

  auto refine = [&](const ImageFeatures& img) {
    Var emb = t.constant(img.patches);
    Var tok = t.constant(img.class_token);
    Var refined;
    if (cfg.ablation == Ablation::no_filter) {
      // bypass: F = embeddings + lambda * class_token
      refined = t.add(emb, t.broadcast_rows(t.scale(tok, cfg.filter.lambda),
                                            img.patches.rows()));
    } else {
      SlotRun run = run_slot_attention(t, emb, tok, cfg.slots.n_slots, cfg.slots.n_iters,
                                       mv.slot, noise_rng);
      FilterVars f = filter_t(t, emb, tok, run.slots, run.attention, cfg.filter);
      refined = f.refined;
    }
    return t.l2_normalize(refined, 1);
  };

  std::vector<Var> support_n, query_n;
  support_n.reserve(nk);
  query_n.reserve(qt);
  for (const auto& img : ep.support) support_n.push_back(refine(img));
  for (const auto& img : ep.query) query_n.push_back(refine(img));

  const std::size_t p2 = t.value(support_n[0]).rows() * t.value(support_n[0]).rows();
  std::vector<Var> flat;
  flat.reserve(nk * qt);
  for (std::size_t s = 0; s < nk; ++s) {
    Var sup = support_n[s];
    for (std::size_t q = 0; q < qt; ++q) {
      Var sim = t.matmul(sup, t.transpose(query_n[q]));
      flat.push_back(t.reshape(sim, {p2}));
    }
  }
  Var scores_flat = score_pairs(t, t.concat_rows(flat), mv.scorer);  // nk*qt
  Var pair_scores = t.reshape(scores_flat, {nk, qt});
  Var agg = aggregate_shots(t, pair_scores, ep.n_way, ep.k_shot);
  Var probs = classify(t, agg);
  Var loss = cross_entropy(t, probs, ep.query_labels);

  EpisodeForward out;
  out.loss = loss;
  out.probabilities = probs;
  out.scores = EpisodeScores{t.value(pair_scores), t.value(agg), t.value(probs)};
  return out;
}

// model-free loss of one episode as a function of params (fresh tape,
// fresh noise stream); the finite-difference oracle perturbs params and
// calls this repeatedly
inline double episode_loss(ModelParams& params, const Episode& ep, const TrainConfig& cfg,
                           std::uint64_t noise_seed) {
  Tape t;
  ModelVars mv = bind_model(t, params, /*trainable=*/false);
  Rng noise(noise_seed);
  return t.value(forward_episode(t, mv, ep, cfg, noise).loss).item();
}

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_curve;
};

inline TrainResult train(const FeatureStore& store, const TrainConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng init_rng = root.split(2);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init_rng);

  std::vector<Tensor> m, v;
  params.visit([&](const char*, Tensor& t) {
    m.push_back(Tensor::zeros(t.shape));
    v.push_back(Tensor::zeros(t.shape));
  });

  Rng episode_rng = root.split(0);
  Rng noise_rng = root.split(1);
  TrainResult out;
  for (std::size_t step = 0; step < cfg.episodes_train; ++step) {
    Episode ep = sample_episode(store, cfg.n_way, cfg.k_shot, cfg.q_per_class, episode_rng);
    Tape t;
    ModelVars mv = bind_model(t, params, /*trainable=*/true);
    EpisodeForward fwd = forward_episode(t, mv, ep, cfg, noise_rng);
    const double loss = t.value(fwd.loss).item();
    if (!std::isfinite(loss))
      throw usage_error("train: diverged (non-finite loss) at step " + std::to_string(step));
    out.loss_curve.push_back(loss);
    t.backward(fwd.loss);

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
    std::size_t i = 0;
    params.visit([&](const char* name, Tensor& p) {
      const Tensor g = t.grad(mv.all[i]);
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[i].data[j] = cfg.beta1 * m[i].data[j] + (1.0 - cfg.beta1) * g.data[j];
        v[i].data[j] = cfg.beta2 * v[i].data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
        const double mh = m[i].data[j] / bc1;
        const double vh = v[i].data[j] / bc2;
        p.data[j] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps);
      }
      if (std::string(name) == "slot.noise_scale" && p.data[0] < 0.0) p.data[0] = 0.0;
      ++i;
    });
  }
  out.params = std::move(params);
  return out;
}

struct EvalReport {
  double mean_accuracy = 0.0;   // percent
  double ci_halfwidth = 0.0;    // 1.96 * std / sqrt(episodes)
  std::vector<double> per_episode;   // percent
  std::vector<std::uint8_t> correctness;  // one bit per query, episode-major
  std::uint64_t seed = 0;
};

inline std::size_t argmax_column(const Tensor& probs, std::size_t col) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.rows(); ++i)
    if (probs.at(i, col) > probs.at(best, col)) best = i;
  return best;
}

inline EvalReport evaluate(const FeatureStore& store, ModelParams& params,
                           const TrainConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng episode_rng = root.split(0);
  Rng noise_rng = root.split(1);
  EvalReport rep;
  rep.seed = cfg.seed;
  for (std::size_t e = 0; e < cfg.episodes_eval; ++e) {
    Episode ep = sample_episode(store, cfg.n_way, cfg.k_shot, cfg.q_per_class, episode_rng);
    Tape t;
    ModelVars mv = bind_model(t, params, /*trainable=*/false);
    EpisodeForward fwd = forward_episode(t, mv, ep, cfg, noise_rng);
    const Tensor& probs = fwd.scores.probabilities;
    std::size_t correct = 0;
    for (std::size_t q = 0; q < ep.query_labels.size(); ++q) {
      const bool ok = argmax_column(probs, q) == ep.query_labels[q];
      rep.correctness.push_back(ok ? 1 : 0);
      if (ok) ++correct;
    }
    rep.per_episode.push_back(100.0 * static_cast<double>(correct) /
                              static_cast<double>(ep.query_labels.size()));
  }
  double mean = 0.0;
  for (double a : rep.per_episode) mean += a;
  mean /= static_cast<double>(rep.per_episode.size());
  double var = 0.0;
  for (double a : rep.per_episode) var += (a - mean) * (a - mean);
  if (rep.per_episode.size() > 1) var /= static_cast<double>(rep.per_episode.size() - 1);
  rep.mean_accuracy = mean;
  rep.ci_halfwidth = 1.96 * std::sqrt(var / static_cast<double>(rep.per_episode.size()));
  return rep;
}

// ---- gradient check harness ----

struct GradCheckGroup {
  std::string name;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;
};

// analytic gradients of the full episode loss vs central finite
// differences, per parameter group. The default step balances central-
// difference truncation (~h^2) against cancellation noise in the loss
// (~eps/h); smaller steps drown small-magnitude groups in roundoff.
inline GradCheckReport grad_check(ModelParams& params, const Episode& ep,
                                  const TrainConfig& cfg, double h = 1e-3,
                                  std::uint64_t noise_seed = 99) {
  GradCheckReport rep;
  std::vector<Tensor> analytic;
  {
    Tape t;
    ModelVars mv = bind_model(t, params, /*trainable=*/true);
    Rng noise(noise_seed);
    EpisodeForward fwd = forward_episode(t, mv, ep, cfg, noise);
    t.backward(fwd.loss);
    for (Var v : mv.all) analytic.push_back(t.grad(v));
  }
  std::size_t i = 0;
  params.visit([&](const char* name, Tensor& p) {
    Tensor fd = Tensor::zeros(p.shape);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double orig = p.data[j];
      p.data[j] = orig + h;
      const double fp = episode_loss(params, ep, cfg, noise_seed);
      p.data[j] = orig - h;
      const double fm = episode_loss(params, ep, cfg, noise_seed);
      p.data[j] = orig;
      fd.data[j] = (fp - fm) / (2.0 * h);
    }
    double na = 0.0, nf = 0.0, nd = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      na += analytic[i].data[j] * analytic[i].data[j];
      nf += fd.data[j] * fd.data[j];
      const double d = analytic[i].data[j] - fd.data[j];
      nd += d * d;
    }
    const double rel = std::sqrt(nd) / std::max({std::sqrt(na), std::sqrt(nf), 1e-8});
    rep.groups.push_back({name, rel});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    ++i;
  });
  return rep;
}

}  // namespace saff
