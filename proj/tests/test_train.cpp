#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "saff/data.hpp"
#include "saff/model.hpp"
#include "saff/rng.hpp"
#include "saff/train.hpp"

using namespace saff;

namespace {

FeatureStore small_store(std::uint64_t seed = 5, std::size_t classes = 4) {
  SynthConfig cfg;
  cfg.n_classes = classes;
  cfg.images_per_class = 8;
  cfg.patches = 4;
  cfg.dim = 4;
  cfg.relevant_fraction = 0.5;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.n_way = 2;
  cfg.k_shot = 1;
  cfg.q_per_class = 2;
  cfg.scorer_hidden = 8;
  cfg.slots.n_slots = 2;
  cfg.slots.n_iters = 2;
  cfg.episodes_train = 5;
  cfg.episodes_eval = 5;
  return cfg;
}

bool params_equal(ModelParams& a, ModelParams& b) {
  bool eq = true;
  std::vector<Tensor*> bs;
  b.visit([&](const char*, Tensor& t) { bs.push_back(&t); });
  std::size_t i = 0;
  a.visit([&](const char*, Tensor& t) {
    if (!(t == *bs[i])) eq = false;
    ++i;
  });
  return eq;
}

}  // namespace

TEST_CASE("a 1-way episode is certain") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  cfg.n_way = 1;
  Rng init(3);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init);
  Rng ep_rng(1);
  const Episode ep = sample_episode(store, 1, 1, 3, ep_rng);
  Tape t;
  ModelVars mv = bind_model(t, params, false);
  Rng noise(9);
  const EpisodeForward fwd = forward_episode(t, mv, ep, cfg, noise);
  // softmax over a single class is exactly 1, so the loss is exactly 0
  CHECK(t.value(fwd.loss).item() == 0.0);
  for (double p : fwd.scores.probabilities.data) CHECK(p == 1.0);
}

TEST_CASE("an untrained scorer gives uniform probabilities") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  cfg.n_way = 4;
  Rng init(3);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init);
  Rng ep_rng(1);
  const Episode ep = sample_episode(store, 4, 1, 2, ep_rng);
  Tape t;
  ModelVars mv = bind_model(t, params, false);
  Rng noise(9);
  const EpisodeForward fwd = forward_episode(t, mv, ep, cfg, noise);
  // zero output layer -> all pair scores 0 -> probability exactly 1/N
  for (double p : fwd.scores.probabilities.data)
    CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(t.value(fwd.loss).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("training with a zero learning rate leaves parameters untouched") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  cfg.learning_rate = 0.0;
  cfg.seed = 12;
  TrainResult r = train(store, cfg);
  Rng root(cfg.seed);
  Rng init_rng = root.split(2);
  ModelParams fresh = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init_rng);
  CHECK(params_equal(r.params, fresh));
  CHECK(r.loss_curve.size() == cfg.episodes_train);
}

TEST_CASE("training is bit-reproducible per seed") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  cfg.seed = 21;
  TrainResult a = train(store, cfg);
  TrainResult b = train(store, cfg);
  CHECK(params_equal(a.params, b.params));
  CHECK(a.loss_curve == b.loss_curve);

  TrainConfig other = cfg;
  other.seed = 22;
  TrainResult c = train(store, other);
  CHECK(!params_equal(a.params, c.params));
}

TEST_CASE("evaluation is bit-reproducible and produces per-query correctness") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  cfg.seed = 8;
  Rng init(4);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init);
  const EvalReport a = evaluate(store, params, cfg);
  const EvalReport b = evaluate(store, params, cfg);
  CHECK(a.mean_accuracy == b.mean_accuracy);
  CHECK(a.correctness == b.correctness);
  CHECK(a.correctness.size() ==
        cfg.episodes_eval * cfg.n_way * cfg.q_per_class);
  CHECK(a.per_episode.size() == cfg.episodes_eval);
  // accuracy is the mean of the correctness bits
  double frac = 0.0;
  for (auto bit : a.correctness) frac += bit;
  frac = 100.0 * frac / static_cast<double>(a.correctness.size());
  CHECK(a.mean_accuracy == doctest::Approx(frac).epsilon(1e-12));
}

TEST_CASE("the loss decreases on easy synthetic data") {
  SynthConfig scfg;
  scfg.n_classes = 4;
  scfg.images_per_class = 12;
  scfg.patches = 4;
  scfg.dim = 6;
  scfg.relevant_fraction = 0.5;
  scfg.signal_noise = 0.1;
  scfg.background_noise = 0.2;
  scfg.seed = 2;
  const FeatureStore store = generate_synthetic(scfg);
  TrainConfig cfg = small_config();
  cfg.episodes_train = 80;
  cfg.learning_rate = 5e-3;
  cfg.seed = 3;
  TrainResult r = train(store, cfg);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += r.loss_curve[static_cast<std::size_t>(i)];
    tail += r.loss_curve[r.loss_curve.size() - 1 - static_cast<std::size_t>(i)];
  }
  CHECK(tail < head);
}

TEST_CASE("analytic gradients of the episode loss match finite differences") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  Rng init(17);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init);
  // make the loss sensitive to the scorer's output layer too
  Rng wr(18);
  for (double& v : params.scorer.w2.data) v = 0.3 * wr.normal();

  Rng ep_rng(2);
  const Episode ep = sample_episode(store, cfg.n_way, cfg.k_shot, cfg.q_per_class, ep_rng);
  const GradCheckReport rep = grad_check(params, ep, cfg, 1e-3, /*noise_seed=*/123);
  CHECK(rep.groups.size() == params.tensor_count());
  CHECK(rep.max_rel_error < 1e-4);

  // the check is not vacuous: several groups carry nonzero gradient
  Tape t;
  ModelVars mv = bind_model(t, params, true);
  Rng noise(123);
  EpisodeForward fwd = forward_episode(t, mv, ep, cfg, noise);
  t.backward(fwd.loss);
  auto norm = [&](Var v) {
    double s = 0.0;
    for (double g : t.grad(v).data) s += g * g;
    return std::sqrt(s);
  };
  CHECK(norm(mv.scorer.w1) > 1e-8);
  CHECK(norm(mv.scorer.w2) > 1e-8);
  CHECK(norm(mv.slot.w_q) > 1e-10);

  // a corrupted gradient would be flagged: shifting the analytic value of
  // one group by 10% of the finite-difference scale exceeds the tolerance
  // (sanity-check the metric itself)
  double na = 0.0;
  for (double g : t.grad(mv.scorer.w2).data) na += g * g;
  na = std::sqrt(na);
  REQUIRE(na > 0.0);
  Tensor fake = t.grad(mv.scorer.w2);
  fake.data[0] += 0.5 * na;
  const Tensor exact = t.grad(mv.scorer.w2);
  double nd = 0.0;
  for (std::size_t j = 0; j < fake.size(); ++j) {
    const double d = fake.data[j] - exact.data[j];
    nd += d * d;
  }
  CHECK(std::sqrt(nd) / na > 1e-2);
}

TEST_CASE("zero jitter and positive jitter both behave") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  Rng init(6);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init);
  params.slot.noise_scale.data[0] = 0.0;
  const EvalReport a = evaluate(store, params, cfg);
  const EvalReport b = evaluate(store, params, cfg);
  CHECK(a.correctness == b.correctness);
  params.slot.noise_scale.data[0] = 0.1;
  CHECK_NOTHROW(evaluate(store, params, cfg));
}

TEST_CASE("the no-filter ablation bypasses slot attention") {
  const FeatureStore store = small_store();
  TrainConfig cfg = small_config();
  cfg.ablation = Ablation::no_filter;
  Rng init(6);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init);
  // a zero output layer would hide any influence of the slot parameters
  Rng wr(60);
  for (double& v : params.scorer.w2.data) v = wr.normal();
  // corrupting the slot parameters must not change the outcome
  const EvalReport a = evaluate(store, params, cfg);
  for (double& v : params.slot.w_q.data) v = -v;
  const EvalReport b = evaluate(store, params, cfg);
  CHECK(a.correctness == b.correctness);
  CHECK(a.mean_accuracy == b.mean_accuracy);

  // with the full pipeline the same corruption does matter
  TrainConfig full = small_config();
  Rng ep_rng(2);
  const Episode ep = sample_episode(store, full.n_way, full.k_shot, full.q_per_class, ep_rng);
  auto episode_probs = [&]() {
    Tape t;
    ModelVars mv = bind_model(t, params, false);
    Rng noise(5);
    return forward_episode(t, mv, ep, full, noise).scores.probabilities;
  };
  for (double& v : params.slot.w_q.data) v = -v;  // restore
  const Tensor probs_orig = episode_probs();
  for (double& v : params.slot.w_q.data) v = -v;  // corrupt
  const Tensor probs_corrupt = episode_probs();
  CHECK(max_abs_diff(probs_orig, probs_corrupt) > 0.0);
}

TEST_CASE("parameter files round-trip bitwise") {
  const FeatureStore store = small_store();
  Rng init(9);
  ModelParams params = ModelParams::init(store.patches, store.dim, 8, init);
  const std::string path = "params_rt.safp";
  save_params(params, path);
  Rng init2(1234);
  ModelParams other = ModelParams::init(store.patches, store.dim, 8, init2);
  CHECK(!params_equal(params, other));
  load_params(other, path);
  CHECK(params_equal(params, other));

  // a model with a different shape refuses the file
  Rng init3(1);
  ModelParams wrong = ModelParams::init(store.patches + 1, store.dim, 8, init3);
  CHECK_THROWS_AS(load_params(wrong, path), format_error);
  CHECK_THROWS_AS(load_params(other, "missing.safp"), format_error);
  std::remove(path.c_str());
}

TEST_CASE("config validation") {
  TrainConfig cfg = small_config();
  cfg.n_way = 0;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = small_config();
  cfg.slots.n_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = small_config();
  cfg.filter.threshold = 1.5;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
}
