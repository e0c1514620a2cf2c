#include <doctest.h>

#include <cmath>
#include <vector>

#include "saff/filter.hpp"
#include "saff/rng.hpp"
#include "saff/tensor.hpp"

using namespace saff;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

Tensor random_attention(std::size_t n, std::size_t p, Rng& rng) {
  return Tape::softmax_raw(random_tensor({n, p}, rng, 2.0), 0);
}

}  // namespace

TEST_CASE("slot_similarity") {
  const Tensor token = Tensor::vec({1, 0});
  SUBCASE("self similarity is 1") {
    const Tensor s = slot_similarity(Tensor::matrix(1, 2, {2, 0}), token);
    CHECK(s.data[0] == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("orthogonal slots score 0") {
    const Tensor s = slot_similarity(Tensor::matrix(1, 2, {0, 3}), token);
    CHECK(s.data[0] == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("hand-computed 45 degrees") {
    const Tensor s = slot_similarity(Tensor::matrix(1, 2, {1, 1}), token);
    CHECK(s.data[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));
  }
}

TEST_CASE("minmax_normalize") {
  {
    const Tensor n = minmax_normalize(Tensor::vec({0.2, 0.5, 0.8}));
    CHECK(n.data[0] == doctest::Approx(0.0));
    CHECK(n.data[1] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(n.data[2] == doctest::Approx(1.0));
  }
  {
    const Tensor n = minmax_normalize(Tensor::vec({0.9, 0.1}));
    CHECK(n.data[0] == 1.0);
    CHECK(n.data[1] == 0.0);
  }
  {
    // degenerate tie: everything passes
    const Tensor n = minmax_normalize(Tensor::vec({0.4, 0.4, 0.4}));
    for (double v : n.data) CHECK(v == 1.0);
  }
  CHECK_THROWS_AS(minmax_normalize(Tensor::vec({0.4})), usage_error);
}

TEST_CASE("make_mask") {
  {
    auto [m, n] = make_mask(Tensor::vec({0.0, 0.6, 1.0}), 0.5);
    CHECK(m.data[0] == 0.0);
    CHECK(m.data[1] == 1.0);
    CHECK(m.data[2] == 1.0);
    CHECK(n == 2);
  }
  {
    // N=2 non-degenerate: exactly one slot passes
    auto [m, n] = make_mask(minmax_normalize(Tensor::vec({0.3, 0.7})), 0.5);
    CHECK(n == 1);
    CHECK(m.data[1] == 1.0);
  }
  {
    auto [m, n] = make_mask(Tensor::vec({1, 1, 1}), 0.5);
    CHECK(n == 3);
    (void)m;
  }
}

TEST_CASE("combine_attention") {
  {
    // single survivor: exact row copy
    const Tensor a = Tensor::matrix(2, 3, {0.1, 0.2, 0.3, 0.9, 0.8, 0.7});
    const Tensor c = combine_attention(a, Tensor::vec({0, 1}), 1);
    CHECK(c.data[0] == 0.9);
    CHECK(c.data[1] == 0.8);
    CHECK(c.data[2] == 0.7);
  }
  {
    const Tensor a = Tensor::matrix(3, 2, {0.2, 0.8, 0.6, 0.4, 0.5, 0.5});
    const Tensor c = combine_attention(a, Tensor::vec({0, 1, 1}), 2);
    CHECK(c.data[0] == doctest::Approx(0.55).epsilon(1e-15));
    CHECK(c.data[1] == doctest::Approx(0.45).epsilon(1e-15));
  }
  {
    // all slots pass + column sums 1 -> uniform 1/N
    Rng rng(3);
    const Tensor a = random_attention(4, 5, rng);
    const Tensor c = combine_attention(a, Tensor::full({4}, 1.0), 4);
    for (double v : c.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  CHECK_THROWS_AS(combine_attention(Tensor::matrix(1, 2, {1, 1}), Tensor::vec({0}), 0),
                  usage_error);
}

TEST_CASE("apply_filter") {
  const Tensor emb = Tensor::matrix(2, 2, {1, 2, 3, 4});
  {
    const Tensor out = apply_filter(emb, Tensor::vec({1, 1}), MaskMode::weighted);
    CHECK(out == emb);
  }
  {
    const Tensor out = apply_filter(emb, Tensor::vec({0.5, 0.0}), MaskMode::weighted);
    CHECK(out.at(0, 0) == 0.5);
    CHECK(out.at(0, 1) == 1.0);
    CHECK(out.at(1, 0) == 0.0);
    CHECK(out.at(1, 1) == 0.0);
  }
  {
    // binary: cancel patches below half the max activation
    const Tensor out = apply_filter(emb, Tensor::vec({0.9, 0.1}), MaskMode::binary);
    CHECK(out.at(0, 0) == 1.0);
    CHECK(out.at(0, 1) == 2.0);
    CHECK(out.at(1, 0) == 0.0);
    CHECK(out.at(1, 1) == 0.0);
  }
}

TEST_CASE("class_aware_add") {
  const Tensor w = Tensor::matrix(2, 2, {1, 1, 0, 0});
  const Tensor token = Tensor::vec({0.5, -0.5});
  {
    const Tensor f = class_aware_add(w, token, 0.0);
    CHECK(f == w);
  }
  {
    const Tensor f = class_aware_add(w, token, 2.0);
    CHECK(f.at(0, 0) == 2.0);
    CHECK(f.at(0, 1) == 0.0);
    CHECK(f.at(1, 0) == 1.0);
    CHECK(f.at(1, 1) == -1.0);
  }
  {
    const Tensor f = class_aware_add(Tensor::zeros({3, 2}), token, 2.0);
    for (std::size_t p = 0; p < 3; ++p) {
      CHECK(f.at(p, 0) == 1.0);
      CHECK(f.at(p, 1) == -1.0);
    }
  }
}

TEST_CASE("filter composition against a step-by-step oracle") {
  // N=3, P=2, D=2 trace, every intermediate recomputed independently
  SlotState st;
  st.slots = Tensor::matrix(3, 2, {1.0, 0.0, 1.0, 1.0, 0.0, 1.0});
  st.attention = Tensor::matrix(3, 2, {0.2, 0.5, 0.3, 0.3, 0.5, 0.2});
  const Tensor token = Tensor::vec({2.0, 0.0});
  const Tensor emb = Tensor::matrix(2, 2, {1.0, -1.0, 0.5, 2.0});
  FilterConfig cfg;  // threshold 0.5, weighted, lambda 2

  const FilterResult r = filter(emb, token, st, cfg);

  // oracle: cosine sims = [1, 1/sqrt2, 0]; minmax -> [1, 1/sqrt2, 0];
  // mask [1,1,0], N_M=2; combined = ([0.2,0.5]+[0.3,0.3])/2 = [0.25,0.4];
  // weighted = [[0.25,-0.25],[0.2,0.8]]; F = weighted + 2*[2,0]
  const double s1 = 1.0 / std::sqrt(2.0);
  CHECK(std::abs(r.similarity.data[0] - 1.0) < 1e-12);
  CHECK(std::abs(r.similarity.data[1] - s1) < 1e-12);
  CHECK(std::abs(r.similarity.data[2] - 0.0) < 1e-12);
  CHECK(std::abs(r.similarity_norm.data[1] - s1) < 1e-12);
  CHECK(r.mask.data[0] == 1.0);
  CHECK(r.mask.data[1] == 1.0);
  CHECK(r.mask.data[2] == 0.0);
  CHECK(r.n_passing == 2);
  CHECK(std::abs(r.combined.data[0] - 0.25) < 1e-12);
  CHECK(std::abs(r.combined.data[1] - 0.4) < 1e-12);
  CHECK(std::abs(r.weighted_embeddings.at(0, 0) - 0.25) < 1e-12);
  CHECK(std::abs(r.weighted_embeddings.at(0, 1) + 0.25) < 1e-12);
  CHECK(std::abs(r.weighted_embeddings.at(1, 0) - 0.2) < 1e-12);
  CHECK(std::abs(r.weighted_embeddings.at(1, 1) - 0.8) < 1e-12);
  CHECK(std::abs(r.refined.at(0, 0) - 4.25) < 1e-12);
  CHECK(std::abs(r.refined.at(0, 1) + 0.25) < 1e-12);
  CHECK(std::abs(r.refined.at(1, 0) - 4.2) < 1e-12);
  CHECK(std::abs(r.refined.at(1, 1) - 0.8) < 1e-12);
}

TEST_CASE("filter invariants on randomized inputs") {
  Rng rng(11);
  FilterConfig cfg;
  for (std::size_t n : {2u, 3u, 5u, 10u}) {
    for (int rep = 0; rep < 50; ++rep) {
      const std::size_t p = 4;
      SlotState st;
      st.slots = random_tensor({n, 6}, rng);
      st.attention = random_attention(n, p, rng);
      const Tensor token = random_tensor({6}, rng);
      const Tensor emb = random_tensor({p, 6}, rng);
      const FilterResult r = filter(emb, token, st, cfg);

      std::size_t amax = 0, amin = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (r.similarity.data[i] > r.similarity.data[amax]) amax = i;
        if (r.similarity.data[i] < r.similarity.data[amin]) amin = i;
      }
      const bool degenerate =
          r.similarity.data[amax] - r.similarity.data[amin] < 1e-12;
      REQUIRE(!degenerate);  // randomized real-valued sims
      CHECK(r.mask.data[amax] == 1.0);
      CHECK(r.mask.data[amin] == 0.0);
      CHECK(r.n_passing >= 1);
      for (double v : r.combined.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      if (n == 2) {
        // exactly the higher-similarity slot's attention row
        for (std::size_t j = 0; j < p; ++j)
          CHECK(r.combined.data[j] == st.attention.at(amax, j));
      }
    }
  }
}

TEST_CASE("degenerate tie yields uniform combination") {
  SlotState st;
  st.slots = Tensor::matrix(3, 2, {1, 0, 1, 0, 1, 0});
  Rng rng(2);
  st.attention = random_attention(3, 4, rng);
  const Tensor token = Tensor::vec({1, 0});
  const Tensor emb = random_tensor({4, 2}, rng);
  FilterConfig cfg;
  const FilterResult r = filter(emb, token, st, cfg);
  CHECK(r.n_passing == 3);
  for (double v : r.combined.data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 2; ++j)
      CHECK(r.refined.at(p, j) ==
            doctest::Approx(emb.at(p, j) / 3.0 + 2.0 * token.data[j]).epsilon(1e-12));
}

TEST_CASE("slot-order invariance") {
  Rng rng(5);
  const std::size_t n = 4, p = 3, d = 5;
  SlotState st;
  st.slots = random_tensor({n, d}, rng);
  st.attention = random_attention(n, p, rng);
  const Tensor token = random_tensor({d}, rng);
  const Tensor emb = random_tensor({p, d}, rng);
  FilterConfig cfg;
  const FilterResult a = filter(emb, token, st, cfg);

  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  SlotState st2;
  st2.slots = Tensor::zeros({n, d});
  st2.attention = Tensor::zeros({n, p});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) st2.slots.at(i, j) = st.slots.at(perm[i], j);
    for (std::size_t j = 0; j < p; ++j) st2.attention.at(i, j) = st.attention.at(perm[i], j);
  }
  const FilterResult b = filter(emb, token, st2, cfg);
  CHECK(max_abs_diff(a.combined, b.combined) < 1e-12);
  CHECK(max_abs_diff(a.refined, b.refined) < 1e-12);
}

TEST_CASE("lambda linearity") {
  Rng rng(8);
  const Tensor emb = random_tensor({3, 4}, rng);
  const Tensor token = random_tensor({4}, rng);
  SlotState st;
  st.slots = random_tensor({3, 4}, rng);
  st.attention = random_attention(3, 3, rng);
  FilterConfig c1, c2;
  c1.lambda = 3.0;
  c2.lambda = 1.0;
  const FilterResult f1 = filter(emb, token, st, c1);
  const FilterResult f2 = filter(emb, token, st, c2);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(f1.refined.at(p, j) - f2.refined.at(p, j) ==
            doctest::Approx(2.0 * token.data[j]).epsilon(1e-12));
}

TEST_CASE("tape filter matches the value-level filter") {
  Rng rng(19);
  const std::size_t n = 5, p = 4, d = 6;
  SlotState st;
  st.slots = random_tensor({n, d}, rng);
  st.attention = random_attention(n, p, rng);
  const Tensor token = random_tensor({d}, rng);
  const Tensor emb = random_tensor({p, d}, rng);
  for (MaskMode mode : {MaskMode::weighted, MaskMode::binary}) {
    FilterConfig cfg;
    cfg.mask_mode = mode;
    const FilterResult plain = filter(emb, token, st, cfg);
    Tape t;
    FilterVars fv = filter_t(t, t.constant(emb), t.constant(token), t.constant(st.slots),
                             t.constant(st.attention), cfg);
    CHECK(fv.n_passing == plain.n_passing);
    CHECK(max_abs_diff(t.value(fv.combined), plain.combined) < 1e-15);
    CHECK(max_abs_diff(t.value(fv.refined), plain.refined) < 1e-15);
  }
}

TEST_CASE("gradients flow through weights but not through the mask") {
  Rng rng(23);
  const std::size_t n = 3, p = 4, d = 5;
  const Tensor slots = random_tensor({n, d}, rng);
  const Tensor attention = random_attention(n, p, rng);
  const Tensor token = random_tensor({d}, rng);
  const Tensor emb = random_tensor({p, d}, rng);
  FilterConfig cfg;

  // analytic gradients w.r.t. attention and embeddings
  Tape t;
  Var a_v = t.param(attention);
  Var e_v = t.param(emb);
  Var s_v = t.param(slots);
  FilterVars fv = filter_t(t, e_v, t.constant(token), s_v, a_v, cfg);
  t.backward(t.sum(t.mul(fv.refined, fv.refined)));
  const Tensor ga = t.grad(a_v);
  const Tensor ge = t.grad(e_v);

  // the mask path contributes nothing: slots only feed the mask
  for (double v : t.grad(s_v).data) CHECK(v == 0.0);

  auto loss_at = [&](const Tensor& att, const Tensor& embx) {
    Tape t2;
    FilterVars f2 = filter_t(t2, t2.constant(embx), t2.constant(token), t2.constant(slots),
                             t2.constant(att), cfg);
    return t2.value(t2.sum(t2.mul(f2.refined, f2.refined))).item();
  };
  const Tensor fda =
      finite_diff_grad([&](const Tensor& x) { return loss_at(x, emb); }, attention);
  const Tensor fde =
      finite_diff_grad([&](const Tensor& x) { return loss_at(attention, x); }, emb);
  CHECK(max_abs_diff(ga, fda) < 1e-4);
  CHECK(max_abs_diff(ge, fde) < 1e-4);
}
