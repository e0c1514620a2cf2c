#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "saff/autodiff.hpp"
#include "saff/rng.hpp"
#include "saff/scorer.hpp"
#include "saff/slot_attention.hpp"
#include "saff/tensor.hpp"

namespace saff {

// Every trainable parameter of the pipeline.
struct ModelParams {
  SlotAttentionParams slot;
  ScorerParams scorer;

  static ModelParams init(std::size_t patches, std::size_t dim, std::size_t scorer_hidden,
                          Rng& rng, double noise_scale = 0.1) {
    ModelParams p;
    p.slot = SlotAttentionParams::init(dim, rng, noise_scale);
    p.scorer = ScorerParams::init(patches, scorer_hidden, rng);
    return p;
  }

  template <class F>
  void visit(F&& f) {
    slot.visit(f);
    scorer.visit(f);
  }

  std::size_t tensor_count() {
    std::size_t n = 0;
    visit([&](const char*, Tensor&) { ++n; });
    return n;
  }
};

struct ModelVars {
  SlotParamVars slot;
  ScorerParamVars scorer;
  std::vector<Var> all;  // in ModelParams::visit order
};

inline ModelVars bind_model(Tape& t, ModelParams& p, bool trainable = true) {
  ModelVars v;
  v.slot = bind(t, p.slot, trainable);
  v.scorer = bind(t, p.scorer, trainable);
  v.all = {v.slot.w_q,      v.slot.w_k,      v.slot.w_v,      v.slot.gru.wz,
           v.slot.gru.uz,   v.slot.gru.bz,   v.slot.gru.wr,   v.slot.gru.ur,
           v.slot.gru.br,   v.slot.gru.wh,   v.slot.gru.uh,   v.slot.gru.bh,
           v.slot.mlp_w1,   v.slot.mlp_b1,   v.slot.mlp_w2,   v.slot.mlp_b2,
           v.slot.ln_in_g,  v.slot.ln_in_b,  v.slot.ln_slot_g, v.slot.ln_slot_b,
           v.slot.ln_mlp_g, v.slot.ln_mlp_b, v.slot.noise_scale,
           v.scorer.w1,     v.scorer.b1,     v.scorer.w2,     v.scorer.b2};
  return v;
}

// ---- parameter file: magic "SAFP" | version u16 = 1 | tensor count u32 |
// per tensor: name (u32 len + bytes) | ndim u32 | dims u64 each | f64 LE data

inline void save_params(ModelParams& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error("params file: cannot open for write: " + path);
  os.write("SAFP", 4);
  auto put16 = [&](std::uint16_t v) { os.put(char(v & 0xff)); os.put(char(v >> 8)); };
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(char((v >> (8 * i)) & 0xff));
  };
  auto put64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(char((v >> (8 * i)) & 0xff));
  };
  put16(1);
  put32(static_cast<std::uint32_t>(p.tensor_count()));
  p.visit([&](const char* name, Tensor& t) {
    const std::string n(name);
    put32(static_cast<std::uint32_t>(n.size()));
    os.write(n.data(), static_cast<std::streamsize>(n.size()));
    put32(static_cast<std::uint32_t>(t.ndim()));
    for (auto e : t.shape) put64(e);
    for (double v : t.data) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      std::memcpy(&bits, &v, 8);
      put64(bits);
    }
  });
  if (!os) throw format_error("params file: write failed: " + path);
}

inline void load_params(ModelParams& p, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("params file: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SAFP", 4) != 0) throw format_error("params file: bad magic");
  auto get8 = [&]() {
    const int c = is.get();
    if (c < 0) throw format_error("params file: truncated");
    return static_cast<std::uint64_t>(c);
  };
  auto get16 = [&]() { auto a = get8(), b = get8(); return std::uint16_t(a | (b << 8)); };
  auto get32 = [&]() {
    std::uint64_t v = 0;
    for (int i = 0; i < 4; ++i) v |= get8() << (8 * i);
    return std::uint32_t(v);
  };
  auto get64 = [&]() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= get8() << (8 * i);
    return v;
  };
  if (get16() != 1) throw format_error("params file: unsupported version");
  const auto count = get32();
  if (count != p.tensor_count())
    throw format_error("params file: tensor count mismatch (model shape differs)");
  p.visit([&](const char* name, Tensor& t) {
    const auto len = get32();
    std::string n(len, '\0');
    is.read(n.data(), len);
    if (!is || n != name) throw format_error("params file: unexpected tensor '" + n + "'");
    const auto nd = get32();
    std::vector<std::size_t> shape(nd);
    for (auto& e : shape) e = static_cast<std::size_t>(get64());
    if (shape != t.shape) throw format_error("params file: shape mismatch for '" + n + "'");
    for (double& v : t.data) {
      const std::uint64_t bits = get64();
      std::memcpy(&v, &bits, 8);
    }
  });
}

}  // namespace saff
