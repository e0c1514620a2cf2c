#pragma once

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "saff/data.hpp"
#include "saff/filter.hpp"
#include "saff/model.hpp"
#include "saff/train.hpp"

namespace saff {

namespace detail {

inline std::string fmt_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_values(std::ostream& os, const char* key, const Tensor& t) {
  os << ' ' << key << '=';
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) os << ',';
    os << fmt_full(t.data[i]);
  }
}

}  // namespace detail

// Line-delimited dump of the filtering internals for selected images:
// one record per iteration (the full N x P attention of that iteration)
// plus a final record with slot similarities, the mask, and the combined
// attention. Values are serialized at full precision, so the dump is
// byte-reproducible and numerically equal to the forward pass.
inline void export_attention(const FeatureStore& store, ModelParams& params,
                             const TrainConfig& cfg, const std::vector<std::size_t>& ids,
                             const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw format_error("export: cannot open for write: " + path);
  Rng root(cfg.seed);
  for (std::size_t id : ids) {
    if (id >= store.records.size())
      throw usage_error("export: unknown image id " + std::to_string(id));
    const ImageFeatures& img = store.records[id];
    Tape t;
    ModelVars mv = bind_model(t, params, /*trainable=*/false);
    Rng noise = root.split(3).split(id);
    SlotRun run = run_slot_attention(t, t.constant(img.patches), t.constant(img.class_token),
                                     cfg.slots.n_slots, cfg.slots.n_iters, mv.slot, noise,
                                     /*trace=*/true);
    FilterVars f = filter_t(t, t.constant(img.patches), t.constant(img.class_token),
                            run.slots, run.attention, cfg.filter);
    for (std::size_t it = 0; it < run.per_iter_attention.size(); ++it) {
      const Tensor& a = run.per_iter_attention[it];
      os << "image=" << id << " iter=" << it << " slots=" << a.rows()
         << " patches=" << a.cols();
      detail::write_values(os, "attn", a);
      os << '\n';
    }
    os << "image=" << id << " final slots=" << f.similarity.size()
       << " patches=" << t.value(f.combined).size();
    detail::write_values(os, "similarity", f.similarity);
    detail::write_values(os, "similarity_norm", f.similarity_norm);
    os << " mask=";
    for (std::size_t i = 0; i < f.mask.size(); ++i) {
      if (i) os << ',';
      os << static_cast<int>(f.mask.data[i]);
    }
    os << " n_passing=" << f.n_passing;
    detail::write_values(os, "combined", t.value(f.combined));
    os << '\n';
  }
  if (!os) throw format_error("export: write failed: " + path);
}

}  // namespace saff
