#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "saff/rng.hpp"
#include "saff/tensor.hpp"

namespace saff {

struct ImageFeatures {
  std::uint32_t label = 0;
  Tensor patches;      // P x D
  Tensor class_token;  // D
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw format_error("metadata: unknown split '" + s + "'");
}

struct FeatureStore {
  std::size_t patches = 0;  // P
  std::size_t dim = 0;      // D
  std::vector<std::string> class_names;
  std::vector<ImageFeatures> records;
  Split split = Split::train;

  // label -> record indices, in file order
  std::map<std::uint32_t, std::vector<std::size_t>> by_class() const {
    std::map<std::uint32_t, std::vector<std::size_t>> m;
    for (std::size_t i = 0; i < records.size(); ++i) m[records[i].label].push_back(i);
    return m;
  }
};

struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t q_per_class = 0;
  // support grouped contiguously by episode class: index n*K+k;
  // queries likewise n*Q+q. Labels remapped to [0, n_way).
  std::vector<ImageFeatures> support;
  std::vector<ImageFeatures> query;
  std::vector<std::size_t> query_labels;
};

struct SynthConfig {
  std::size_t n_classes = 5;
  std::size_t images_per_class = 30;
  std::size_t patches = 9;   // P
  std::size_t dim = 16;      // D
  double relevant_fraction = 0.3;  // rho
  double signal_noise = 0.25;      // sigma_s
  double background_noise = 0.5;   // sigma_b
  std::uint64_t seed = 1;
  std::string class_prefix = "class";  // names must differ across splits
  Split split = Split::train;

  void validate() const {
    if (relevant_fraction <= 0.0 || relevant_fraction > 1.0)
      throw usage_error("synth: relevant_fraction must be in (0,1]");
    if (std::ceil(relevant_fraction * static_cast<double>(patches)) < 1.0)
      throw usage_error("synth: rho * P must be >= 1");
    if (n_classes == 0 || images_per_class == 0 || patches == 0 || dim == 0)
      throw usage_error("synth: counts must be positive");
  }
};

// Per class, a Gaussian prototype mu_c; ceil(rho*P) patches per image are
// mu_c + sigma_s * noise at random positions, the rest are drawn from one
// background Gaussian shared across classes (so background patches carry
// no class information). The class token is mu_c + sigma_s * noise.
inline FeatureStore generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  FeatureStore store;
  store.patches = cfg.patches;
  store.dim = cfg.dim;
  store.split = cfg.split;

  Tensor background = Tensor::zeros({cfg.dim});
  for (double& v : background.data) v = rng.normal();

  const std::size_t n_relevant = static_cast<std::size_t>(
      std::ceil(cfg.relevant_fraction * static_cast<double>(cfg.patches)));

  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    store.class_names.push_back(cfg.class_prefix + "_" + std::to_string(c));
    Tensor proto = Tensor::zeros({cfg.dim});
    for (double& v : proto.data) v = rng.normal();

    for (std::size_t img = 0; img < cfg.images_per_class; ++img) {
      ImageFeatures f;
      f.label = static_cast<std::uint32_t>(c);
      f.patches = Tensor::zeros({cfg.patches, cfg.dim});
      f.class_token = Tensor::zeros({cfg.dim});

      // random relevant positions via partial Fisher-Yates
      std::vector<std::size_t> pos(cfg.patches);
      for (std::size_t i = 0; i < cfg.patches; ++i) pos[i] = i;
      for (std::size_t i = 0; i < n_relevant; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(cfg.patches - i));
        std::swap(pos[i], pos[j]);
      }
      std::vector<bool> relevant(cfg.patches, false);
      for (std::size_t i = 0; i < n_relevant; ++i) relevant[pos[i]] = true;

      for (std::size_t p = 0; p < cfg.patches; ++p) {
        for (std::size_t j = 0; j < cfg.dim; ++j) {
          f.patches.at(p, j) = relevant[p]
                                   ? proto.data[j] + cfg.signal_noise * rng.normal()
                                   : background.data[j] + cfg.background_noise * rng.normal();
        }
      }
      for (std::size_t j = 0; j < cfg.dim; ++j)
        f.class_token.data[j] = proto.data[j] + cfg.signal_noise * rng.normal();
      store.records.push_back(std::move(f));
    }
  }
  return store;
}

// ---- binary feature file format ----
// magic "SAFF" | version u16 LE = 1 | P u32 | D u32 | n_classes u32 |
// n_images u64 | class-name table (u32 byte length + UTF-8, per class) |
// records: label u32 | class_token D x f32 LE | patches P x D x f32 row-major.
// Split membership lives in an adjacent "<path>.meta" text file.

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put<std::uint32_t>(os, bits);
}

template <class T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw format_error("feature file: truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline float get_f32(std::istream& is) {
  const std::uint32_t bits = get<std::uint32_t>(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline void save_store(const FeatureStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error("feature file: cannot open for write: " + path);
  os.write("SAFF", 4);
  detail::put<std::uint16_t>(os, 1);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(store.patches));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(store.dim));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(store.class_names.size()));
  detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(store.records.size()));
  for (const auto& name : store.class_names) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (const auto& rec : store.records) {
    detail::put<std::uint32_t>(os, rec.label);
    for (double v : rec.class_token.data) detail::put_f32(os, static_cast<float>(v));
    for (double v : rec.patches.data) detail::put_f32(os, static_cast<float>(v));
  }
  os.flush();
  if (!os) throw format_error("feature file: write failed: " + path);

  std::ofstream meta(path + ".meta", std::ios::trunc);
  meta << "split=" << split_name(store.split) << "\n";
}

inline FeatureStore load_store(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("feature file: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SAFF", 4) != 0)
    throw format_error("feature file: bad magic");
  const auto version = detail::get<std::uint16_t>(is);
  if (version != 1)
    throw format_error("feature file: unsupported version " + std::to_string(version));
  FeatureStore store;
  store.patches = detail::get<std::uint32_t>(is);
  store.dim = detail::get<std::uint32_t>(is);
  const auto n_classes = detail::get<std::uint32_t>(is);
  const auto n_images = detail::get<std::uint64_t>(is);
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    const auto len = detail::get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw format_error("feature file: truncated class-name table");
    store.class_names.push_back(std::move(name));
  }
  for (std::uint64_t i = 0; i < n_images; ++i) {
    ImageFeatures rec;
    rec.label = detail::get<std::uint32_t>(is);
    if (rec.label >= n_classes)
      throw format_error("feature file: label out of range in record " + std::to_string(i) +
                         " (label " + std::to_string(rec.label) + ")");
    rec.class_token = Tensor::zeros({store.dim});
    for (double& v : rec.class_token.data) v = detail::get_f32(is);
    rec.patches = Tensor::zeros({store.patches, store.dim});
    for (double& v : rec.patches.data) v = detail::get_f32(is);
    if (!rec.class_token.all_finite() || !rec.patches.all_finite())
      throw format_error("feature file: non-finite values in record " + std::to_string(i));
    store.records.push_back(std::move(rec));
  }

  std::ifstream meta(path + ".meta");
  if (meta) {
    std::string line;
    while (std::getline(meta, line)) {
      if (line.rfind("split=", 0) == 0) store.split = split_from_name(line.substr(6));
    }
  }
  return store;
}

// labels must not overlap across splits; checked by class name
inline void check_split_disjoint(const FeatureStore& a, const FeatureStore& b) {
  for (const auto& na : a.class_names)
    for (const auto& nb : b.class_names)
      if (na == nb)
        throw usage_error("stores share class '" + na + "' across splits");
}

// N classes without replacement; per class K+Q distinct images, first K
// to support, next Q to query. Fully determined by the rng state.
inline Episode sample_episode(const FeatureStore& store, std::size_t n_way,
                              std::size_t k_shot, std::size_t q_per_class, Rng& rng) {
  const auto classes = store.by_class();
  if (classes.size() < n_way)
    throw usage_error("sample_episode: store has " + std::to_string(classes.size()) +
                      " classes, need " + std::to_string(n_way));
  std::vector<std::uint32_t> labels;
  labels.reserve(classes.size());
  for (const auto& [label, idx] : classes) {
    if (idx.size() < k_shot + q_per_class)
      throw usage_error("sample_episode: class " + std::to_string(label) + " has " +
                        std::to_string(idx.size()) + " images, need " +
                        std::to_string(k_shot + q_per_class));
    labels.push_back(label);
  }
  // choose n_way classes
  for (std::size_t i = 0; i < n_way; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(labels.size() - i));
    std::swap(labels[i], labels[j]);
  }

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.q_per_class = q_per_class;
  for (std::size_t n = 0; n < n_way; ++n) {
    const auto& idx = classes.at(labels[n]);
    std::vector<std::size_t> pick(idx);
    for (std::size_t i = 0; i < k_shot + q_per_class; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(pick.size() - i));
      std::swap(pick[i], pick[j]);
    }
    for (std::size_t k = 0; k < k_shot; ++k) {
      ImageFeatures f = store.records[pick[k]];
      f.label = static_cast<std::uint32_t>(n);
      ep.support.push_back(std::move(f));
    }
    for (std::size_t q = 0; q < q_per_class; ++q) {
      ImageFeatures f = store.records[pick[k_shot + q]];
      f.label = static_cast<std::uint32_t>(n);
      ep.query.push_back(std::move(f));
      ep.query_labels.push_back(n);
    }
  }
  return ep;
}

}  // namespace saff
