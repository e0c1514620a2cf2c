// Command-line harness: synthetic data generation, episodic training and
// evaluation, hyperparameter sweeps, mask-mode comparison, McNemar test,
// multi-seed aggregation, attention export, and gradient checking.
// All emitted tables are line-delimited key=value records.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "saff/data.hpp"
#include "saff/export.hpp"
#include "saff/model.hpp"
#include "saff/stats.hpp"
#include "saff/train.hpp"

namespace {

using namespace saff;

struct EpisodeOpts {
  std::uint64_t seed = 1;
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 15;
  std::size_t episodes = 1000;
  std::size_t train_episodes = 2000;
  std::size_t slots = 5;
  std::size_t iters = 5;
  std::size_t scorer_hidden = 64;
  double lr = 1e-3;
  std::string mask_mode = "weighted";
  double lambda = 2.0;
  double threshold = 0.5;
  std::string ablation = "full";
};

void add_episode_opts(CLI::App* cmd, EpisodeOpts& o, bool with_train = false) {
  cmd->add_option("--seed", o.seed, "rng seed");
  cmd->add_option("--n-way", o.n_way, "classes per episode");
  cmd->add_option("--k-shot", o.k_shot, "support images per class");
  cmd->add_option("--q-per-class", o.q_per_class, "query images per class");
  cmd->add_option("--episodes", o.episodes, "evaluation episodes");
  if (with_train) cmd->add_option("--train-episodes", o.train_episodes, "training episodes");
  cmd->add_option("--slots", o.slots, "number of slots");
  cmd->add_option("--iters", o.iters, "slot-attention iterations");
  cmd->add_option("--scorer-hidden", o.scorer_hidden, "scorer MLP hidden width");
  if (with_train) cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--mask-mode", o.mask_mode, "binary|weighted")
      ->check(CLI::IsMember({"binary", "weighted"}));
  cmd->add_option("--lambda", o.lambda, "class-token influence");
  cmd->add_option("--threshold", o.threshold, "slot similarity threshold");
  cmd->add_option("--ablation", o.ablation, "full|no_filter")
      ->check(CLI::IsMember({"full", "no_filter"}));
  cmd->set_config("--config", "", "key=value configuration file");
}

TrainConfig to_config(const EpisodeOpts& o) {
  TrainConfig cfg;
  cfg.seed = o.seed;
  cfg.n_way = o.n_way;
  cfg.k_shot = o.k_shot;
  cfg.q_per_class = o.q_per_class;
  cfg.episodes_eval = o.episodes;
  cfg.episodes_train = o.train_episodes;
  cfg.slots.n_slots = o.slots;
  cfg.slots.n_iters = o.iters;
  cfg.scorer_hidden = o.scorer_hidden;
  cfg.learning_rate = o.lr;
  cfg.filter.mask_mode = o.mask_mode == "binary" ? MaskMode::binary : MaskMode::weighted;
  cfg.filter.lambda = o.lambda;
  cfg.filter.threshold = o.threshold;
  cfg.ablation = o.ablation == "no_filter" ? Ablation::no_filter : Ablation::full;
  cfg.validate();
  return cfg;
}

void echo_config(const TrainConfig& cfg, const std::string& extra = "") {
  std::cout << "# config: seed=" << cfg.seed << " n_way=" << cfg.n_way
            << " k_shot=" << cfg.k_shot << " q_per_class=" << cfg.q_per_class
            << " episodes_eval=" << cfg.episodes_eval
            << " episodes_train=" << cfg.episodes_train << " slots=" << cfg.slots.n_slots
            << " iters=" << cfg.slots.n_iters << " scorer_hidden=" << cfg.scorer_hidden
            << " lr=" << cfg.learning_rate
            << " mask_mode=" << (cfg.filter.mask_mode == MaskMode::binary ? "binary" : "weighted")
            << " lambda=" << cfg.filter.lambda << " threshold=" << cfg.filter.threshold
            << " ablation=" << (cfg.ablation == Ablation::no_filter ? "no_filter" : "full")
            << (extra.empty() ? "" : " ") << extra << "\n";
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  if (out.empty()) throw usage_error("empty list: " + s);
  return out;
}

ModelParams load_or_init(const std::string& model_path, const FeatureStore& store,
                         const TrainConfig& cfg) {
  Rng init_rng = Rng(cfg.seed).split(2);
  ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init_rng);
  if (!model_path.empty()) load_params(params, model_path);
  return params;
}

void write_preds(const std::string& path, const EvalReport& rep) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw format_error("cannot open for write: " + path);
  os << "seed=" << rep.seed << " n=" << rep.correctness.size() << "\n";
  for (auto b : rep.correctness) os << (b ? '1' : '0');
  os << "\n";
}

PairedPredictions read_pred_pair(const std::string& pa, const std::string& pb) {
  auto read_one = [](const std::string& path, std::vector<std::uint8_t>& bits,
                     std::uint64_t& seed) {
    std::ifstream is(path);
    if (!is) throw format_error("cannot open predictions: " + path);
    std::string header, body;
    std::getline(is, header);
    std::getline(is, body);
    if (std::sscanf(header.c_str(), "seed=%" SCNu64, &seed) != 1)
      throw format_error("predictions: missing seed header in " + path);
    for (char c : body) {
      if (c == '0' || c == '1') bits.push_back(c == '1' ? 1 : 0);
    }
    if (bits.empty()) throw format_error("predictions: empty bitmap in " + path);
  };
  PairedPredictions p;
  std::uint64_t sa = 0, sb = 0;
  read_one(pa, p.a, sa);
  read_one(pb, p.b, sb);
  if (sa != sb)
    throw usage_error("predictions come from different episode streams (seeds " +
                      std::to_string(sa) + " vs " + std::to_string(sb) + ")");
  p.seed = sa;
  return p;
}

void emit_eval(std::ostream& os, const EvalReport& rep) {
  for (std::size_t i = 0; i < rep.per_episode.size(); ++i)
    os << "episode=" << i << " acc=" << rep.per_episode[i] << "\n";
  os << "mean=" << rep.mean_accuracy << " ci=" << rep.ci_halfwidth
     << " episodes=" << rep.per_episode.size() << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"SAFF few-shot classification harness"};
  app.require_subcommand(1);

  // ---- synth-gen ----
  auto* synth = app.add_subcommand("synth-gen", "generate synthetic feature stores");
  std::string synth_out;
  SynthConfig scfg;
  std::size_t classes_train = 20, classes_test = 5, classes_val = 0;
  synth->add_option("--out", synth_out, "output path prefix")->required();
  synth->add_option("--seed", scfg.seed, "rng seed");
  synth->add_option("--classes-train", classes_train, "training classes");
  synth->add_option("--classes-val", classes_val, "validation classes");
  synth->add_option("--classes-test", classes_test, "test classes");
  synth->add_option("--images-per-class", scfg.images_per_class, "images per class");
  synth->add_option("--patches", scfg.patches, "patches per image (P)");
  synth->add_option("--dim", scfg.dim, "embedding dimension (D)");
  synth->add_option("--rho", scfg.relevant_fraction, "fraction of class-relevant patches");
  synth->add_option("--signal-noise", scfg.signal_noise, "noise around class prototypes");
  synth->add_option("--bg-noise", scfg.background_noise, "background spread");
  synth->set_config("--config");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "episodic training");
  std::string tr_store, tr_out, tr_curve;
  EpisodeOpts tr_opts;
  tr->add_option("--store", tr_store, "training feature store")->required();
  tr->add_option("--out", tr_out, "output parameter file")->required();
  tr->add_option("--curve", tr_curve, "loss curve record file");
  add_episode_opts(tr, tr_opts, /*with_train=*/true);

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate on sampled episodes");
  std::string ev_store, ev_model, ev_out, ev_preds;
  EpisodeOpts ev_opts;
  ev->add_option("--store", ev_store, "test feature store")->required();
  ev->add_option("--model", ev_model, "parameter file (untrained seed-init if omitted)");
  ev->add_option("--out", ev_out, "per-episode record file");
  ev->add_option("--preds", ev_preds, "per-query correctness bitmap file");
  add_episode_opts(ev, ev_opts);

  // ---- sweep ----
  auto* sw = app.add_subcommand("sweep", "slots x iterations grid");
  std::string sw_train, sw_test, sw_out, sw_slots = "3,5,10", sw_iters = "3,5,10";
  EpisodeOpts sw_opts;
  sw->add_option("--train-store", sw_train, "training feature store")->required();
  sw->add_option("--store", sw_test, "test feature store")->required();
  sw->add_option("--out", sw_out, "output record file");
  sw->add_option("--slots-list", sw_slots, "comma-separated slot counts");
  sw->add_option("--iters-list", sw_iters, "comma-separated iteration counts");
  add_episode_opts(sw, sw_opts, /*with_train=*/true);

  // ---- compare-masks ----
  auto* cm = app.add_subcommand("compare-masks",
                                "binary vs weighted masking on paired episodes");
  std::string cm_train, cm_test, cm_model, cm_out;
  EpisodeOpts cm_opts;
  cm->add_option("--store", cm_test, "test feature store")->required();
  cm->add_option("--train-store", cm_train, "training store (trains one model per mode)");
  cm->add_option("--model", cm_model, "parameter file (skips training)");
  cm->add_option("--out", cm_out, "output record file");
  add_episode_opts(cm, cm_opts, /*with_train=*/true);

  // ---- mcnemar ----
  auto* mc = app.add_subcommand("mcnemar", "paired significance test");
  std::string mc_a, mc_b;
  long long mc_bc = -1, mc_cc = -1;
  mc->add_option("--preds-a", mc_a, "correctness bitmap of model A");
  mc->add_option("--preds-b", mc_b, "correctness bitmap of model B");
  mc->add_option("--b", mc_bc, "count: A correct, B wrong");
  mc->add_option("--c", mc_cc, "count: A wrong, B correct");

  // ---- seeds ----
  auto* sd = app.add_subcommand("seeds", "multi-seed train/eval with aggregation");
  std::string sd_train, sd_test, sd_seeds = "1,2,3", sd_accs, sd_out;
  EpisodeOpts sd_opts;
  sd->add_option("--train-store", sd_train, "training feature store");
  sd->add_option("--store", sd_test, "test feature store");
  sd->add_option("--seeds", sd_seeds, "comma-separated seeds");
  sd->add_option("--accs", sd_accs, "aggregate given accuracies instead of running");
  sd->add_option("--out", sd_out, "output record file");
  add_episode_opts(sd, sd_opts, /*with_train=*/true);

  // ---- export-attn ----
  auto* ex = app.add_subcommand("export-attn", "dump slot attention internals");
  std::string ex_store, ex_model, ex_out, ex_ids = "0";
  EpisodeOpts ex_opts;
  ex->add_option("--store", ex_store, "feature store")->required();
  ex->add_option("--model", ex_model, "parameter file (untrained seed-init if omitted)");
  ex->add_option("--ids", ex_ids, "comma-separated image ids");
  ex->add_option("--out", ex_out, "output dump file")->required();
  add_episode_opts(ex, ex_opts);

  // ---- gradcheck ----
  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  std::uint64_t gc_seed = 1;
  std::size_t gc_patches = 6, gc_dim = 8;
  EpisodeOpts gc_opts;
  gc_opts.n_way = 2;
  gc_opts.k_shot = 1;
  gc_opts.q_per_class = 2;
  gc_opts.slots = 3;
  gc_opts.iters = 2;
  gc_opts.scorer_hidden = 16;
  gc->add_option("--seed", gc_seed, "rng seed");
  gc->add_option("--patches", gc_patches, "P");
  gc->add_option("--dim", gc_dim, "D");
  gc->add_option("--slots", gc_opts.slots, "slots");
  gc->add_option("--iters", gc_opts.iters, "iterations");

  CLI11_PARSE(app, argc, argv);

  auto open_out = [](const std::string& path) {
    auto os = std::make_unique<std::ofstream>();
    if (!path.empty()) {
      os->open(path, std::ios::trunc);
      if (!*os) throw format_error("cannot open for write: " + path);
    }
    return os;
  };
  auto out_or_stdout = [&](const std::string& path,
                           std::unique_ptr<std::ofstream>& holder) -> std::ostream& {
    holder = open_out(path);
    return path.empty() ? static_cast<std::ostream&>(std::cout) : *holder;
  };

  if (*synth) {
    scfg.validate();
    std::cout << "# config: seed=" << scfg.seed << " classes_train=" << classes_train
              << " classes_val=" << classes_val << " classes_test=" << classes_test
              << " images_per_class=" << scfg.images_per_class << " P=" << scfg.patches
              << " D=" << scfg.dim << " rho=" << scfg.relevant_fraction
              << " signal_noise=" << scfg.signal_noise
              << " bg_noise=" << scfg.background_noise << "\n";
    Rng root(scfg.seed);
    auto gen = [&](Split split, const char* prefix, std::size_t n, std::uint64_t stream,
                   const std::string& suffix) {
      if (n == 0) return;
      SynthConfig c = scfg;
      c.n_classes = n;
      c.split = split;
      c.class_prefix = prefix;
      c.seed = root.split(stream).next_u64();
      const std::string path = synth_out + suffix;
      save_store(generate_synthetic(c), path);
      std::cout << "wrote=" << path << " classes=" << n << "\n";
    };
    gen(Split::train, "train", classes_train, 0, ".train.saff");
    gen(Split::val, "val", classes_val, 1, ".val.saff");
    gen(Split::test, "test", classes_test, 2, ".test.saff");
    return 0;
  }

  if (*tr) {
    TrainConfig cfg = to_config(tr_opts);
    echo_config(cfg, "store=" + tr_store);
    FeatureStore store = load_store(tr_store);
    TrainResult res = train(store, cfg);
    save_params(res.params, tr_out);
    std::unique_ptr<std::ofstream> holder;
    std::ostream& os = out_or_stdout(tr_curve, holder);
    for (std::size_t i = 0; i < res.loss_curve.size(); ++i)
      os << "step=" << i << " loss=" << res.loss_curve[i] << "\n";
    std::cout << "wrote=" << tr_out << " steps=" << res.loss_curve.size() << "\n";
    return 0;
  }

  if (*ev) {
    TrainConfig cfg = to_config(ev_opts);
    echo_config(cfg, "store=" + ev_store + (ev_model.empty() ? "" : " model=" + ev_model));
    FeatureStore store = load_store(ev_store);
    ModelParams params = load_or_init(ev_model, store, cfg);
    EvalReport rep = evaluate(store, params, cfg);
    std::unique_ptr<std::ofstream> holder;
    emit_eval(out_or_stdout(ev_out, holder), rep);
    if (!ev_out.empty())
      std::cout << "mean=" << rep.mean_accuracy << " ci=" << rep.ci_halfwidth
                << " episodes=" << rep.per_episode.size() << "\n";
    if (!ev_preds.empty()) write_preds(ev_preds, rep);
    return 0;
  }

  if (*sw) {
    TrainConfig base = to_config(sw_opts);
    echo_config(base, "train_store=" + sw_train + " store=" + sw_test);
    FeatureStore train_store = load_store(sw_train);
    FeatureStore test_store = load_store(sw_test);
    check_split_disjoint(train_store, test_store);
    std::unique_ptr<std::ofstream> holder;
    std::ostream& os = out_or_stdout(sw_out, holder);
    for (std::size_t s : parse_size_list(sw_slots)) {
      for (std::size_t it : parse_size_list(sw_iters)) {
        TrainConfig cfg = base;
        cfg.slots.n_slots = s;
        cfg.slots.n_iters = it;
        TrainResult res = train(train_store, cfg);
        EvalReport rep = evaluate(test_store, res.params, cfg);
        os << "slots=" << s << " iters=" << it << " acc=" << rep.mean_accuracy
           << " ci=" << rep.ci_halfwidth << "\n";
      }
    }
    return 0;
  }

  if (*cm) {
    TrainConfig base = to_config(cm_opts);
    echo_config(base, "store=" + cm_test);
    FeatureStore test_store = load_store(cm_test);
    std::unique_ptr<std::ofstream> holder;
    std::ostream& os = out_or_stdout(cm_out, holder);
    for (const std::string mode : {"weighted", "binary"}) {
      TrainConfig cfg = base;
      cfg.filter.mask_mode = mode == std::string("binary") ? MaskMode::binary
                                                           : MaskMode::weighted;
      ModelParams params = [&] {
        if (!cm_model.empty()) {
          return load_or_init(cm_model, test_store, cfg);
        }
        if (!cm_train.empty()) {
          FeatureStore train_store = load_store(cm_train);
          check_split_disjoint(train_store, test_store);
          return train(train_store, cfg).params;
        }
        return load_or_init("", test_store, cfg);
      }();
      EvalReport rep = evaluate(test_store, params, cfg);  // same seed: paired episodes
      os << "mask=" << mode << " acc=" << rep.mean_accuracy << " ci=" << rep.ci_halfwidth
         << " episodes=" << rep.per_episode.size() << " seed=" << rep.seed << "\n";
    }
    return 0;
  }

  if (*mc) {
    McNemarResult r;
    if (!mc_a.empty() || !mc_b.empty()) {
      if (mc_a.empty() || mc_b.empty())
        throw usage_error("mcnemar: both --preds-a and --preds-b are required");
      r = mcnemar(read_pred_pair(mc_a, mc_b));
    } else if (mc_bc >= 0 && mc_cc >= 0) {
      r = mcnemar_counts(static_cast<std::size_t>(mc_bc), static_cast<std::size_t>(mc_cc));
    } else {
      throw usage_error("mcnemar: provide --preds-a/--preds-b or --b/--c");
    }
    std::cout << "b=" << r.b << " c=" << r.c << " chi2=" << r.chi2
              << " p_value=" << r.p_value << "\n";
    return 0;
  }

  if (*sd) {
    std::vector<double> accs;
    std::unique_ptr<std::ofstream> holder;
    std::ostream& os = out_or_stdout(sd_out, holder);
    if (!sd_accs.empty()) {
      std::stringstream ss(sd_accs);
      std::string item;
      while (std::getline(ss, item, ',')) accs.push_back(std::stod(item));
      for (std::size_t i = 0; i < accs.size(); ++i)
        os << "seed_index=" << i << " acc=" << accs[i] << "\n";
    } else {
      if (sd_train.empty() || sd_test.empty())
        throw usage_error("seeds: provide --train-store/--store or --accs");
      TrainConfig base = to_config(sd_opts);
      echo_config(base, "train_store=" + sd_train + " store=" + sd_test);
      FeatureStore train_store = load_store(sd_train);
      FeatureStore test_store = load_store(sd_test);
      check_split_disjoint(train_store, test_store);
      for (std::size_t seed : parse_size_list(sd_seeds)) {
        TrainConfig cfg = base;
        cfg.seed = seed;
        TrainResult res = train(train_store, cfg);
        EvalReport rep = evaluate(test_store, res.params, cfg);
        accs.push_back(rep.mean_accuracy);
        os << "seed=" << seed << " acc=" << rep.mean_accuracy << " ci=" << rep.ci_halfwidth
           << "\n";
      }
    }
    const SeedStats st = aggregate_seeds(accs);
    os << "median=" << st.median << " mean=" << st.mean << " std=" << st.stddev << "\n";
    return 0;
  }

  if (*ex) {
    TrainConfig cfg = to_config(ex_opts);
    echo_config(cfg, "store=" + ex_store + " out=" + ex_out);
    FeatureStore store = load_store(ex_store);
    ModelParams params = load_or_init(ex_model, store, cfg);
    export_attention(store, params, cfg, parse_size_list(ex_ids), ex_out);
    std::cout << "wrote=" << ex_out << "\n";
    return 0;
  }

  if (*gc) {
    TrainConfig cfg = to_config(gc_opts);
    cfg.seed = gc_seed;
    echo_config(cfg, "P=" + std::to_string(gc_patches) + " D=" + std::to_string(gc_dim));
    SynthConfig sc;
    sc.n_classes = 4;
    sc.images_per_class = 6;
    sc.patches = gc_patches;
    sc.dim = gc_dim;
    sc.seed = gc_seed;
    FeatureStore store = generate_synthetic(sc);
    Rng init_rng = Rng(cfg.seed).split(2);
    ModelParams params = ModelParams::init(store.patches, store.dim, cfg.scorer_hidden, init_rng);
    // the scorer's output layer starts at zero, which would cut the
    // gradient to everything upstream; give it values so every group is
    // actually exercised
    for (double& v : params.scorer.w2.data) v = 0.3 * init_rng.normal();
    params.scorer.b2.data[0] = 0.1;
    Rng ep_rng = Rng(cfg.seed).split(0);
    Episode ep = sample_episode(store, cfg.n_way, cfg.k_shot, cfg.q_per_class, ep_rng);
    GradCheckReport rep = grad_check(params, ep, cfg);
    for (const auto& g : rep.groups)
      std::cout << "group=" << g.name << " rel_error=" << g.rel_error << "\n";
    std::cout << "max_rel_error=" << rep.max_rel_error << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const saff::usage_error& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const saff::shape_error& e) {
    std::cerr << "error: shape: " << e.what() << "\n";
    return 3;
  } catch (const saff::format_error& e) {
    std::cerr << "error: format: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
