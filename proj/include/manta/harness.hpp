#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "manta/contrastive.hpp"
#include "manta/dtw.hpp"
#include "manta/episodic.hpp"
#include "manta/matryoshka.hpp"
#include "manta/rng.hpp"
#include "manta/ssm.hpp"
#include "manta/task_gen.hpp"
#include "manta/tensor.hpp"

namespace manta {

// ------------------------------- run config --------------------------------

struct RunConfig {
  // episode generation
  std::size_t n_way = 5, k_shot = 1, q_per_class = 1;
  std::size_t frames = 32, feat_dim = 16, motif_len = 6;
  double noise_std = 0.8;
  std::uint64_t seed = 0;
  // programmatic knobs without config-file keys
  double jitter_lo = 2.4, jitter_hi = 3.6;
  double motif_dc = 0.42, motif_wave = 1.15, motif_ramp = 0.5;
  long long fixed_offset = -1;
  // eval-time perturbations
  std::size_t frame_noise = 0;
  double sample_noise_ratio = 0.0;
  double gaussian_bg_std = 0.0;
  bool reverse_support = false;
  // model
  std::vector<std::size_t> scales{1, 2, 4};
  std::size_t n_state = 16;
  std::size_t conv_channels = 4;
  std::size_t d_embed = 64;
  double tau = 0.07;
  // objective and optimization
  double lambda = 4.0;
  double lr = 1e-3;
  double momentum = 0.0;   // plain SGD unless flagged (programmatic knob)
  double grad_clip = 20.0;  // global-norm guard against the reciprocal-distance
                            // gradient spikes of the cross distance; 0 = off
  std::size_t episodes = 3000;
  std::size_t eval_every = 100;
  // ablations
  bool disable_inner = false, disable_outer = false, disable_hc = false;
  Fragmenting fragmenting = Fragmenting::non_overlapping;
  bool selective = false;

  EpisodeSpec episode_spec() const {
    EpisodeSpec s;
    s.n_way = n_way;
    s.k_shot = k_shot;
    s.q_per_class = q_per_class;
    s.frames = frames;
    s.feat_dim = feat_dim;
    s.motif_len = motif_len;
    s.noise_std = noise_std;
    s.seed = seed;
    s.jitter_lo = jitter_lo;
    s.jitter_hi = jitter_hi;
    s.motif_dc = motif_dc;
    s.motif_wave = motif_wave;
    s.motif_ramp = motif_ramp;
    s.fixed_offset = fixed_offset;
    return s;
  }

  NoiseConfig noise_config() const {
    NoiseConfig n;
    n.frame_noise_count = frame_noise;
    n.sample_noise_ratio = sample_noise_ratio;
    n.gaussian_bg_std = gaussian_bg_std;
    n.reverse_support = reverse_support;
    return n;
  }

  MatryoshkaConfig matryoshka_config(bool training) const {
    MatryoshkaConfig m{ScaleSet::make(scales)};
    m.disable_inner = disable_inner;
    m.disable_outer = disable_outer;
    m.fragmenting = fragmenting;
    m.training = training;
    return m;
  }

  void validate() const {
    episode_spec().validate();
    ScaleSet::make(scales).validate_for(frames);
    if (lambda <= 0) throw std::invalid_argument("config: lambda must be positive");
    if (lr <= 0) throw std::invalid_argument("config: lr must be positive");
    if (tau <= 0) throw std::invalid_argument("config: tau must be positive");
    if (n_state < 1) throw std::invalid_argument("config: n_state must be >= 1");
    if (frame_noise > frames)
      throw std::invalid_argument("config: frame_noise exceeds frames");
    if (sample_noise_ratio < 0 || sample_noise_ratio > 1)
      throw std::invalid_argument("config: sample_noise_ratio must lie in [0, 1]");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
  if (used != v.size())
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t out;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  }
  if (used != v.size())
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  return out;
}

}  // namespace detail

// Applies one `key = value` assignment; unknown keys are errors.
inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_u64;
  if (key == "n_way") cfg.n_way = parse_u64(key, value);
  else if (key == "k_shot") cfg.k_shot = parse_u64(key, value);
  else if (key == "q_per_class") cfg.q_per_class = parse_u64(key, value);
  else if (key == "frames") cfg.frames = parse_u64(key, value);
  else if (key == "feat_dim") cfg.feat_dim = parse_u64(key, value);
  else if (key == "motif_len") cfg.motif_len = parse_u64(key, value);
  else if (key == "noise_std") cfg.noise_std = parse_double(key, value);
  else if (key == "scales") {
    std::vector<std::size_t> scales;
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ','))
      scales.push_back(parse_u64("scales", detail::trim(part)));
    if (scales.empty()) throw std::invalid_argument("config: scales list is empty");
    cfg.scales = std::move(scales);
  } else if (key == "n_state") cfg.n_state = parse_u64(key, value);
  else if (key == "tau") cfg.tau = parse_double(key, value);
  else if (key == "lambda") cfg.lambda = parse_double(key, value);
  else if (key == "lr") cfg.lr = parse_double(key, value);
  else if (key == "episodes") cfg.episodes = parse_u64(key, value);
  else if (key == "eval_every") cfg.eval_every = parse_u64(key, value);
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "frame_noise") cfg.frame_noise = parse_u64(key, value);
  else if (key == "sample_noise_ratio") cfg.sample_noise_ratio = parse_double(key, value);
  else if (key == "gaussian_bg_std") cfg.gaussian_bg_std = parse_double(key, value);
  else if (key == "reverse_support") cfg.reverse_support = parse_bool(key, value);
  else if (key == "disable_inner") cfg.disable_inner = parse_bool(key, value);
  else if (key == "disable_outer") cfg.disable_outer = parse_bool(key, value);
  else if (key == "disable_hc") cfg.disable_hc = parse_bool(key, value);
  else if (key == "fragmenting") {
    if (value == "non_overlapping") cfg.fragmenting = Fragmenting::non_overlapping;
    else if (value == "sliding") cfg.fragmenting = Fragmenting::sliding;
    else throw std::invalid_argument("config: fragmenting must be non_overlapping or sliding");
  } else if (key == "selective") cfg.selective = parse_bool(key, value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

// Line-oriented `key = value` text; blank lines and '#' comments allowed.
inline RunConfig parse_config(std::istream& in, RunConfig base = RunConfig{}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not 'key = value': '" + t + "'");
    config_set(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return base;
}

inline RunConfig parse_config_file(const std::string& path, RunConfig base = RunConfig{}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  return parse_config(f, std::move(base));
}

// ------------------------------- full model --------------------------------

struct MantaParams {
  MatryoshkaParams trunk;
  ContrastiveConfig contrastive;

  static MantaParams init(const RunConfig& cfg) {
    Rng rng(cfg.seed ^ 0xA11CE5EEDULL);
    MantaParams p;
    p.trunk = MatryoshkaParams::init(ScaleSet::make(cfg.scales), cfg.feat_dim, cfg.n_state,
                                     cfg.conv_channels, rng, cfg.selective);
    p.contrastive = ContrastiveConfig::init(cfg.feat_dim, cfg.d_embed, rng);
    p.contrastive.tau = cfg.tau;
    for (auto& [name, t] : p.named_params()) {
      (void)name;
      t->require_grad();
    }
    return p;
  }

  // Every trainable array, with stable names (sorted scales first).
  std::vector<std::pair<std::string, Tensor*>> named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add_ssm = [&](const std::string& prefix, SsmParams& s) {
      out.emplace_back(prefix + ".a_log", &s.a_log);
      out.emplace_back(prefix + ".b_proj", &s.b_proj);
      out.emplace_back(prefix + ".c_proj", &s.c_proj);
      out.emplace_back(prefix + ".delta_log", &s.delta_log);
      out.emplace_back(prefix + ".skip_gain", &s.skip_gain);
      if (s.selective) {
        out.emplace_back(prefix + ".w_delta", &s.w_delta);
        out.emplace_back(prefix + ".w_b", &s.w_b);
        out.emplace_back(prefix + ".w_c", &s.w_c);
      }
    };
    for (auto& [o, sp] : trunk.inner) {
      const std::string base = "inner.o" + std::to_string(o);
      add_ssm(base + ".fw", sp.inner_fw);
      add_ssm(base + ".bw", sp.inner_bw);
      out.emplace_back(base + ".fuse_w", &sp.fuse_w);
      out.emplace_back(base + ".fuse_b", &sp.fuse_b);
    }
    add_ssm("outer", trunk.outer);
    out.emplace_back("outer.fuse_w", &trunk.outer_fuse_w);
    out.emplace_back("outer.fuse_b", &trunk.outer_fuse_b);
    out.emplace_back("conv.k1", &trunk.conv.k1);
    out.emplace_back("conv.b1", &trunk.conv.b1);
    out.emplace_back("conv.k2", &trunk.conv.k2);
    out.emplace_back("conv.b2", &trunk.conv.b2);
    out.emplace_back("conv.k3", &trunk.conv.k3);
    out.emplace_back("conv.b3", &trunk.conv.b3);
    out.emplace_back("conv.bn_gamma", &trunk.conv.bn_gamma);
    out.emplace_back("conv.bn_beta", &trunk.conv.bn_beta);
    out.emplace_back("contrastive.head_w", &contrastive.head_w);
    return out;
  }

  void zero_grads() {
    for (auto& [name, t] : named_params()) {
      (void)name;
      t->zero_grad();
    }
  }
};

// Checkpoint/config dimensional agreement, rejected with both shapes.
inline void validate_params_match(MantaParams& params, const RunConfig& cfg) {
  if (params.trunk.width() != cfg.feat_dim)
    throw std::invalid_argument("evaluate: checkpoint feature width " +
                                std::to_string(params.trunk.width()) +
                                " does not match config feat_dim " + std::to_string(cfg.feat_dim));
  if (params.trunk.outer.n_state() != cfg.n_state)
    throw std::invalid_argument("evaluate: checkpoint n_state " +
                                std::to_string(params.trunk.outer.n_state()) +
                                " does not match config n_state " + std::to_string(cfg.n_state));
  ScaleSet want = ScaleSet::make(cfg.scales);
  std::vector<std::size_t> have;
  for (auto& [o, sp] : params.trunk.inner) {
    (void)sp;
    have.push_back(o);
  }
  if (have != want.scales) {
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    throw std::invalid_argument("evaluate: checkpoint scales {" + list(have) +
                                "} do not match config scales {" + list(want.scales) + "}");
  }
}

// ----------------------------- episode forward -----------------------------

struct ForwardResult {
  Tensor loss_total, loss_ce, loss_hc;
  std::vector<std::size_t> predictions;
  std::size_t correct = 0;
  // gated per-scale outputs captured for alignment diagnostics
  std::vector<std::vector<Tensor>> support_scales, query_scales;  // [sample][scale]
};

// Both branches of one episode: Matryoshka trunk -> prototypes -> symmetric
// cross-distance classification (lambda-weighted cross entropy), plus the
// hybrid contrastive loss on the raw backbone features. The contrastive
// branch only runs in training mode.
inline ForwardResult episode_forward(Graph* g, MantaParams& params, const EpisodeBatch& batch,
                                     const RunConfig& cfg, bool training,
                                     bool capture_scales = false) {
  MatryoshkaConfig mcfg = cfg.matryoshka_config(training);
  ForwardResult out;

  const std::size_t n = batch.spec.n_way, k = batch.spec.k_shot;
  std::vector<std::vector<Tensor>> class_feats(n);
  for (std::size_t i = 0; i < batch.support.size(); ++i) {
    MatryoshkaOutput m = matryoshka_forward_detail(g, batch.support[i], mcfg, params.trunk);
    class_feats[batch.support_labels[i]].push_back(m.output);
    if (capture_scales) out.support_scales.push_back(std::move(m.per_scale));
  }
  std::vector<Tensor> prototypes;
  prototypes.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    if (class_feats[c].size() != k)
      throw std::invalid_argument("episode_forward: class " + std::to_string(c) +
                                  " does not have exactly K supports");
    prototypes.push_back(build_prototype(g, class_feats[c]));
  }

  Tensor ce_acc;
  for (std::size_t qi = 0; qi < batch.query.size(); ++qi) {
    MatryoshkaOutput m = matryoshka_forward_detail(g, batch.query[qi], mcfg, params.trunk);
    if (capture_scales) out.query_scales.push_back(m.per_scale);
    Classification cls = classify(g, m.output, prototypes);
    out.predictions.push_back(cls.predicted);
    if (cls.predicted == batch.query_labels[qi]) ++out.correct;
    std::vector<Tensor> dists;
    dists.reserve(n);
    for (const DistanceBundle& b : cls.per_class) dists.push_back(b.d);
    Tensor loss_q = classification_loss(g, dists, batch.query_labels[qi]);
    ce_acc = (qi == 0) ? loss_q : add(g, ce_acc, loss_q);
  }
  out.loss_ce = scalar_scale(g, ce_acc, 1.0 / static_cast<double>(batch.query.size()));

  if (training && !cfg.disable_hc) {
    EmbeddingSet set;
    for (std::size_t i = 0; i < batch.support.size(); ++i) {
      set.vectors.push_back(embed(g, batch.support[i], params.contrastive));
      set.group_ids.push_back(batch.support_labels[i]);
      set.is_query.push_back(false);
    }
    for (std::size_t i = 0; i < batch.query.size(); ++i) {
      set.vectors.push_back(embed(g, batch.query[i], params.contrastive));
      set.group_ids.push_back(batch.query_labels[i]);
      set.is_query.push_back(true);
    }
    out.loss_hc = hybrid_loss(g, set, params.contrastive);
  } else {
    out.loss_hc = Tensor::scalar(0.0);
  }
  out.loss_total = add(g, scalar_scale(g, out.loss_ce, cfg.lambda), out.loss_hc);
  return out;
}

// ------------------------------ DTW diagnostics -----------------------------

// Mean DTW between each query and its true-class prototype, per scale,
// computed on the gated per-scale outputs.
inline std::vector<double> episode_dtw_per_scale(const ForwardResult& fwd,
                                                 const EpisodeBatch& batch) {
  if (fwd.support_scales.empty() || fwd.query_scales.empty()) return {};
  const std::size_t n_scales = fwd.support_scales[0].size();
  const std::size_t n = batch.spec.n_way, k = batch.spec.k_shot;
  std::vector<double> result(n_scales, 0.0);
  for (std::size_t s = 0; s < n_scales; ++s) {
    // per-class prototypes at this scale (plain value mean)
    std::vector<Tensor> protos;
    protos.reserve(n);
    for (std::size_t c = 0; c < n; ++c) {
      Tensor acc(fwd.support_scales[0][s].shape());
      std::size_t count = 0;
      for (std::size_t i = 0; i < batch.support.size(); ++i) {
        if (batch.support_labels[i] != c) continue;
        for (std::size_t j = 0; j < acc.numel(); ++j)
          acc.data()[j] += fwd.support_scales[i][s].data()[j];
        ++count;
      }
      for (std::size_t j = 0; j < acc.numel(); ++j)
        acc.data()[j] /= static_cast<double>(count == 0 ? 1 : count);
      protos.push_back(std::move(acc));
    }
    double total = 0.0;
    for (std::size_t qi = 0; qi < batch.query.size(); ++qi)
      total += dtw_score(fwd.query_scales[qi][s], protos[batch.query_labels[qi]]);
    result[s] = total / static_cast<double>(batch.query.size());
  }
  (void)k;
  return result;
}

inline constexpr std::uint64_t kEvalSeedStream = 0xE7A1000000000000ULL;
inline constexpr std::uint64_t kProbeSeedStream = 0x9B0BE00000000000ULL;

// Fixed clean probe set for the alignment trend: per-scale mean DTW over
// probe episodes, model in evaluation mode.
inline std::vector<double> probe_dtw(MantaParams& params, const RunConfig& cfg,
                                     std::size_t probe_episodes = 16) {
  std::vector<double> acc(cfg.scales.size(), 0.0);
  for (std::size_t j = 0; j < probe_episodes; ++j) {
    EpisodeSpec spec = cfg.episode_spec();
    spec.seed = cfg.seed ^ kProbeSeedStream ^ j;
    Rng rng(spec.seed);
    EpisodeBatch batch = gen_episode(spec, rng);
    ForwardResult fwd = episode_forward(nullptr, params, batch, cfg, false, true);
    std::vector<double> d = episode_dtw_per_scale(fwd, batch);
    for (std::size_t s = 0; s < d.size(); ++s) acc[s] += d[s];
  }
  for (double& v : acc) v /= static_cast<double>(probe_episodes);
  return acc;
}

// --------------------------------- training --------------------------------

struct MetricRecord {
  std::size_t episode = 0;
  double loss_ce = 0, loss_hc = 0, loss_total = 0;
  double accuracy = 0;
  std::vector<double> dtw_per_scale;
  double wall_ms = 0;
};

struct TrainResult {
  MantaParams params;
  std::vector<MetricRecord> metrics;
  std::vector<double> probe_dtw_init, probe_dtw_final;  // per scale
};

// Episodic training: one generated task per step, L_total = lambda * L_ce
// + L_hc, plain SGD at the configured rate. Metric emission is bit-exact
// for a fixed (config, seed).
inline TrainResult train(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  TrainResult result;
  result.params = MantaParams::init(cfg);
  result.probe_dtw_init = probe_dtw(result.params, cfg);
  auto named = result.params.named_params();
  std::vector<std::vector<double>> velocity;
  if (cfg.momentum != 0.0)
    for (auto& [name, t] : named) {
      (void)name;
      velocity.emplace_back(t->numel(), 0.0);
    }
  Graph graph;
  for (std::size_t i = 0; i < cfg.episodes; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    EpisodeSpec spec = cfg.episode_spec();
    spec.seed = cfg.seed ^ i;  // derived per-episode stream
    Rng rng(spec.seed);
    EpisodeBatch batch = gen_episode(spec, rng);
    apply_perturbations(batch, cfg.noise_config(), rng);

    graph.clear();
    ForwardResult fwd = episode_forward(&graph, result.params, batch, cfg, true, true);
    const double total = fwd.loss_total.value();
    if (!std::isfinite(total))
      throw std::runtime_error("train: non-finite loss at episode " + std::to_string(i) +
                               " (episode seed " + std::to_string(spec.seed) + ")");
    backward(graph, fwd.loss_total);
    double scale = 1.0;
    if (cfg.grad_clip > 0.0) {
      double norm_sq = 0.0;
      for (auto& [name, t] : named) {
        (void)name;
        for (double gv : t->grad()) norm_sq += gv * gv;
      }
      const double norm = std::sqrt(norm_sq);
      if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
    }
    for (std::size_t p = 0; p < named.size(); ++p) {
      auto& v = named[p].second->vec();
      auto& gr = named[p].second->grad();
      if (scale != 1.0)
        for (auto& gv : gr) gv *= scale;
      if (cfg.momentum != 0.0) {
        auto& vel = velocity[p];
        for (std::size_t j = 0; j < v.size(); ++j) {
          vel[j] = cfg.momentum * vel[j] + gr[j];
          v[j] -= cfg.lr * vel[j];
        }
      } else {
        for (std::size_t j = 0; j < v.size(); ++j) v[j] -= cfg.lr * gr[j];
      }
      named[p].second->zero_grad();
    }

    MetricRecord rec;
    rec.episode = i;
    rec.loss_ce = fwd.loss_ce.value();
    rec.loss_hc = fwd.loss_hc.value();
    rec.loss_total = total;
    rec.accuracy = static_cast<double>(fwd.correct) / static_cast<double>(batch.query.size());
    rec.dtw_per_scale = episode_dtw_per_scale(fwd, batch);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    result.metrics.push_back(std::move(rec));
    if (log && cfg.eval_every > 0 && (i + 1) % cfg.eval_every == 0) {
      double acc = 0;
      for (std::size_t j = i + 1 - cfg.eval_every; j <= i; ++j) acc += result.metrics[j].accuracy;
      (*log) << "episode " << (i + 1) << "/" << cfg.episodes << "  loss " << total
             << "  acc(last " << cfg.eval_every << ") " << acc / cfg.eval_every << "\n";
    }
  }
  result.probe_dtw_final = probe_dtw(result.params, cfg);
  return result;
}

// -------------------------------- evaluation -------------------------------

struct EvalResult {
  double accuracy = 0;
  double ci95 = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  std::vector<double> per_episode_accuracy;
};

// Frozen-parameter evaluation over cfg.episodes fresh tasks from the eval
// seed stream. No updates; batch-norm uses running statistics.
inline EvalResult evaluate(MantaParams& params, const RunConfig& cfg) {
  cfg.validate();
  validate_params_match(params, cfg);
  EvalResult result;
  result.confusion.assign(cfg.n_way, std::vector<std::size_t>(cfg.n_way, 0));
  for (std::size_t i = 0; i < cfg.episodes; ++i) {
    EpisodeSpec spec = cfg.episode_spec();
    spec.seed = cfg.seed ^ kEvalSeedStream ^ i;
    Rng rng(spec.seed);
    EpisodeBatch batch = gen_episode(spec, rng);
    apply_perturbations(batch, cfg.noise_config(), rng);
    ForwardResult fwd = episode_forward(nullptr, params, batch, cfg, false);
    for (std::size_t qi = 0; qi < batch.query.size(); ++qi)
      ++result.confusion[batch.query_labels[qi]][fwd.predictions[qi]];
    result.per_episode_accuracy.push_back(static_cast<double>(fwd.correct) /
                                          static_cast<double>(batch.query.size()));
  }
  double mean = 0;
  for (double a : result.per_episode_accuracy) mean += a;
  mean /= static_cast<double>(result.per_episode_accuracy.size());
  double var = 0;
  for (double a : result.per_episode_accuracy) var += (a - mean) * (a - mean);
  var /= static_cast<double>(result.per_episode_accuracy.size());
  result.accuracy = mean;
  result.ci95 = 1.96 * std::sqrt(var / static_cast<double>(result.per_episode_accuracy.size()));
  return result;
}

// ------------------------------ gradient check ------------------------------

struct GroupCheck {
  std::string name;
  double max_rel_err = 0;
  bool finite = true;
};

struct FullGradcheck {
  std::vector<GroupCheck> groups;
  double worst = 0;
  bool ok(double tol = 1e-4) const {
    for (const auto& c : groups)
      if (!c.finite || c.max_rel_err >= tol) return false;
    return true;
  }
};

// Central-difference check of the full training objective over every
// parameter group. Restricted to small configurations. corrupt_group is a
// negative-control fixture: it deliberately falsifies that group's analytic
// gradient so the failure path can be exercised.
inline FullGradcheck gradcheck_full_loss(const RunConfig& cfg, double eps = 1e-5,
                                         const std::string& corrupt_group = "") {
  cfg.validate();
  if (cfg.frames > 8 || cfg.feat_dim > 4)
    throw std::invalid_argument("gradcheck: restricted to frames <= 8 and feat_dim <= 4, got " +
                                std::to_string(cfg.frames) + "x" + std::to_string(cfg.feat_dim));
  MantaParams params = MantaParams::init(cfg);
  EpisodeSpec spec = cfg.episode_spec();
  Rng rng(spec.seed);
  EpisodeBatch batch = gen_episode(spec, rng);

  auto loss_value = [&](Graph* g) {
    return episode_forward(g, params, batch, cfg, true).loss_total;
  };

  params.zero_grads();
  Graph graph;
  Tensor loss = loss_value(&graph);
  backward(graph, loss);

  FullGradcheck report;
  for (auto& [name, t] : params.named_params()) {
    GroupCheck check;
    check.name = name;
    std::vector<double> analytic = t->grad();
    if (name == corrupt_group && !analytic.empty()) analytic[0] += 1.0;
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double orig = t->vec()[i];
      t->vec()[i] = orig + eps;
      const double fp = loss_value(nullptr).value();
      t->vec()[i] = orig - eps;
      const double fm = loss_value(nullptr).value();
      t->vec()[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        check.finite = false;
        break;
      }
      const double numeric = (fp - fm) / (2 * eps);
      check.max_rel_err =
          std::max(check.max_rel_err, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
    report.worst = std::max(report.worst, check.max_rel_err);
    report.groups.push_back(std::move(check));
  }
  return report;
}

// -------------------------------- checkpoints -------------------------------
//
// Binary layout, little-endian:
//   magic "MANTA1" | u16 version | u32 entry count |
//   per entry: u16 name length | name bytes | u8 rank | rank x u32 extents |
//              f64 payload (product of extents values; rank 0 = one scalar)
// Entries: cfg.* (config snapshot), param.* (trainable arrays),
// state.* (batch-norm running statistics).

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

struct Entry {
  std::string name;
  std::vector<std::size_t> extents;  // empty = scalar
  std::vector<double> values;
};

inline void append_entry(std::string& out, const Entry& e) {
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
  put_bytes(out, e.name.data(), e.name.size());
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.extents.size()));
  for (std::size_t ext : e.extents) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ext));
  put_bytes(out, e.values.data(), e.values.size() * sizeof(double));
}

inline Entry scalar_entry(const std::string& name, double v) { return Entry{name, {}, {v}}; }

}  // namespace detail

inline void save_checkpoint(MantaParams& params, const RunConfig& cfg, const std::string& path) {
  std::vector<detail::Entry> entries;
  auto cfg_scalar = [&](const char* name, double v) {
    entries.push_back(detail::scalar_entry(std::string("cfg.") + name, v));
  };
  cfg_scalar("n_way", static_cast<double>(cfg.n_way));
  cfg_scalar("k_shot", static_cast<double>(cfg.k_shot));
  cfg_scalar("q_per_class", static_cast<double>(cfg.q_per_class));
  cfg_scalar("frames", static_cast<double>(cfg.frames));
  cfg_scalar("feat_dim", static_cast<double>(cfg.feat_dim));
  cfg_scalar("motif_len", static_cast<double>(cfg.motif_len));
  cfg_scalar("noise_std", cfg.noise_std);
  cfg_scalar("frame_noise", static_cast<double>(cfg.frame_noise));
  cfg_scalar("sample_noise_ratio", cfg.sample_noise_ratio);
  cfg_scalar("gaussian_bg_std", cfg.gaussian_bg_std);
  cfg_scalar("reverse_support", cfg.reverse_support ? 1.0 : 0.0);
  {
    detail::Entry scales{"cfg.scales", {cfg.scales.size()}, {}};
    for (std::size_t o : cfg.scales) scales.values.push_back(static_cast<double>(o));
    entries.push_back(std::move(scales));
  }
  cfg_scalar("n_state", static_cast<double>(cfg.n_state));
  cfg_scalar("conv_channels", static_cast<double>(cfg.conv_channels));
  cfg_scalar("d_embed", static_cast<double>(cfg.d_embed));
  cfg_scalar("tau", cfg.tau);
  cfg_scalar("lambda", cfg.lambda);
  cfg_scalar("lr", cfg.lr);
  cfg_scalar("episodes", static_cast<double>(cfg.episodes));
  cfg_scalar("eval_every", static_cast<double>(cfg.eval_every));
  entries.push_back(detail::Entry{
      "cfg.seed",
      {2},
      {static_cast<double>(cfg.seed >> 32), static_cast<double>(cfg.seed & 0xFFFFFFFFULL)}});
  cfg_scalar("disable_inner", cfg.disable_inner ? 1.0 : 0.0);
  cfg_scalar("disable_outer", cfg.disable_outer ? 1.0 : 0.0);
  cfg_scalar("disable_hc", cfg.disable_hc ? 1.0 : 0.0);
  cfg_scalar("fragmenting", cfg.fragmenting == Fragmenting::sliding ? 1.0 : 0.0);
  cfg_scalar("selective", cfg.selective ? 1.0 : 0.0);

  for (auto& [name, t] : params.named_params())
    entries.push_back(detail::Entry{"param." + name, t->shape(), t->vec()});
  entries.push_back(detail::scalar_entry("state.conv.running_mean", params.trunk.conv.running_mean));
  entries.push_back(detail::scalar_entry("state.conv.running_var", params.trunk.conv.running_var));

  std::string out;
  detail::put_bytes(out, "MANTA1", 6);
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) detail::append_entry(out, e);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

struct Checkpoint {
  RunConfig config;
  MantaParams params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 6 || buf.compare(0, 6, "MANTA1") != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  detail::Reader r{buf};
  r.pos = 6;
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("entry count");

  std::map<std::string, detail::Entry> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = r.pos;
    const auto name_len = r.get<std::uint16_t>("name length");
    if (r.pos + name_len > buf.size())
      throw std::runtime_error("checkpoint: truncated name at byte offset " + std::to_string(at));
    std::string name = buf.substr(r.pos, name_len);
    r.pos += name_len;
    const auto rank = r.get<std::uint8_t>("rank");
    detail::Entry entry;
    entry.name = name;
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      entry.extents.push_back(r.get<std::uint32_t>("extent"));
      numel *= entry.extents.back();
    }
    if (r.pos + numel * sizeof(double) > buf.size())
      throw std::runtime_error("checkpoint: truncated payload for '" + name +
                               "' at byte offset " + std::to_string(r.pos) + ": expected " +
                               std::to_string(numel * sizeof(double)) + " bytes, file has " +
                               std::to_string(buf.size() - r.pos));
    entry.values.resize(numel);
    std::memcpy(entry.values.data(), buf.data() + r.pos, numel * sizeof(double));
    r.pos += numel * sizeof(double);
    entries.emplace(name, std::move(entry));
  }
  if (r.pos != buf.size())
    throw std::runtime_error("checkpoint: " + std::to_string(buf.size() - r.pos) +
                             " trailing bytes at byte offset " + std::to_string(r.pos));

  auto need = [&](const std::string& name) -> detail::Entry& {
    auto it = entries.find(name);
    if (it == entries.end())
      throw std::runtime_error("checkpoint: missing entry '" + name + "'");
    return it->second;
  };
  auto get_scalar = [&](const std::string& name) { return need(name).values.at(0); };

  Checkpoint ck;
  RunConfig& cfg = ck.config;
  cfg.n_way = static_cast<std::size_t>(get_scalar("cfg.n_way"));
  cfg.k_shot = static_cast<std::size_t>(get_scalar("cfg.k_shot"));
  cfg.q_per_class = static_cast<std::size_t>(get_scalar("cfg.q_per_class"));
  cfg.frames = static_cast<std::size_t>(get_scalar("cfg.frames"));
  cfg.feat_dim = static_cast<std::size_t>(get_scalar("cfg.feat_dim"));
  cfg.motif_len = static_cast<std::size_t>(get_scalar("cfg.motif_len"));
  cfg.noise_std = get_scalar("cfg.noise_std");
  cfg.frame_noise = static_cast<std::size_t>(get_scalar("cfg.frame_noise"));
  cfg.sample_noise_ratio = get_scalar("cfg.sample_noise_ratio");
  cfg.gaussian_bg_std = get_scalar("cfg.gaussian_bg_std");
  cfg.reverse_support = get_scalar("cfg.reverse_support") != 0.0;
  cfg.scales.clear();
  for (double v : need("cfg.scales").values) cfg.scales.push_back(static_cast<std::size_t>(v));
  cfg.n_state = static_cast<std::size_t>(get_scalar("cfg.n_state"));
  cfg.conv_channels = static_cast<std::size_t>(get_scalar("cfg.conv_channels"));
  cfg.d_embed = static_cast<std::size_t>(get_scalar("cfg.d_embed"));
  cfg.tau = get_scalar("cfg.tau");
  cfg.lambda = get_scalar("cfg.lambda");
  cfg.lr = get_scalar("cfg.lr");
  cfg.episodes = static_cast<std::size_t>(get_scalar("cfg.episodes"));
  cfg.eval_every = static_cast<std::size_t>(get_scalar("cfg.eval_every"));
  {
    const auto& halves = need("cfg.seed").values;
    if (halves.size() != 2) throw std::runtime_error("checkpoint: malformed cfg.seed");
    cfg.seed = (static_cast<std::uint64_t>(halves[0]) << 32) |
               static_cast<std::uint64_t>(halves[1]);
  }
  cfg.disable_inner = get_scalar("cfg.disable_inner") != 0.0;
  cfg.disable_outer = get_scalar("cfg.disable_outer") != 0.0;
  cfg.disable_hc = get_scalar("cfg.disable_hc") != 0.0;
  cfg.fragmenting = get_scalar("cfg.fragmenting") != 0.0 ? Fragmenting::sliding
                                                         : Fragmenting::non_overlapping;
  cfg.selective = get_scalar("cfg.selective") != 0.0;

  ck.params = MantaParams::init(cfg);
  for (auto& [name, t] : ck.params.named_params()) {
    detail::Entry& e = need("param." + name);
    if (e.extents != t->shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file has " +
                               Tensor::shape_str(e.extents) + ", model expects " +
                               Tensor::shape_str(t->shape()));
    std::copy(e.values.begin(), e.values.end(), t->vec().begin());
  }
  ck.params.trunk.conv.running_mean = get_scalar("state.conv.running_mean");
  ck.params.trunk.conv.running_var = get_scalar("state.conv.running_var");
  return ck;
}

// ------------------------------ metric outputs ------------------------------

inline void write_metrics_jsonl(const std::vector<MetricRecord>& records, std::ostream& out) {
  out.precision(17);
  for (const MetricRecord& r : records) {
    out << "{\"episode\":" << r.episode << ",\"loss_ce\":" << r.loss_ce
        << ",\"loss_hc\":" << r.loss_hc << ",\"loss_total\":" << r.loss_total
        << ",\"accuracy\":" << r.accuracy << ",\"dtw\":[";
    for (std::size_t i = 0; i < r.dtw_per_scale.size(); ++i)
      out << (i ? "," : "") << r.dtw_per_scale[i];
    out << "],\"wall_ms\":" << r.wall_ms << "}\n";
  }
}

inline void write_confusion_csv(const std::vector<std::vector<std::size_t>>& confusion,
                                std::ostream& out) {
  for (const auto& row : confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
    out << "\n";
  }
}

// phase is one of probe_init / train / probe_final; episode is blank for the
// probe rows.
inline void write_dtw_csv(const TrainResult& result, const std::vector<std::size_t>& scales,
                          std::ostream& out) {
  out.precision(17);
  out << "phase,episode,scale,score\n";
  for (std::size_t s = 0; s < result.probe_dtw_init.size(); ++s)
    out << "probe_init,," << scales[s] << "," << result.probe_dtw_init[s] << "\n";
  for (const MetricRecord& r : result.metrics)
    for (std::size_t s = 0; s < r.dtw_per_scale.size(); ++s)
      out << "train," << r.episode << "," << scales[s] << "," << r.dtw_per_scale[s] << "\n";
  for (std::size_t s = 0; s < result.probe_dtw_final.size(); ++s)
    out << "probe_final,," << scales[s] << "," << result.probe_dtw_final[s] << "\n";
}

// ---------------------------------- bench ----------------------------------

// Sequential scan throughput in processed rows per second.
inline double bench_scan(std::size_t length, std::size_t width, std::size_t n_state,
                         std::size_t repeats) {
  Rng rng(1);
  SsmParams p = SsmParams::init(n_state, width, rng);
  Tensor x = Tensor::randu({length, width}, rng, -1.0, 1.0);
  volatile double sink = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t r = 0; r < repeats; ++r) {
    ScanOutput out = ssm_scan(nullptr, p, x);
    sink = sink + out.y.data()[0];
  }
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return static_cast<double>(length * repeats) / sec;
}

}  // namespace manta
