#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "manta/rng.hpp"
#include "manta/ssm.hpp"
#include "manta/tensor.hpp"

namespace manta {

// Sorted set of fragment lengths. Each scale must be a power of two
// (1 allowed), divide the frame count, and be strictly smaller than it.
struct ScaleSet {
  std::vector<std::size_t> scales;

  static ScaleSet make(std::vector<std::size_t> values) {
    ScaleSet s;
    s.scales = std::move(values);
    std::sort(s.scales.begin(), s.scales.end());
    for (std::size_t i = 0; i + 1 < s.scales.size(); ++i)
      if (s.scales[i] == s.scales[i + 1])
        throw std::invalid_argument("scale set: duplicate scale " + std::to_string(s.scales[i]));
    for (std::size_t o : s.scales) {
      if (o == 0) throw std::invalid_argument("scale set: scale must be positive");
      if ((o & (o - 1)) != 0)
        throw std::invalid_argument("scale set: scale " + std::to_string(o) +
                                    " is not a power of two");
    }
    if (s.scales.empty()) throw std::invalid_argument("scale set: empty");
    return s;
  }

  void validate_for(std::size_t frames) const {
    for (std::size_t o : scales) {
      if (o >= frames)
        throw std::invalid_argument("scale set: scale " + std::to_string(o) +
                                    " must be smaller than frame count " + std::to_string(frames));
      if (frames % o != 0)
        throw std::invalid_argument("scale set: scale " + std::to_string(o) +
                                    " does not divide frame count " + std::to_string(frames));
    }
  }
};

// Conv2D gating block: three 3x3 same-padded convolutions (1 -> c -> c -> 1)
// followed by batch normalization over the spatial map. Running statistics
// are used when frozen (evaluation); the map's own statistics otherwise.
struct ConvBlockParams {
  Tensor k1, b1;  // [c,1,3,3], [c]
  Tensor k2, b2;  // [c,c,3,3], [c]
  Tensor k3, b3;  // [1,c,3,3], [1]
  Tensor bn_gamma, bn_beta;  // scalars
  double running_mean = 0.0;
  double running_var = 1.0;
  double momentum = 0.1;

  static ConvBlockParams init(std::size_t channels, Rng& rng) {
    ConvBlockParams p;
    const double c1 = 1.0 / std::sqrt(9.0);
    const double cc = 1.0 / std::sqrt(9.0 * static_cast<double>(channels));
    p.k1 = Tensor::randu({channels, 1, 3, 3}, rng, -c1, c1);
    p.b1 = Tensor({channels});
    p.k2 = Tensor::randu({channels, channels, 3, 3}, rng, -cc, cc);
    p.b2 = Tensor({channels});
    p.k3 = Tensor::randu({1, channels, 3, 3}, rng, -cc, cc);
    p.b3 = Tensor({1});
    p.bn_gamma = Tensor::scalar(1.0);
    p.bn_beta = Tensor::scalar(0.0);
    return p;
  }

  std::vector<Tensor*> tensors() {
    return {&k1, &b1, &k2, &b2, &k3, &b3, &bn_gamma, &bn_beta};
  }
};

// Per-scale Inner Module: two independent scan directions plus the fusion
// map that folds the concatenated directions back to width D.
struct ScaleParams {
  SsmParams inner_fw, inner_bw;
  Tensor fuse_w;  // [2D, D]
  Tensor fuse_b;  // [1, D]
};

struct MatryoshkaParams {
  std::map<std::size_t, ScaleParams> inner;  // keyed by scale o
  SsmParams outer;                           // one object, used bidirectionally
  Tensor outer_fuse_w;                       // [2D, D]
  Tensor outer_fuse_b;                       // [1, D]
  ConvBlockParams conv;

  // The selective flag applies to the Inner Modules: local enhancement is
  // where content-dependent step sizes pay off. The Outer Module always uses
  // the plain scan; global alignment pooling stays linear and stable.
  static MatryoshkaParams init(const ScaleSet& scales, std::size_t d, std::size_t n_state,
                               std::size_t conv_channels, Rng& rng, bool selective = false) {
    MatryoshkaParams p;
    const double fc = 1.0 / std::sqrt(2.0 * static_cast<double>(d));
    for (std::size_t o : scales.scales) {
      ScaleParams sp;
      // fragment scans start responsive at the fragment's own time scale
      sp.inner_fw = SsmParams::init(n_state, d, rng, selective, 0.3, 2.0, 0.05);
      sp.inner_bw = SsmParams::init(n_state, d, rng, selective, 0.3, 2.0, 0.05);
      // zero-initialized fusion: each inner branch starts as an exact zero
      // map (pure residual) and fades in as its fusion weights move
      sp.fuse_w = Tensor({2 * d, d});
      sp.fuse_b = Tensor({1, d});
      p.inner.emplace(o, std::move(sp));
    }
    p.outer = SsmParams::init(n_state, d, rng, false, 0.05, 0.5);
    p.outer_fuse_w = Tensor::randu({2 * d, d}, rng, -fc, fc);
    p.outer_fuse_b = Tensor::randu({1, d}, rng, -fc, fc);
    p.conv = ConvBlockParams::init(conv_channels, rng);
    return p;
  }

  std::size_t width() const { return outer.width(); }
};

enum class Fragmenting { non_overlapping, sliding };

struct MatryoshkaConfig {
  ScaleSet scales;
  bool disable_inner = false;
  bool disable_outer = false;
  bool fixed_gates = false;  // w_o forced to 1 (learnable-weight ablation)
  Fragmenting fragmenting = Fragmenting::non_overlapping;
  bool training = true;      // batch-norm statistics mode
};

namespace detail {

inline Tensor linear_rows(Graph* g, const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(g, x, w);
  Tensor bias_rows = matmul(g, Tensor::full({x.shape()[0], 1}, 1.0), b);
  return add(g, y, bias_rows);
}

}  // namespace detail

// IM(x) = fuse(concat(y_fw, y_bw)) over the fragment's time axis; the two
// directions hold independent parameters. Output shape equals the input.
inline Tensor inner_module(Graph* g, const Tensor& fragment, const ScaleParams& sp,
                           std::size_t expected_len) {
  if (fragment.rank() != 2 || fragment.shape()[0] != expected_len)
    throw std::invalid_argument("inner_module: fragment " + Tensor::shape_str(fragment.shape()) +
                                " does not have the scale's length " +
                                std::to_string(expected_len));
  auto [y_fw, y_bw] = bidirectional_scan(g, sp.inner_fw, sp.inner_bw, fragment);
  Tensor both = concat(g, 1, {y_fw, y_bw});
  return detail::linear_rows(g, both, sp.fuse_w, sp.fuse_b);
}

// Split X into F/o consecutive non-overlapping fragments, replace each
// fragment f by IM(f) + f, and re-concatenate in order. The fragments are
// batched through one segmented kernel call; segment boundaries reset the
// scan state, which is exactly the independent per-fragment recurrence.
inline Tensor fragment_and_enhance(Graph* g, const Tensor& x, std::size_t o,
                                   const ScaleParams& sp) {
  const std::size_t frames = x.shape()[0];
  if (o >= frames)
    throw std::invalid_argument("fragment_and_enhance: scale " + std::to_string(o) +
                                " must be smaller than frame count " + std::to_string(frames));
  if (frames % o != 0)
    throw std::invalid_argument("fragment_and_enhance: scale " + std::to_string(o) +
                                " does not divide frame count " + std::to_string(frames));
  auto [y_fw, y_bw] = bidirectional_scan(g, sp.inner_fw, sp.inner_bw, x, o);
  Tensor both = concat(g, 1, {y_fw, y_bw});
  Tensor enhanced = detail::linear_rows(g, both, sp.fuse_w, sp.fuse_b);
  return add(g, enhanced, x);
}

// Stride-1 window variant: every length-o window is enhanced independently
// and each frame is averaged over the enhanced rows of all windows that
// cover it.
inline Tensor fragment_and_enhance_sliding(Graph* g, const Tensor& x, std::size_t o,
                                           const ScaleParams& sp) {
  const std::size_t frames = x.shape()[0], d = x.shape()[1];
  if (o > frames)
    throw std::invalid_argument("fragment_and_enhance: scale " + std::to_string(o) +
                                " exceeds frame count " + std::to_string(frames));
  const std::size_t windows = frames - o + 1;
  std::vector<Tensor> enhanced;
  enhanced.reserve(windows);
  for (std::size_t i = 0; i < windows; ++i) {
    Tensor win = slice(g, x, {i, 0}, {o, d});
    enhanced.push_back(add(g, inner_module(g, win, sp, o), win));
  }
  std::vector<Tensor> rows;
  rows.reserve(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t lo = f + 1 > o ? f + 1 - o : 0;
    const std::size_t hi = std::min(f, windows - 1);
    Tensor acc = slice(g, enhanced[lo], {f - lo, 0}, {1, d});
    for (std::size_t i = lo + 1; i <= hi; ++i)
      acc = add(g, acc, slice(g, enhanced[i], {f - i, 0}, {1, d}));
    rows.push_back(scalar_scale(g, acc, 1.0 / static_cast<double>(hi - lo + 1)));
  }
  return concat(g, 0, rows);
}

// Three same-padded 3x3 convolutions (1 -> c -> c -> 1) and batch
// normalization of the resulting map. eps = 1e-5 keeps zero-variance maps
// (all-constant inputs) finite.
inline Tensor conv_block(Graph* g, const Tensor& x, ConvBlockParams& p, bool training) {
  Tensor h = conv2d_3x3(g, x, p.k1, p.b1);
  h = conv2d_3x3(g, h, p.k2, p.b2);
  h = conv2d_3x3(g, h, p.k3, p.b3);
  const double n = static_cast<double>(h.numel());
  Tensor mean_t, var_t;
  if (training) {
    mean_t = scalar_scale(g, sum(g, h), 1.0 / n);
    var_t = scalar_scale(g, sum(g, square(g, sub(g, h, mean_t))), 1.0 / n);
    p.running_mean = (1.0 - p.momentum) * p.running_mean + p.momentum * mean_t.value();
    p.running_var = (1.0 - p.momentum) * p.running_var + p.momentum * var_t.value();
  } else {
    mean_t = Tensor::scalar(p.running_mean);
    var_t = Tensor::scalar(p.running_var);
  }
  // (var + eps)^(-1/2) through log/exp; all factors stay positive
  Tensor inv_std = exp(g, scalar_scale(g, log(g, add(g, var_t, Tensor::scalar(1e-5))), -0.5));
  Tensor normed = mul(g, sub(g, h, mean_t), inv_std);
  return add(g, mul(g, normed, p.bn_gamma), p.bn_beta);
}

// w_o = Sigmoid[CB(enhanced) + original]; every entry strictly in (0, 1).
inline Tensor scale_weight(Graph* g, const Tensor& enhanced, const Tensor& original,
                           ConvBlockParams& p, bool training) {
  if (enhanced.shape() != original.shape())
    throw std::invalid_argument("scale_weight: shape mismatch " +
                                Tensor::shape_str(enhanced.shape()) + " vs " +
                                Tensor::shape_str(original.shape()));
  return sigmoid(g, add(g, conv_block(g, enhanced, p, training), original));
}

// OM(x) = fuse(concat of the shared-parameter bidirectional scan over the
// full timeline).
inline Tensor outer_module(Graph* g, const Tensor& x, const MatryoshkaParams& p) {
  auto [y_fw, y_bw] = bidirectional_scan(g, p.outer, p.outer, x);
  Tensor both = concat(g, 1, {y_fw, y_bw});
  return detail::linear_rows(g, both, p.outer_fuse_w, p.outer_fuse_b);
}

struct MatryoshkaOutput {
  Tensor output;                  // [F, D]
  std::vector<Tensor> per_scale;  // gated per-scale outputs, sorted by scale
};

// Full block: for each scale, enhance fragments, run the Outer Module over
// the whole timeline, gate with the learnable weight, then average the
// per-scale results uniformly.
inline MatryoshkaOutput matryoshka_forward_detail(Graph* g, const Tensor& x,
                                                  const MatryoshkaConfig& cfg,
                                                  MatryoshkaParams& p) {
  if (x.rank() != 2)
    throw std::invalid_argument("matryoshka_forward: input must be [F, D], got " +
                                Tensor::shape_str(x.shape()));
  const std::size_t frames = x.shape()[0];
  cfg.scales.validate_for(frames);
  MatryoshkaOutput out;
  out.per_scale.reserve(cfg.scales.scales.size());
  for (std::size_t o : cfg.scales.scales) {
    auto it = p.inner.find(o);
    if (it == p.inner.end())
      throw std::invalid_argument("matryoshka_forward: no parameters for scale " +
                                  std::to_string(o));
    Tensor enhanced;
    if (cfg.disable_inner) {
      enhanced = x;
    } else if (cfg.fragmenting == Fragmenting::sliding) {
      enhanced = fragment_and_enhance_sliding(g, x, o, it->second);
    } else {
      enhanced = fragment_and_enhance(g, x, o, it->second);
    }
    Tensor om = cfg.disable_outer ? enhanced : outer_module(g, enhanced, p);
    Tensor gated;
    if (cfg.fixed_gates) {
      gated = om;
    } else {
      Tensor w = scale_weight(g, enhanced, x, p.conv, cfg.training);
      gated = mul(g, w, om);
    }
    out.per_scale.push_back(gated);
  }
  Tensor acc = out.per_scale[0];
  for (std::size_t i = 1; i < out.per_scale.size(); ++i) acc = add(g, acc, out.per_scale[i]);
  out.output = scalar_scale(g, acc, 1.0 / static_cast<double>(out.per_scale.size()));
  return out;
}

inline Tensor matryoshka_forward(Graph* g, const Tensor& x, const MatryoshkaConfig& cfg,
                                 MatryoshkaParams& p) {
  return matryoshka_forward_detail(g, x, cfg, p).output;
}

}  // namespace manta
