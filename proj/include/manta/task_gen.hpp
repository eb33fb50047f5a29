#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "manta/rng.hpp"
#include "manta/tensor.hpp"

namespace manta {

// One N-way K-shot planted-motif task description. Every class gets a fixed
// random motif of motif_len frames; each sample is Gaussian background noise
// with the (amplitude-jittered) class motif added at a random temporal
// offset, so identical class content appears at different timeline positions.
struct EpisodeSpec {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_per_class = 1;
  std::size_t frames = 32;
  std::size_t feat_dim = 16;
  std::size_t motif_len = 6;
  // Motif rows mix a constant class direction with an alternating-sign one,
  // under a temporal ramp envelope:
  //   row_r = (1 + motif_ramp * (r/(m-1) - 1/2))
  //           * (motif_dc * u + motif_wave * (-1)^r * v) + 0.3 * z.
  // The constant part is visible to plain temporal pooling; the alternating
  // part cancels under pooling and only survives local frame-to-frame
  // processing; the ramp makes the motif temporally asymmetric so reversing
  // a sequence changes its pooled signature. motif_wave = 0 falls back to
  // iid N(0,1) rows.
  double motif_dc = 0.42;
  double motif_wave = 1.15;
  double motif_ramp = 0.5;
  double noise_std = 0.8;
  // amplitude factor range: the motif is drawn N(0,1), so this sets the
  // planted signal-to-noise ratio against noise_std
  double jitter_lo = 2.4;
  double jitter_hi = 3.6;
  std::uint64_t seed = 0;
  // >= 0 pins every motif to this offset (degenerate/testing mode)
  long long fixed_offset = -1;

  void validate() const {
    if (n_way < 2) throw std::invalid_argument("episode spec: n_way must be >= 2");
    if (k_shot < 1) throw std::invalid_argument("episode spec: k_shot must be >= 1");
    if (q_per_class < 1) throw std::invalid_argument("episode spec: q_per_class must be >= 1");
    if (frames % 2 != 0) throw std::invalid_argument("episode spec: frames must be even");
    if (motif_len < 1) throw std::invalid_argument("episode spec: motif_len must be >= 1");
    if (motif_len * 4 > frames)
      throw std::invalid_argument("episode spec: motif_len must be at most frames/4");
    if (feat_dim < 1) throw std::invalid_argument("episode spec: feat_dim must be >= 1");
    if (noise_std < 0) throw std::invalid_argument("episode spec: noise_std must be >= 0");
    if (jitter_lo > jitter_hi)
      throw std::invalid_argument("episode spec: jitter range is inverted");
    if (fixed_offset >= 0 &&
        static_cast<std::size_t>(fixed_offset) + motif_len > frames)
      throw std::invalid_argument("episode spec: fixed offset leaves no room for the motif");
  }
};

struct NoiseConfig {
  std::size_t frame_noise_count = 0;  // F*: irrelevant frames per sample
  double sample_noise_ratio = 0.0;    // rho: fraction of mislabeled supports per class
  double gaussian_bg_std = 0.0;       // additive background noise on 25% of samples
  bool reverse_support = false;
};

// Provenance of every injected perturbation.
struct NoiseManifest {
  struct FrameNoise {
    bool is_query = false;
    std::size_t sample = 0;
    std::vector<std::size_t> frames;
  };
  struct SampleSwap {
    std::size_t cls = 0, slot = 0, generator_class = 0;
  };
  struct GaussianBg {
    bool is_query = false;
    std::size_t sample = 0;
    double stddev = 0.0;
  };
  bool support_reversed = false;
  std::vector<FrameNoise> frame_noise;
  std::vector<SampleSwap> sample_swaps;
  std::vector<GaussianBg> gaussian;
};

struct EpisodeBatch {
  EpisodeSpec spec;
  std::vector<Tensor> support;  // n_way * k_shot samples, class-major
  std::vector<Tensor> query;    // n_way * q_per_class samples, class-major
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
  std::vector<Tensor> motifs;  // per-class generators, kept for sample-noise swaps
  NoiseManifest manifest;
};

namespace detail {

inline double motif_cosine(const Tensor& a, const Tensor& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a.data()[i] * b.data()[i];
    na += a.data()[i] * a.data()[i];
    nb += b.data()[i] * b.data()[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-300);
}

inline Tensor planted_sample(const EpisodeSpec& spec, const Tensor& motif, Rng& rng) {
  Tensor feats({spec.frames, spec.feat_dim});
  for (auto& v : feats.vec()) v = rng.normal(spec.noise_std);
  const std::size_t offset =
      spec.fixed_offset >= 0
          ? static_cast<std::size_t>(spec.fixed_offset)
          : rng.below(spec.frames - spec.motif_len + 1);
  const double jitter = rng.uniform(spec.jitter_lo, spec.jitter_hi);
  for (std::size_t r = 0; r < spec.motif_len; ++r)
    for (std::size_t d = 0; d < spec.feat_dim; ++d)
      feats.data()[(offset + r) * spec.feat_dim + d] += jitter * motif.data()[r * spec.feat_dim + d];
  return feats;
}

// First n entries of a Fisher-Yates shuffle of 0..total-1.
inline std::vector<std::size_t> sample_without_replacement(std::size_t total, std::size_t n,
                                                           Rng& rng) {
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(total - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

}  // namespace detail

// Deterministic generation from (spec, rng): class motifs drawn first
// (pairwise cosine-distinct, at most 100 redraws), then supports class-major,
// then queries class-major.
inline EpisodeBatch gen_episode(const EpisodeSpec& spec, Rng& rng) {
  spec.validate();
  EpisodeBatch batch;
  batch.spec = spec;
  batch.motifs.reserve(spec.n_way);
  std::size_t redraws = 0;
  for (std::size_t c = 0; c < spec.n_way; ++c) {
    for (;;) {
      Tensor motif({spec.motif_len, spec.feat_dim});
      if (spec.motif_wave != 0.0) {
        std::vector<double> constant(spec.feat_dim), wave(spec.feat_dim);
        for (auto& v : constant) v = rng.normal();
        for (auto& v : wave) v = rng.normal();
        for (std::size_t r = 0; r < spec.motif_len; ++r) {
          const double sign = (r % 2 == 0) ? 1.0 : -1.0;
          const double envelope =
              spec.motif_len > 1
                  ? 1.0 + spec.motif_ramp *
                              (static_cast<double>(r) / static_cast<double>(spec.motif_len - 1) -
                               0.5)
                  : 1.0;
          for (std::size_t d = 0; d < spec.feat_dim; ++d)
            motif.data()[r * spec.feat_dim + d] =
                envelope * (spec.motif_dc * constant[d] + spec.motif_wave * sign * wave[d]) +
                0.3 * rng.normal();
        }
      } else {
        motif = Tensor::randn({spec.motif_len, spec.feat_dim}, rng);
      }
      bool distinct = true;
      for (const Tensor& other : batch.motifs)
        if (detail::motif_cosine(motif, other) > 0.5) {
          distinct = false;
          break;
        }
      if (distinct) {
        batch.motifs.push_back(std::move(motif));
        break;
      }
      if (++redraws > 100)
        throw std::runtime_error("gen_episode: motif separation unachievable after 100 redraws "
                                 "(seed " + std::to_string(spec.seed) + ")");
    }
  }
  for (std::size_t c = 0; c < spec.n_way; ++c)
    for (std::size_t k = 0; k < spec.k_shot; ++k) {
      batch.support.push_back(detail::planted_sample(spec, batch.motifs[c], rng));
      batch.support_labels.push_back(c);
    }
  for (std::size_t c = 0; c < spec.n_way; ++c)
    for (std::size_t q = 0; q < spec.q_per_class; ++q) {
      batch.query.push_back(detail::planted_sample(spec, batch.motifs[c], rng));
      batch.query_labels.push_back(c);
    }
  return batch;
}

inline EpisodeBatch gen_episode(const EpisodeSpec& spec) {
  Rng rng(spec.seed);
  return gen_episode(spec, rng);
}

// Replace frame_count uniformly chosen distinct frames of every sample with
// pure noise frames; the manifest records the indices per sample.
inline void inject_frame_noise(EpisodeBatch& batch, std::size_t frame_count, Rng& rng) {
  if (frame_count > batch.spec.frames)
    throw std::invalid_argument("inject_frame_noise: frame count exceeds frames per sample");
  if (frame_count == 0) return;
  auto corrupt = [&](Tensor& sample, bool is_query, std::size_t index) {
    std::vector<std::size_t> frames =
        detail::sample_without_replacement(batch.spec.frames, frame_count, rng);
    for (std::size_t f : frames)
      for (std::size_t d = 0; d < batch.spec.feat_dim; ++d)
        sample.data()[f * batch.spec.feat_dim + d] = rng.normal(batch.spec.noise_std);
    batch.manifest.frame_noise.push_back({is_query, index, std::move(frames)});
  };
  for (std::size_t i = 0; i < batch.support.size(); ++i) corrupt(batch.support[i], false, i);
  for (std::size_t i = 0; i < batch.query.size(); ++i) corrupt(batch.query[i], true, i);
}

// Replace floor(ratio * K) supports per class with samples generated from a
// different class's motif while keeping the original label.
inline void inject_sample_noise(EpisodeBatch& batch, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0)
    throw std::invalid_argument("inject_sample_noise: ratio must lie in [0, 1]");
  const std::size_t swaps =
      static_cast<std::size_t>(ratio * static_cast<double>(batch.spec.k_shot));
  if (swaps == 0) return;
  for (std::size_t c = 0; c < batch.spec.n_way; ++c) {
    std::vector<std::size_t> slots =
        detail::sample_without_replacement(batch.spec.k_shot, swaps, rng);
    for (std::size_t slot : slots) {
      std::size_t other = rng.below(batch.spec.n_way - 1);
      if (other >= c) ++other;
      batch.support[c * batch.spec.k_shot + slot] =
          detail::planted_sample(batch.spec, batch.motifs[other], rng);
      batch.manifest.sample_swaps.push_back({c, slot, other});
    }
  }
}

// Applies, in order: support time reversal, additive Gaussian background
// noise on a fixed 25% of all samples, frame noise, sample noise.
inline void apply_perturbations(EpisodeBatch& batch, const NoiseConfig& cfg, Rng& rng) {
  if (cfg.reverse_support) {
    const std::size_t frames = batch.spec.frames, d = batch.spec.feat_dim;
    for (Tensor& s : batch.support) {
      Tensor rev({frames, d});
      for (std::size_t r = 0; r < frames; ++r)
        for (std::size_t j = 0; j < d; ++j)
          rev.data()[(frames - 1 - r) * d + j] = s.data()[r * d + j];
      s = std::move(rev);
    }
    batch.manifest.support_reversed = true;
  }
  if (cfg.gaussian_bg_std > 0.0) {
    const std::size_t total = batch.support.size() + batch.query.size();
    const std::size_t count = total / 4;
    for (std::size_t idx : detail::sample_without_replacement(total, count, rng)) {
      const bool is_query = idx >= batch.support.size();
      Tensor& s = is_query ? batch.query[idx - batch.support.size()] : batch.support[idx];
      for (auto& v : s.vec()) v += rng.normal(cfg.gaussian_bg_std);
      batch.manifest.gaussian.push_back(
          {is_query, is_query ? idx - batch.support.size() : idx, cfg.gaussian_bg_std});
    }
  }
  if (cfg.frame_noise_count > 0) inject_frame_noise(batch, cfg.frame_noise_count, rng);
  if (cfg.sample_noise_ratio > 0.0) inject_sample_noise(batch, cfg.sample_noise_ratio, rng);
}

// ------------------------- fixture file round trip -------------------------
//
// Flat binary layout, little-endian:
//   magic "MEPB" | u16 version | n_way u32 | k_shot u32 | q_per_class u32 |
//   frames u32 | feat_dim u32 | motif_len u32 | noise_std f64 |
//   jitter_lo f64 | jitter_hi f64 | seed u64 |
//   support f64[N*K*F*D] | query f64[N*Q*F*D]
// Samples are class-major, so labels are implicit in the ordering.

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}
template <class T>
inline void put_le(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host expected");
  put_bytes(out, &v, sizeof(T));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  template <class T>
  T get(const char* what) {
    if (pos + sizeof(T) > buf.size())
      throw std::runtime_error("fixture: truncated reading " + std::string(what) + ": expected " +
                               std::to_string(pos + sizeof(T)) + " bytes, file has " +
                               std::to_string(buf.size()));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

}  // namespace detail

inline constexpr std::uint16_t kFixtureVersion = 1;

inline void write_episode(const EpisodeBatch& batch, const std::string& path) {
  std::string out;
  out.reserve(64 + 8 * (batch.support.size() + batch.query.size()) * batch.spec.frames *
                       batch.spec.feat_dim);
  detail::put_bytes(out, "MEPB", 4);
  detail::put_le<std::uint16_t>(out, kFixtureVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.spec.n_way));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.spec.k_shot));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.spec.q_per_class));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.spec.frames));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.spec.feat_dim));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(batch.spec.motif_len));
  detail::put_le<double>(out, batch.spec.noise_std);
  detail::put_le<double>(out, batch.spec.jitter_lo);
  detail::put_le<double>(out, batch.spec.jitter_hi);
  detail::put_le<std::uint64_t>(out, batch.spec.seed);
  for (const Tensor& s : batch.support)
    detail::put_bytes(out, s.data(), s.numel() * sizeof(double));
  for (const Tensor& q : batch.query) detail::put_bytes(out, q.data(), q.numel() * sizeof(double));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("fixture: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("fixture: short write to " + path);
}

inline EpisodeBatch read_episode(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("fixture: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r{buf};
  if (buf.size() < 4 || buf.compare(0, 4, "MEPB") != 0)
    throw std::runtime_error("fixture: bad magic in " + path);
  r.pos = 4;
  const auto version = r.get<std::uint16_t>("version");
  if (version != kFixtureVersion)
    throw std::runtime_error("fixture: unsupported version " + std::to_string(version));
  EpisodeBatch batch;
  batch.spec.n_way = r.get<std::uint32_t>("n_way");
  batch.spec.k_shot = r.get<std::uint32_t>("k_shot");
  batch.spec.q_per_class = r.get<std::uint32_t>("q_per_class");
  batch.spec.frames = r.get<std::uint32_t>("frames");
  batch.spec.feat_dim = r.get<std::uint32_t>("feat_dim");
  batch.spec.motif_len = r.get<std::uint32_t>("motif_len");
  batch.spec.noise_std = r.get<double>("noise_std");
  batch.spec.jitter_lo = r.get<double>("jitter_lo");
  batch.spec.jitter_hi = r.get<double>("jitter_hi");
  batch.spec.seed = r.get<std::uint64_t>("seed");
  const std::size_t per_sample = batch.spec.frames * batch.spec.feat_dim;
  const std::size_t n_support = batch.spec.n_way * batch.spec.k_shot;
  const std::size_t n_query = batch.spec.n_way * batch.spec.q_per_class;
  const std::size_t want = r.pos + (n_support + n_query) * per_sample * sizeof(double);
  if (buf.size() != want)
    throw std::runtime_error("fixture: payload length mismatch: expected " + std::to_string(want) +
                             " bytes, file has " + std::to_string(buf.size()));
  auto read_sample = [&]() {
    Tensor t({batch.spec.frames, batch.spec.feat_dim});
    std::memcpy(t.data(), buf.data() + r.pos, per_sample * sizeof(double));
    r.pos += per_sample * sizeof(double);
    return t;
  };
  for (std::size_t c = 0; c < batch.spec.n_way; ++c)
    for (std::size_t k = 0; k < batch.spec.k_shot; ++k) {
      batch.support.push_back(read_sample());
      batch.support_labels.push_back(c);
    }
  for (std::size_t c = 0; c < batch.spec.n_way; ++c)
    for (std::size_t q = 0; q < batch.spec.q_per_class; ++q) {
      batch.query.push_back(read_sample());
      batch.query_labels.push_back(c);
    }
  return batch;
}

}  // namespace manta
