#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "manta/rng.hpp"
#include "manta/tensor.hpp"

namespace manta {

// Contrastive branch configuration: temperature, projection head, anchor
// policy, and per-term toggles for the loss decomposition ablations.
struct ContrastiveConfig {
  double tau = 0.07;
  Tensor head_w;  // [D, D_e]
  bool single_random_anchor = false;
  bool term_support = true;
  bool term_query = true;
  bool term_joint = true;

  static ContrastiveConfig init(std::size_t d, std::size_t d_embed, Rng& rng) {
    ContrastiveConfig c;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    c.head_w = Tensor::randu({d, d_embed}, rng, -s, s);
    return c;
  }

  void validate() const {
    if (tau <= 0.0) throw std::invalid_argument("contrastive: temperature must be positive");
  }
};

// Episode embeddings with their class groups and origins.
struct EmbeddingSet {
  std::vector<Tensor> vectors;         // each [1, D_e], unit length
  std::vector<std::size_t> group_ids;  // episode class indices
  std::vector<bool> is_query;          // origin tag: support (false) / query (true)
};

// Temporal mean over frames, projection head, then eps-guarded unit
// normalization.
inline Tensor embed(Graph* g, const Tensor& features, const ContrastiveConfig& cfg) {
  if (features.rank() != 2)
    throw std::invalid_argument("embed: features must be [F, D], got " +
                                Tensor::shape_str(features.shape()));
  const std::size_t frames = features.shape()[0];
  Tensor pooled = matmul(g, Tensor::full({1, frames}, 1.0 / static_cast<double>(frames)), features);
  Tensor projected = matmul(g, pooled, cfg.head_w);
  Tensor norm_sq = sum(g, square(g, projected));
  // (|v|^2 + 1e-24)^(-1/2): unit norm with a 1e-12 floor on the length
  Tensor inv_norm = exp(g, scalar_scale(g, log(g, add(g, norm_sq, Tensor::scalar(1e-24))), -0.5));
  return mul(g, projected, inv_norm);
}

// Mean over positives p of
//   -log( e^{sim(z,p)/tau} / (e^{sim(z,p)/tau} + sum_r e^{sim(z,n_r)/tau}) ).
// Similarities are cosine, so the loss is invariant to a common rescaling of
// the embedding vectors.
inline Tensor info_nce(Graph* g, const Tensor& anchor, const std::vector<Tensor>& positives,
                       const std::vector<Tensor>& negatives, double tau) {
  if (positives.empty()) throw std::invalid_argument("info_nce: needs at least one positive");
  if (tau <= 0.0) throw std::invalid_argument("info_nce: temperature must be positive");
  std::vector<Tensor> neg_logits;
  neg_logits.reserve(negatives.size());
  for (const Tensor& n : negatives)
    neg_logits.push_back(scalar_scale(g, cosine_similarity(g, anchor, n), 1.0 / tau));
  Tensor acc;
  for (std::size_t pi = 0; pi < positives.size(); ++pi) {
    std::vector<Tensor> logits;
    logits.reserve(1 + neg_logits.size());
    logits.push_back(scalar_scale(g, cosine_similarity(g, anchor, positives[pi]), 1.0 / tau));
    for (const Tensor& n : neg_logits) logits.push_back(n);
    Tensor probs = softmax_axis(g, concat(g, 0, logits), 0);
    Tensor term = scalar_scale(g, log(g, slice(g, probs, {0}, {1})), -1.0);
    acc = (pi == 0) ? term : add(g, acc, term);
  }
  return scalar_scale(g, acc, 1.0 / static_cast<double>(positives.size()));
}

namespace detail {

// Shared body of the three contrastive terms: every sample is an anchor,
// same-group samples are positives, the rest negatives. Anchors without a
// positive contribute nothing; with none left the term is zero. With the
// single-random-anchor policy one eligible anchor is drawn instead of
// averaging.
inline Tensor grouped_contrastive(Graph* g, const std::vector<Tensor>& embeds,
                                  const std::vector<std::size_t>& groups, double tau,
                                  bool single_random_anchor, Rng* rng) {
  if (embeds.size() != groups.size())
    throw std::invalid_argument("contrastive: embeddings/labels size mismatch");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < embeds.size(); ++i)
    for (std::size_t j = 0; j < embeds.size(); ++j)
      if (j != i && groups[j] == groups[i]) {
        eligible.push_back(i);
        break;
      }
  if (eligible.empty()) return Tensor::scalar(0.0);

  std::vector<std::size_t> anchors;
  if (single_random_anchor) {
    if (!rng)
      throw std::invalid_argument("contrastive: single_random_anchor needs a generator");
    anchors.push_back(eligible[rng->below(eligible.size())]);
  } else {
    anchors = eligible;
  }

  Tensor acc;
  bool first = true;
  for (std::size_t i : anchors) {
    std::vector<Tensor> positives, negatives;
    for (std::size_t j = 0; j < embeds.size(); ++j) {
      if (j == i) continue;
      (groups[j] == groups[i] ? positives : negatives).push_back(embeds[j]);
    }
    Tensor term = info_nce(g, embeds[i], positives, negatives, tau);
    acc = first ? term : add(g, acc, term);
    first = false;
  }
  return scalar_scale(g, acc, 1.0 / static_cast<double>(anchors.size()));
}

}  // namespace detail

// Supervised term over the support set (same label -> positive).
inline Tensor support_contrastive(Graph* g, const std::vector<Tensor>& embeds,
                                  const std::vector<std::size_t>& labels, double tau,
                                  bool single_random_anchor = false, Rng* rng = nullptr) {
  return detail::grouped_contrastive(g, embeds, labels, tau, single_random_anchor, rng);
}

// Unsupervised term over the query set, grouped by episode class.
inline Tensor query_contrastive(Graph* g, const std::vector<Tensor>& embeds,
                                const std::vector<std::size_t>& labels, double tau,
                                bool single_random_anchor = false, Rng* rng = nullptr) {
  return detail::grouped_contrastive(g, embeds, labels, tau, single_random_anchor, rng);
}

// Unsupervised term over the union of support and query (2K per class).
inline Tensor joint_contrastive(Graph* g, const std::vector<Tensor>& embeds,
                                const std::vector<std::size_t>& labels, double tau,
                                bool single_random_anchor = false, Rng* rng = nullptr) {
  return detail::grouped_contrastive(g, embeds, labels, tau, single_random_anchor, rng);
}

// L_hc = L_S + L_Q + L_SQ with skip semantics per term.
inline Tensor hybrid_loss(Graph* g, const EmbeddingSet& set, const ContrastiveConfig& cfg,
                          Rng* rng = nullptr) {
  cfg.validate();
  std::vector<Tensor> sup, qry;
  std::vector<std::size_t> sup_labels, qry_labels;
  for (std::size_t i = 0; i < set.vectors.size(); ++i) {
    if (set.is_query[i]) {
      qry.push_back(set.vectors[i]);
      qry_labels.push_back(set.group_ids[i]);
    } else {
      sup.push_back(set.vectors[i]);
      sup_labels.push_back(set.group_ids[i]);
    }
  }
  Tensor total = Tensor::scalar(0.0);
  if (cfg.term_support && !sup.empty())
    total = add(g, total,
                support_contrastive(g, sup, sup_labels, cfg.tau, cfg.single_random_anchor, rng));
  if (cfg.term_query && !qry.empty())
    total = add(g, total,
                query_contrastive(g, qry, qry_labels, cfg.tau, cfg.single_random_anchor, rng));
  if (cfg.term_joint)
    total = add(g, total,
                joint_contrastive(g, set.vectors, set.group_ids, cfg.tau,
                                  cfg.single_random_anchor, rng));
  return total;
}

}  // namespace manta
