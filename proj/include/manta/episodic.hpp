#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "manta/tensor.hpp"

namespace manta {

// Class prototype: arithmetic mean of the K support features.
inline Tensor build_prototype(Graph* g, const std::vector<Tensor>& support_feats) {
  if (support_feats.empty())
    throw std::invalid_argument("build_prototype: needs at least one support feature");
  Tensor acc = support_feats[0];
  for (std::size_t k = 1; k < support_feats.size(); ++k) acc = add(g, acc, support_feats[k]);
  return scalar_scale(g, acc, 1.0 / static_cast<double>(support_feats.size()));
}

// Rows in reversed order (time axis inversion).
inline Tensor time_reverse(Graph* g, const Tensor& x) { return reverse_axis(g, x, 0); }

// The four distances of the symmetric cross-distance and their mean.
// d1 and d2 compare like orientations, d3 and d4 are eps-guarded reciprocals
// of the mixed orientations (eps = 1e-6).
struct DistanceBundle {
  Tensor d1, d2, d3, d4;
  Tensor d;
};

namespace detail {

inline Tensor reciprocal_pos(Graph* g, const Tensor& t, double eps) {
  // (t + eps)^(-1) for strictly positive t + eps
  return exp(g, scalar_scale(g, log(g, add(g, t, Tensor::scalar(eps))), -1.0));
}

}  // namespace detail

inline DistanceBundle cross_distance(Graph* g, const Tensor& proto, const Tensor& query) {
  if (proto.shape() != query.shape())
    throw std::invalid_argument("cross_distance: shape mismatch " +
                                Tensor::shape_str(proto.shape()) + " vs " +
                                Tensor::shape_str(query.shape()));
  constexpr double kEps = 1e-6;
  Tensor proto_rev = time_reverse(g, proto);
  Tensor query_rev = time_reverse(g, query);
  DistanceBundle b;
  b.d1 = frobenius_norm(g, sub(g, proto, query));
  b.d2 = frobenius_norm(g, sub(g, proto_rev, query_rev));
  b.d3 = detail::reciprocal_pos(g, frobenius_norm(g, sub(g, proto, query_rev)), kEps);
  b.d4 = detail::reciprocal_pos(g, frobenius_norm(g, sub(g, proto_rev, query)), kEps);
  b.d = scalar_scale(g, add(g, add(g, b.d1, b.d2), add(g, b.d3, b.d4)), 0.25);
  return b;
}

struct Classification {
  std::size_t predicted = 0;              // argmin class, ties to the lowest index
  std::vector<DistanceBundle> per_class;  // one bundle per prototype
};

inline Classification classify(Graph* g, const Tensor& query_feat,
                               const std::vector<Tensor>& prototypes) {
  if (prototypes.empty()) throw std::invalid_argument("classify: no prototypes");
  Classification result;
  result.per_class.reserve(prototypes.size());
  double best = 0.0;
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    result.per_class.push_back(cross_distance(g, prototypes[c], query_feat));
    const double d = result.per_class.back().d.value();
    if (c == 0 || d < best) {
      best = d;
      result.predicted = c;
    }
  }
  return result;
}

// Differentiable surrogate of the cross-entropy over predictions:
// -log softmax(-d)[true].  The argmin in classify() stays the discrete
// prediction; this loss drives the gradients.
inline Tensor classification_loss(Graph* g, const std::vector<Tensor>& class_distances,
                                  std::size_t true_class) {
  if (class_distances.empty())
    throw std::invalid_argument("classification_loss: empty distance list");
  if (true_class >= class_distances.size())
    throw std::invalid_argument("classification_loss: class " + std::to_string(true_class) +
                                " out of range [0, " + std::to_string(class_distances.size()) +
                                ")");
  Tensor logits = scalar_scale(g, concat(g, 0, class_distances), -1.0);
  Tensor probs = softmax_axis(g, logits, 0);
  Tensor p_true = slice(g, probs, {true_class}, {1});
  return scalar_scale(g, log(g, p_true), -1.0);
}

}  // namespace manta
