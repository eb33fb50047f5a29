#include <doctest.h>

#include <cmath>
#include <vector>

#include "manta/contrastive.hpp"
#include "manta/rng.hpp"
#include "manta/tensor.hpp"

using manta::ContrastiveConfig;
using manta::EmbeddingSet;
using manta::Graph;
using manta::Rng;
using manta::Tensor;

namespace {

double cosine(const Tensor& a, const Tensor& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a.data()[i] * b.data()[i];
    na += a.data()[i] * a.data()[i];
    nb += b.data()[i] * b.data()[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Direct-summation oracle for one anchor.
double nce_oracle(const Tensor& z, const std::vector<Tensor>& pos,
                  const std::vector<Tensor>& neg, double tau) {
  double denom_neg = 0.0;
  for (const Tensor& n : neg) denom_neg += std::exp(cosine(z, n) / tau);
  double acc = 0.0;
  for (const Tensor& p : pos) {
    const double ep = std::exp(cosine(z, p) / tau);
    acc += -std::log(ep / (ep + denom_neg));
  }
  return acc / static_cast<double>(pos.size());
}

// Direct-summation oracle for a grouped term averaged over all eligible anchors.
double grouped_oracle(const std::vector<Tensor>& embeds, const std::vector<std::size_t>& groups,
                      double tau) {
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < embeds.size(); ++i) {
    std::vector<Tensor> pos, neg;
    for (std::size_t j = 0; j < embeds.size(); ++j) {
      if (j == i) continue;
      (groups[j] == groups[i] ? pos : neg).push_back(embeds[j]);
    }
    if (pos.empty()) continue;
    acc += nce_oracle(embeds[i], pos, neg, tau);
    ++count;
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

Tensor unit2(double x, double y) {
  const double n = std::sqrt(x * x + y * y);
  return Tensor({1, 2}, {x / n, y / n});
}

}  // namespace

TEST_CASE("embed: constant frames, unit norm, composition oracle") {
  Rng rng(71);
  ContrastiveConfig cfg = ContrastiveConfig::init(3, 4, rng);

  Tensor constant({2, 3}, {0.5, -1.0, 2.0, 0.5, -1.0, 2.0});
  Tensor e = manta::embed(nullptr, constant, cfg);
  CHECK(e.shape() == std::vector<std::size_t>{1, 4});
  // projection of the constant row, normalized
  std::vector<double> proj(4, 0.0);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 3; ++i)
      proj[j] += constant.data()[i] * cfg.head_w.at({i, j});
  double n = 0.0;
  for (double v : proj) n += v * v;
  n = std::sqrt(n);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(e.data()[j] == doctest::Approx(proj[j] / n).epsilon(1e-12));

  for (int trial = 0; trial < 20; ++trial) {
    Tensor feats = Tensor::randu({4, 3}, rng, -2.0, 2.0);
    Tensor v = manta::embed(nullptr, feats, cfg);
    double norm = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) norm += v.data()[i] * v.data()[i];
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-12);

    // mean -> project -> normalize oracle
    std::vector<double> mean(3, 0.0);
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t i = 0; i < 3; ++i) mean[i] += feats.at({f, i}) / 4.0;
    std::vector<double> want(4, 0.0);
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 3; ++i) want[j] += mean[i] * cfg.head_w.at({i, j});
    double wn = 0.0;
    for (double w : want) wn += w * w;
    wn = std::sqrt(wn);
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(v.data()[j] == doctest::Approx(want[j] / wn).epsilon(1e-11));
  }
}

TEST_CASE("info_nce: closed forms") {
  Tensor z = unit2(1.0, 0.0);
  Tensor orth = unit2(0.0, 1.0);

  // positive sim 1, one negative sim 0, tau = 1 -> ln(1 + e^-1)
  const double got = manta::info_nce(nullptr, z, {z}, {orth}, 1.0).value();
  CHECK(got == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));

  // all similarities equal, R = 4 negatives -> ln(1 + 4)
  std::vector<Tensor> negs(4, z);
  CHECK(manta::info_nce(nullptr, z, {z}, negs, 0.05).value() ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // tau = 0.07 against the direct-summation oracle
  Tensor p = unit2(0.9, std::sqrt(1 - 0.81));
  Tensor n1 = unit2(0.1, std::sqrt(1 - 0.01));
  Tensor n2 = unit2(-0.3, std::sqrt(1 - 0.09));
  const double tau = 0.07;
  const double want = nce_oracle(z, {p}, {n1, n2}, tau);
  CHECK(manta::info_nce(nullptr, z, {p}, {n1, n2}, tau).value() ==
        doctest::Approx(want).epsilon(1e-12));

  CHECK_THROWS_AS(manta::info_nce(nullptr, z, {}, negs, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(manta::info_nce(nullptr, z, {z}, negs, 0.0), std::invalid_argument);
}

TEST_CASE("info_nce: non-negative, scale invariant, monotone in the positive") {
  Rng rng(72);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor z = Tensor::randu({1, 4}, rng, -1.0, 1.0);
    Tensor p = Tensor::randu({1, 4}, rng, -1.0, 1.0);
    Tensor n1 = Tensor::randu({1, 4}, rng, -1.0, 1.0);
    const double v = manta::info_nce(nullptr, z, {p}, {n1}, 0.3).value();
    CHECK(v >= 0.0);
    // common rescaling of all embeddings leaves the loss unchanged
    auto scale = [](const Tensor& t, double c) {
      Tensor out(t.shape(), t.vec());
      for (auto& x : out.vec()) x *= c;
      return out;
    };
    const double vs =
        manta::info_nce(nullptr, scale(z, 3.7), {scale(p, 3.7)}, {scale(n1, 3.7)}, 0.3).value();
    CHECK(vs == doctest::Approx(v).epsilon(1e-12));
  }

  // increasing the positive similarity strictly decreases the loss
  Tensor z = unit2(1.0, 0.0);
  Tensor n = unit2(0.2, std::sqrt(1 - 0.04));
  double prev = 1e100;
  for (double theta : {1.2, 0.9, 0.6, 0.3, 0.05}) {
    Tensor p = unit2(std::cos(theta), std::sin(theta));
    const double v = manta::info_nce(nullptr, z, {p}, {n}, 0.5).value();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("support_contrastive: skip rule, hand case, permutation symmetry") {
  Rng rng(73);
  // K = 1: no positives anywhere -> exactly zero
  std::vector<Tensor> singles{unit2(1, 0), unit2(0, 1)};
  Tensor zero = manta::support_contrastive(nullptr, singles, {0, 1}, 1.0);
  CHECK(zero.value() == 0.0);

  // two classes, two identical members each, cross-class orthogonal, tau = 1:
  // every anchor sees positive sim 1 and two negatives at sim 0
  Tensor a = unit2(1, 0), b = unit2(0, 1);
  std::vector<Tensor> embeds{a, a, b, b};
  std::vector<std::size_t> labels{0, 0, 1, 1};
  const double got = manta::support_contrastive(nullptr, embeds, labels, 1.0).value();
  const double want = std::log(1.0 + 2.0 * std::exp(-1.0));
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
  CHECK(got == doctest::Approx(grouped_oracle(embeds, labels, 1.0)).epsilon(1e-12));

  // permuting sample order leaves the loss unchanged
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor> e;
    std::vector<std::size_t> l;
    for (int i = 0; i < 6; ++i) {
      e.push_back(Tensor::randu({1, 3}, rng, -1.0, 1.0));
      l.push_back(i % 3);
    }
    const double base = manta::support_contrastive(nullptr, e, l, 0.2).value();
    std::vector<Tensor> ep{e[3], e[0], e[5], e[1], e[4], e[2]};
    std::vector<std::size_t> lp{l[3], l[0], l[5], l[1], l[4], l[2]};
    CHECK(manta::support_contrastive(nullptr, ep, lp, 0.2).value() ==
          doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("query_contrastive: skip and direct-summation value") {
  // one query per class -> skipped
  std::vector<Tensor> singles{unit2(1, 0), unit2(0, 1), unit2(-1, 0)};
  CHECK(manta::query_contrastive(nullptr, singles, {0, 1, 2}, 0.07).value() == 0.0);

  Rng rng(74);
  std::vector<Tensor> e;
  std::vector<std::size_t> l;
  for (int i = 0; i < 6; ++i) {
    e.push_back(Tensor::randu({1, 4}, rng, -1.0, 1.0));
    l.push_back(i / 3);
  }
  CHECK(manta::query_contrastive(nullptr, e, l, 0.07).value() ==
        doctest::Approx(grouped_oracle(e, l, 0.07)).epsilon(1e-11));
}

TEST_CASE("joint_contrastive: two classes with 2K = 4 members each") {
  Rng rng(75);
  std::vector<Tensor> e;
  std::vector<std::size_t> l;
  for (int i = 0; i < 8; ++i) {
    e.push_back(Tensor::randu({1, 3}, rng, -1.0, 1.0));
    l.push_back(i / 4);
  }
  CHECK(manta::joint_contrastive(nullptr, e, l, 0.07).value() ==
        doctest::Approx(grouped_oracle(e, l, 0.07)).epsilon(1e-11));
}

TEST_CASE("hybrid_loss: skip accounting and term toggles") {
  Rng rng(76);
  ContrastiveConfig cfg = ContrastiveConfig::init(3, 4, rng);
  cfg.tau = 0.5;

  // K = 1 and one query per class: support and query terms both skip, the
  // joint term still has 2 members per class
  EmbeddingSet set;
  std::vector<std::size_t> labels{0, 1, 0, 1};
  std::vector<bool> is_query{false, false, true, true};
  std::vector<Tensor> raw;
  for (int i = 0; i < 4; ++i) raw.push_back(Tensor::randu({1, 4}, rng, -1.0, 1.0));
  set.vectors = raw;
  set.group_ids = labels;
  set.is_query = is_query;

  const double joint = grouped_oracle(raw, labels, cfg.tau);
  CHECK(manta::hybrid_loss(nullptr, set, cfg).value() == doctest::Approx(joint).epsilon(1e-11));

  // toggles reproduce each decomposition row
  ContrastiveConfig off = cfg;
  off.term_joint = false;
  CHECK(manta::hybrid_loss(nullptr, set, off).value() == 0.0);

  // full episode: 2 classes, 2 supports + 2 queries each
  EmbeddingSet full;
  for (int i = 0; i < 8; ++i) {
    full.vectors.push_back(Tensor::randu({1, 4}, rng, -1.0, 1.0));
    full.group_ids.push_back((i / 2) % 2);
    full.is_query.push_back(i >= 4);
  }
  std::vector<Tensor> sup(full.vectors.begin(), full.vectors.begin() + 4);
  std::vector<Tensor> qry(full.vectors.begin() + 4, full.vectors.end());
  std::vector<std::size_t> sl(full.group_ids.begin(), full.group_ids.begin() + 4);
  std::vector<std::size_t> ql(full.group_ids.begin() + 4, full.group_ids.end());
  const double want = grouped_oracle(sup, sl, cfg.tau) + grouped_oracle(qry, ql, cfg.tau) +
                      grouped_oracle(full.vectors, full.group_ids, cfg.tau);
  CHECK(manta::hybrid_loss(nullptr, full, cfg).value() == doctest::Approx(want).epsilon(1e-11));
}

TEST_CASE("hybrid_loss gradient w.r.t. the projection head") {
  Rng rng(77);
  ContrastiveConfig cfg = ContrastiveConfig::init(3, 4, rng);
  cfg.tau = 0.3;
  std::vector<Tensor> feats;
  for (int i = 0; i < 6; ++i) feats.push_back(Tensor::randu({4, 3}, rng, -1.0, 1.0));
  std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  std::vector<bool> is_query{false, false, false, true, true, true};

  std::vector<Tensor> params{cfg.head_w};
  auto build = [&](Graph* g, const std::vector<Tensor>& q) {
    ContrastiveConfig local = cfg;
    local.head_w = q[0];
    EmbeddingSet set;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      set.vectors.push_back(manta::embed(g, feats[i], local));
      set.group_ids.push_back(labels[i]);
      set.is_query.push_back(is_query[i]);
    }
    return manta::hybrid_loss(g, set, local);
  };
  manta::GradCheckReport rep = manta::grad_check(build, params, 1e-5);
  CHECK(rep.finite);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("single random anchor policy is deterministic given the generator") {
  Rng rng(78);
  std::vector<Tensor> e;
  std::vector<std::size_t> l;
  for (int i = 0; i < 4; ++i) {
    e.push_back(Tensor::randu({1, 3}, rng, -1.0, 1.0));
    l.push_back(i / 2);
  }
  Rng r1(5), r2(5);
  const double a = manta::support_contrastive(nullptr, e, l, 0.2, true, &r1).value();
  const double b = manta::support_contrastive(nullptr, e, l, 0.2, true, &r2).value();
  CHECK(a == b);
  CHECK_THROWS_AS(manta::support_contrastive(nullptr, e, l, 0.2, true, nullptr),
                  std::invalid_argument);
}
