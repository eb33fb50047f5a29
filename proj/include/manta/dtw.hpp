#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "manta/tensor.hpp"

namespace manta {

// Dynamic time warping over a precomputed rows x cols cost matrix,
// boundary-anchored with moves {right, down, diagonal}; returns the minimal
// path cost divided by the number of cells on the path. Ties in the
// backtrack prefer the diagonal, then the vertical move.
inline double dtw_from_costs(const std::vector<double>& cost, std::size_t rows,
                             std::size_t cols) {
  if (rows == 0 || cols == 0 || cost.size() != rows * cols)
    throw std::invalid_argument("dtw: cost matrix size mismatch");
  std::vector<double> acc(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double best;
      if (i == 0 && j == 0)
        best = 0.0;
      else if (i == 0)
        best = acc[j - 1];
      else if (j == 0)
        best = acc[(i - 1) * cols];
      else
        best = std::min({acc[(i - 1) * cols + (j - 1)], acc[(i - 1) * cols + j],
                         acc[i * cols + (j - 1)]});
      acc[i * cols + j] = cost[i * cols + j] + best;
    }
  // path length via backtrack
  std::size_t i = rows - 1, j = cols - 1, steps = 1;
  while (i > 0 || j > 0) {
    if (i == 0)
      --j;
    else if (j == 0)
      --i;
    else {
      const double diag = acc[(i - 1) * cols + (j - 1)];
      const double up = acc[(i - 1) * cols + j];
      const double left = acc[i * cols + (j - 1)];
      if (diag <= up && diag <= left) {
        --i;
        --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    }
    ++steps;
  }
  return acc[(rows - 1) * cols + (cols - 1)] / static_cast<double>(steps);
}

// Alignment score between two [F, D] sequences: cell cost is
// 1 - cosine(A_i, B_j) with the same 1e-12 denominator clamp as the
// cosine primitive.
inline double dtw_score(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("dtw_score: inputs must be [F, D] with equal D, got " +
                                Tensor::shape_str(a.shape()) + " and " +
                                Tensor::shape_str(b.shape()));
  const std::size_t ra = a.shape()[0], rb = b.shape()[0], d = a.shape()[1];
  std::vector<double> norm_a(ra), norm_b(rb);
  for (std::size_t i = 0; i < ra; ++i) {
    double n = 0;
    for (std::size_t k = 0; k < d; ++k) n += a.data()[i * d + k] * a.data()[i * d + k];
    norm_a[i] = std::max(std::sqrt(n), 1e-12);
  }
  for (std::size_t j = 0; j < rb; ++j) {
    double n = 0;
    for (std::size_t k = 0; k < d; ++k) n += b.data()[j * d + k] * b.data()[j * d + k];
    norm_b[j] = std::max(std::sqrt(n), 1e-12);
  }
  std::vector<double> cost(ra * rb);
  for (std::size_t i = 0; i < ra; ++i)
    for (std::size_t j = 0; j < rb; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += a.data()[i * d + k] * b.data()[j * d + k];
      cost[i * rb + j] = 1.0 - dot / (norm_a[i] * norm_b[j]);
    }
  return dtw_from_costs(cost, ra, rb);
}

}  // namespace manta
