#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "manta/rng.hpp"
#include "manta/tensor.hpp"

namespace manta {

// Parameters of one scan direction of a diagonal state-space recurrence.
// The state transition is A = -exp(a_log), so it is strictly negative by
// construction, and the step size Delta = exp(delta_log) is strictly
// positive. Discretization: a_bar = exp(Delta * A) (zero-order hold on A),
// b_bar = Delta * B (Euler on B).
struct SsmParams {
  Tensor a_log;      // [n_state, 1]
  Tensor b_proj;     // [n_state, width]
  Tensor c_proj;     // [width, n_state]
  Tensor delta_log;  // [1, width]
  Tensor skip_gain;  // [1, width]

  // Input-dependent (selective) extras; defined only when selective is set.
  bool selective = false;
  Tensor w_delta;  // [width, width]
  Tensor w_b;      // [width, n_state]
  Tensor w_c;      // [width, n_state]

  std::size_t n_state() const { return a_log.shape()[0]; }
  std::size_t width() const { return delta_log.shape()[1]; }

  // delta_lo/delta_hi set the initial step-size range, i.e. the time scale
  // the scan starts out responsive to; fragments want fast steps, the full
  // timeline slow ones.
  static SsmParams init(std::size_t n_state, std::size_t width, Rng& rng,
                        bool selective = false, double delta_lo = 0.05,
                        double delta_hi = 0.5, double sel_proj = 0.05) {
    SsmParams p;
    p.a_log = Tensor({n_state, 1});
    for (std::size_t s = 0; s < n_state; ++s)
      p.a_log.data()[s] = std::log(static_cast<double>(s + 1));
    const double bc = 1.0 / std::sqrt(static_cast<double>(n_state));
    p.b_proj = Tensor::randu({n_state, width}, rng, -bc, bc);
    p.c_proj = Tensor::randu({width, n_state}, rng, -bc, bc);
    p.delta_log = Tensor::randu({1, width}, rng, std::log(delta_lo), std::log(delta_hi));
    p.skip_gain = Tensor::full({1, width}, 1.0);
    p.selective = selective;
    if (selective) {
      // sel_proj calibrates the input-dependent projections so the scan path
      // starts at roughly the input's own scale
      p.w_delta = Tensor::randu({width, width}, rng, -0.1, 0.1);
      p.w_b = Tensor::randu({width, n_state}, rng, -sel_proj, sel_proj);
      p.w_c = Tensor::randu({width, n_state}, rng, -sel_proj, sel_proj);
    }
    return p;
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out{&a_log, &b_proj, &c_proj, &delta_log, &skip_gain};
    if (selective) {
      out.push_back(&w_delta);
      out.push_back(&w_b);
      out.push_back(&w_c);
    }
    return out;
  }

  void validate() const {
    for (const Tensor* t : const_cast<SsmParams*>(this)->tensors())
      for (std::size_t i = 0; i < t->numel(); ++i)
        if (!std::isfinite(t->data()[i]))
          throw std::invalid_argument("ssm: non-finite parameter entry");
  }
};

struct ScanOutput {
  Tensor y;            // [L, width]
  Tensor final_state;  // [n_state, width], detached diagnostic
};

// a_bar = exp(Delta * A) elementwise, b_bar = Delta * B. Delta is
// per-channel, so both results are [n_state, width]; at width == 1 they
// reduce to per-state vectors.
inline std::pair<Tensor, Tensor> discretize(Graph* g, const SsmParams& p) {
  p.validate();
  const std::size_t S = p.n_state(), W = p.width();
  Tensor a_neg = scalar_scale(g, exp(g, p.a_log), -1.0);        // [S,1], strictly negative
  Tensor delta = exp(g, p.delta_log);                            // [1,W], strictly positive
  Tensor a_bar = exp(g, matmul(g, a_neg, delta));                // [S,W]
  Tensor delta_rows = matmul(g, Tensor::full({S, 1}, 1.0), delta);
  Tensor b_bar = mul(g, delta_rows, p.b_proj);                   // [S,W]
  (void)W;
  return {a_bar, b_bar};
}

// Exact sequential recurrence from h_0 = 0 over an [L, width] input,
// including the skip path. seg == 0 scans the whole sequence as one segment;
// a positive seg restarts the state every seg rows (used by the fragment
// modules to batch independent fragments into one kernel call).
inline ScanOutput ssm_scan(Graph* g, const SsmParams& p, const Tensor& x, std::size_t seg = 0) {
  if (x.rank() != 2)
    throw std::invalid_argument("ssm_scan: input must be [L, width], got " +
                                Tensor::shape_str(x.shape()));
  if (x.shape()[1] != p.width())
    throw std::invalid_argument("ssm_scan: input width " + std::to_string(x.shape()[1]) +
                                " does not match parameter width " + std::to_string(p.width()));
  const std::size_t L = x.shape()[0];
  if (seg == 0) seg = L;
  ScanOutput out;
  if (p.selective) {
    p.validate();
    out.y = ssm_scan_selective_kernel(g, p.a_log, p.delta_log, p.w_delta, p.w_b, p.w_c,
                                      p.skip_gain, x, seg, &out.final_state);
    return out;
  }
  auto [a_bar, b_bar] = discretize(g, p);
  out.y = ssm_scan_kernel(g, a_bar, b_bar, p.c_proj, p.skip_gain, x, seg, &out.final_state);
  return out;
}

// Forward scan plus time-reversed scan of the time-reversed input. Passing
// the same parameter object twice gives the shared-parameter form.
inline std::pair<Tensor, Tensor> bidirectional_scan(Graph* g, const SsmParams& fwd,
                                                    const SsmParams& bwd, const Tensor& x,
                                                    std::size_t seg = 0) {
  if (fwd.n_state() != bwd.n_state() || fwd.width() != bwd.width())
    throw std::invalid_argument(
        "bidirectional_scan: parameter dimensions differ: state " +
        std::to_string(fwd.n_state()) + "/" + std::to_string(bwd.n_state()) + ", width " +
        std::to_string(fwd.width()) + "/" + std::to_string(bwd.width()));
  const std::size_t L = x.shape()[0];
  if (seg == 0) seg = L;
  Tensor y_fw = ssm_scan(g, fwd, x, seg).y;
  Tensor x_rev = reverse_segments(g, x, seg);
  Tensor y_bw = reverse_segments(g, ssm_scan(g, bwd, x_rev, seg).y, seg);
  return {y_fw, y_bw};
}

}  // namespace manta
