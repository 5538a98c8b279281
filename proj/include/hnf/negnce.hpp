#pragma once

// Symmetric InfoNCE, marginal-similarity hard-negative mining, and the
// negative-aware InfoNCE loss that reweights mined pairs.

#include <cstdint>
#include <utility>
#include <vector>

#include "hnf/autodiff.hpp"

namespace hnf {

struct NegNceConfig {
  bool enabled = true;
  double gamma1 = 1.0;
  double gamma2 = 0.5;
  double xi = 0.0;  // mining margin

  void validate() const;
};

struct HardNegativeSet {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (i, j), i != j
  std::vector<double> sim_m;                       // parallel to pairs, all > 0
  int64_t count() const { return static_cast<int64_t>(pairs.size()); }
};

struct InfoNcePair {
  Tensor t2v;
  Tensor v2t;
};

// L_p^{t2v} = -(1/B) sum_i log(exp(tau S_ii) / sum_j exp(tau S_ij)), and the
// column-wise mirror. Stabilized log-sum-exp; rejects non-finite entries.
InfoNcePair infonce(const Tensor& s, double logit_scale);

// sim_m(i,j) = max(0, S_ij - S_ii + xi) + max(0, S_ji - S_ii + xi); the pair
// joins the set iff sim_m > 0. The diagonal is excluded by construction even
// when xi > 0. Membership is a constant within a training step.
HardNegativeSet marginal_similarity(const Tensor& s, double xi);

struct NegNceLoss {
  Tensor total;  // (gamma1 L_p + gamma2 L_n averaged over directions)
  Tensor l_p_t2v, l_p_v2t;
  Tensor l_n_t2v, l_n_v2t;  // zero tensors when the set is empty
  int64_t hard_count = 0;
  int64_t clamp_count = 0;  // times 1-p hit the 1e-12 floor
};

// L_n^{dir} = -(1/H) sum_{(i,j) in N} log(1 - p_ij^{dir}) with p from the
// row/column softmax of tau S. With gamma2 = 0 the result is bitwise equal
// to the plain InfoNCE average.
NegNceLoss negnce_loss(const Tensor& s, const HardNegativeSet& set, const NegNceConfig& config,
                       double logit_scale);

}  // namespace hnf
