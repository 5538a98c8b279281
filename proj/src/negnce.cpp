#include "hnf/negnce.hpp"

#include <cmath>
#include <stdexcept>

namespace hnf {

namespace {

constexpr double kLogFloor = 1e-12;

void require_square(const Tensor& s, const char* op) {
  if (s.ndim() != 2 || s.rows() != s.cols()) {
    throw std::invalid_argument(std::string(op) + ": expected a square matrix, got shape " +
                                shape_str(s.shape()));
  }
}

}  // namespace

void NegNceConfig::validate() const {
  if (gamma1 < 0.0 || gamma2 < 0.0) throw std::invalid_argument("negnce config: gamma weights must be >= 0");
}

InfoNcePair infonce(const Tensor& s, double logit_scale) {
  require_square(s, "infonce");
  if (!(logit_scale > 0.0)) throw std::invalid_argument("infonce: logit_scale must be > 0");
  for (double v : s.values()) {
    if (!std::isfinite(v)) throw std::domain_error("infonce: similarity matrix has a non-finite entry");
  }
  Tensor scaled = mul_scalar(s, logit_scale);
  Tensor diag = diagonal(scaled);  // 1 x B
  InfoNcePair out;
  out.t2v = mean(sub(transpose(logsumexp(scaled, 1)), diag));
  out.v2t = mean(sub(logsumexp(scaled, 0), diag));
  return out;
}

HardNegativeSet marginal_similarity(const Tensor& s, double xi) {
  require_square(s, "marginal_similarity");
  const int64_t b = s.rows();
  HardNegativeSet set;
  for (int64_t i = 0; i < b; ++i) {
    const double s_ii = s.at(i, i);
    for (int64_t j = 0; j < b; ++j) {
      if (i == j) continue;
      const double m =
          std::max(0.0, s.at(i, j) - s_ii + xi) + std::max(0.0, s.at(j, i) - s_ii + xi);
      if (m > 0.0) {
        set.pairs.emplace_back(i, j);
        set.sim_m.push_back(m);
      }
    }
  }
  return set;
}

NegNceLoss negnce_loss(const Tensor& s, const HardNegativeSet& set, const NegNceConfig& config,
                       double logit_scale) {
  config.validate();
  require_square(s, "negnce_loss");
  const int64_t b = s.rows();
  const int64_t h = set.count();

  NegNceLoss out;
  out.hard_count = h;
  InfoNcePair lp = infonce(s, logit_scale);
  out.l_p_t2v = lp.t2v;
  out.l_p_v2t = lp.v2t;

  const bool use_hard = h > 0 && config.gamma2 != 0.0;
  if (use_hard) {
    std::vector<double> mask_data(static_cast<size_t>(b * b), 0.0);
    for (const auto& [i, j] : set.pairs) {
      if (i < 0 || j < 0 || i >= b || j >= b || i == j) {
        throw std::invalid_argument("negnce_loss: hard-negative pair (" + std::to_string(i) + ", " +
                                    std::to_string(j) + ") is invalid for B=" + std::to_string(b));
      }
      mask_data[static_cast<size_t>(i * b + j)] = 1.0;
    }
    Tensor mask = Tensor::matrix(b, b, std::move(mask_data));
    Tensor scaled = mul_scalar(s, logit_scale);
    Tensor ones = Tensor::ones({b, b});

    auto direction_loss = [&](int axis) {
      Tensor p = softmax(scaled, axis);
      Tensor one_minus = sub(ones, p);
      for (const auto& [i, j] : set.pairs) {
        if (one_minus.at(i, j) <= kLogFloor) ++out.clamp_count;
      }
      Tensor safe = clamp_min(one_minus, kLogFloor);
      return mul_scalar(sum(mul(mask, log(safe))), -1.0 / static_cast<double>(h));
    };
    out.l_n_t2v = direction_loss(1);
    out.l_n_v2t = direction_loss(0);
    Tensor l_t2v = add(mul_scalar(lp.t2v, config.gamma1), mul_scalar(out.l_n_t2v, config.gamma2));
    Tensor l_v2t = add(mul_scalar(lp.v2t, config.gamma1), mul_scalar(out.l_n_v2t, config.gamma2));
    out.total = mul_scalar(add(l_t2v, l_v2t), 0.5);
  } else {
    out.l_n_t2v = Tensor::scalar(0.0);
    out.l_n_v2t = Tensor::scalar(0.0);
    out.total = mul_scalar(add(mul_scalar(lp.t2v, config.gamma1), mul_scalar(lp.v2t, config.gamma1)), 0.5);
  }
  return out;
}

}  // namespace hnf
