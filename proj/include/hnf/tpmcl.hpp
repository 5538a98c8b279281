#pragma once

// Triplet partial-margin contrastive learning: cross-modal token weight
// prediction, adaptive masking of the most informative tokens, and the
// three-hinge triplet loss keeping masked variants strictly below originals.

#include <cstdint>
#include <vector>

#include "hnf/autodiff.hpp"
#include "hnf/encoder.hpp"

namespace hnf {

struct TpmConfig {
  bool enabled = true;
  double mask_ratio = 0.6;  // cumulative weight below which top tokens are masked
  double delta = 0.6;       // triplet margin

  void validate() const;
};

struct TokenWeights {
  Tensor w_text;    // 1 x M, softmax-normalized over valid tokens
  Tensor w_visual;  // 1 x P, softmax-normalized
};

struct TripletSample {
  Tensor t_g, t_g_p;  // 1 x D weighted global features, original and masked
  Tensor v_h, v_h_p;  // N x D aggregated frames, original and masked
  std::vector<std::uint8_t> b_t;  // keep bits per token
  std::vector<std::uint8_t> b_v;  // keep bits per patch
  bool text_all_masked = false;
  bool visual_all_masked = false;
};

// Aligns f_cls to the M token rows through the trainable M_max x N_max
// matrix, concatenates per token, and scores with a one-hidden-layer head
// followed by softmax over the valid tokens.
Tensor text_token_weights(const Tensor& t_tokens, const Tensor& f_cls,
                          const std::vector<std::uint8_t>& valid, const EncoderParams& params);

// Mirror of text_token_weights: t_cls broadcast to the P patch rows through
// the trainable P_max x 1 column, softmax over all P positions.
Tensor visual_token_weights(const Tensor& v_tokens, const Tensor& t_cls, const EncoderParams& params);

// Sorts weights descending (ties toward the lower index) and masks (bit 0)
// every token whose inclusive cumulative weight is strictly below the ratio;
// the rest keep bit 1. The lowest-weight token always survives.
std::vector<std::uint8_t> adaptive_mask(const std::vector<double>& weights, double mask_ratio);

// t_g = w_text . t_tokens, t_g^p likewise on the row-masked tokens; v_h^p
// re-aggregates the masked patches through the same temporal encoder weights
// that produced v_h. Fully-masked sides proceed with zero features but are
// flagged for the step report.
TripletSample build_triplet(const TextFeatures& text, const VideoFeatures& video,
                            const TokenWeights& weights, const std::vector<std::uint8_t>& b_t,
                            const std::vector<std::uint8_t>& b_v, const EncoderParams& params,
                            const EncoderConfig& config);

struct TpmLoss {
  Tensor total;
  Tensor l1, l2, l3;
};

// s(a, B) = mean over frames of cosine(a, B_row). Hinges:
//   L1 = max(0, -s(t_cls, v_h) + s(t_cls, v_h^p) + delta)
//   L2 = max(0, -s(t_g,  v_h) + s(t_g,  v_h^p) + delta)
//   L3 = max(0, -s(t_g,  v_h) + s(t_g^p, v_h)  + delta)
TpmLoss tpm_loss(const TripletSample& triplet, const Tensor& t_cls, double delta);

struct TripletOutput {
  TokenWeights weights;
  TripletSample sample;
};

// weights -> masks -> triplet for one positive pair.
TripletOutput generate_triplet(const TextFeatures& text, const VideoFeatures& video,
                               const EncoderParams& params, const EncoderConfig& config,
                               const TpmConfig& tpm);

}  // namespace hnf
