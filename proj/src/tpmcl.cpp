#include "hnf/tpmcl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hnf {

void TpmConfig::validate() const {
  if (mask_ratio < 0.0 || mask_ratio > 1.0) {
    throw std::invalid_argument("tpm config: mask_ratio must be in [0, 1], got " + std::to_string(mask_ratio));
  }
  if (delta < 0.0) throw std::invalid_argument("tpm config: delta must be >= 0");
}

namespace {

Tensor weight_head(const Tensor& concatenated, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                   const Tensor& b2, const std::vector<std::uint8_t>& valid) {
  Tensor hidden = relu(add_rowvec(matmul(concatenated, w1), b1));
  Tensor scores = add_rowvec(matmul(hidden, w2), b2);  // L x 1
  return masked_softmax(transpose(scores), valid);
}

}  // namespace

Tensor text_token_weights(const Tensor& t_tokens, const Tensor& f_cls,
                          const std::vector<std::uint8_t>& valid, const EncoderParams& params) {
  const int64_t m = t_tokens.rows();
  const int64_t n = f_cls.rows();
  if (m < 1 || n < 1) {
    throw std::invalid_argument("text_token_weights: need at least one token and one frame, got M=" +
                                std::to_string(m) + ", N=" + std::to_string(n));
  }
  if (m > params.tw_align.rows() || n > params.tw_align.cols()) {
    throw std::invalid_argument("text_token_weights: M=" + std::to_string(m) + ", N=" + std::to_string(n) +
                                " exceed the aligner shape " + shape_str(params.tw_align.shape()));
  }
  Tensor aligner = slice(params.tw_align, 0, m, 0, n);
  Tensor f_hat = matmul(aligner, f_cls);  // M x D
  Tensor x = concat_cols(t_tokens, f_hat);
  return weight_head(x, params.tw_w1, params.tw_b1, params.tw_w2, params.tw_b2, valid);
}

Tensor visual_token_weights(const Tensor& v_tokens, const Tensor& t_cls, const EncoderParams& params) {
  const int64_t p = v_tokens.rows();
  if (p < 1) throw std::invalid_argument("visual_token_weights: need at least one patch token");
  if (p > params.vw_align.rows()) {
    throw std::invalid_argument("visual_token_weights: P=" + std::to_string(p) +
                                " exceeds the aligner shape " + shape_str(params.vw_align.shape()));
  }
  Tensor aligner = slice(params.vw_align, 0, p, 0, 1);
  Tensor t_hat = matmul(aligner, t_cls);  // P x D
  Tensor x = concat_cols(v_tokens, t_hat);
  return weight_head(x, params.vw_w1, params.vw_b1, params.vw_w2, params.vw_b2,
                     std::vector<std::uint8_t>(static_cast<size_t>(p), 1));
}

std::vector<std::uint8_t> adaptive_mask(const std::vector<double>& weights, double mask_ratio) {
  if (mask_ratio < 0.0 || mask_ratio > 1.0) {
    throw std::invalid_argument("adaptive_mask: mask_ratio must be in [0, 1], got " +
                                std::to_string(mask_ratio));
  }
  if (weights.empty()) throw std::invalid_argument("adaptive_mask: empty weight vector");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::fabs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("adaptive_mask: weights sum to " + std::to_string(total) + ", expected 1");
  }
  std::vector<size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return weights[a] > weights[b]; });
  std::vector<std::uint8_t> keep(weights.size(), 1);
  double cum = 0.0;
  for (size_t r : order) {
    cum += weights[r];
    if (cum < mask_ratio) keep[r] = 0;
  }
  return keep;
}

TripletSample build_triplet(const TextFeatures& text, const VideoFeatures& video,
                            const TokenWeights& weights, const std::vector<std::uint8_t>& b_t,
                            const std::vector<std::uint8_t>& b_v, const EncoderParams& params,
                            const EncoderConfig& config) {
  const int64_t m = text.t_tokens.rows();
  const int64_t p = video.v_tokens.rows();
  if (static_cast<int64_t>(b_t.size()) != m || static_cast<int64_t>(b_v.size()) != p) {
    throw std::invalid_argument("build_triplet: mask lengths (" + std::to_string(b_t.size()) + ", " +
                                std::to_string(b_v.size()) + ") do not match M=" + std::to_string(m) +
                                ", P=" + std::to_string(p));
  }
  TripletSample out;
  out.b_t = b_t;
  out.b_v = b_v;
  out.text_all_masked = std::none_of(b_t.begin(), b_t.end(), [](std::uint8_t b) { return b != 0; });
  out.visual_all_masked = std::none_of(b_v.begin(), b_v.end(), [](std::uint8_t b) { return b != 0; });

  Tensor t_tokens_p = zero_rows(text.t_tokens, b_t);
  out.t_g = matmul(weights.w_text, text.t_tokens);
  out.t_g_p = matmul(weights.w_text, t_tokens_p);

  out.v_h = video.v_h;
  const int64_t slots = config.patches_per_frame + 1;
  if (p % slots != 0) {
    throw std::invalid_argument("build_triplet: " + std::to_string(p) + " patch rows do not factor into " +
                                std::to_string(slots) + " slots per frame");
  }
  const int64_t frames = p / slots;
  Tensor v_tokens_p = zero_rows(video.v_tokens, b_v);
  out.v_h_p = temporal_encode(frame_aggregate(v_tokens_p, frames, slots), params, config);
  return out;
}

namespace {

// Mean over frames of cosine(a, B_row); errors name the offending feature.
Tensor mean_frame_cosine(const Tensor& a, const Tensor& b, const char* a_name, const char* b_name) {
  Tensor na, nb;
  try {
    na = l2_normalize_rows(a);
  } catch (const std::domain_error&) {
    throw std::domain_error(std::string("tpm_loss: feature '") + a_name + "' has zero norm");
  }
  try {
    nb = l2_normalize_rows(b);
  } catch (const std::domain_error&) {
    throw std::domain_error(std::string("tpm_loss: feature '") + b_name + "' has zero norm");
  }
  return mean(matmul(na, transpose(nb)));
}

}  // namespace

TpmLoss tpm_loss(const TripletSample& triplet, const Tensor& t_cls, double delta) {
  if (delta < 0.0) throw std::invalid_argument("tpm_loss: delta must be >= 0");
  Tensor s_cls_orig = mean_frame_cosine(t_cls, triplet.v_h, "t_cls", "v_h");
  Tensor s_cls_masked = mean_frame_cosine(t_cls, triplet.v_h_p, "t_cls", "v_h_p");
  Tensor s_g_orig = mean_frame_cosine(triplet.t_g, triplet.v_h, "t_g", "v_h");
  Tensor s_g_masked_v = mean_frame_cosine(triplet.t_g, triplet.v_h_p, "t_g", "v_h_p");
  Tensor s_g_masked_t = mean_frame_cosine(triplet.t_g_p, triplet.v_h, "t_g_p", "v_h");

  TpmLoss out;
  out.l1 = relu(add_scalar(sub(s_cls_masked, s_cls_orig), delta));
  out.l2 = relu(add_scalar(sub(s_g_masked_v, s_g_orig), delta));
  out.l3 = relu(add_scalar(sub(s_g_masked_t, s_g_orig), delta));
  out.total = add(add(out.l1, out.l2), out.l3);
  return out;
}

TripletOutput generate_triplet(const TextFeatures& text, const VideoFeatures& video,
                               const EncoderParams& params, const EncoderConfig& config,
                               const TpmConfig& tpm) {
  tpm.validate();
  TripletOutput out;
  out.weights.w_text = text_token_weights(text.t_tokens, video.f_cls, text.valid, params);
  out.weights.w_visual = visual_token_weights(video.v_tokens, text.t_cls, params);
  auto b_t = adaptive_mask(out.weights.w_text.values(), tpm.mask_ratio);
  auto b_v = adaptive_mask(out.weights.w_visual.values(), tpm.mask_ratio);
  out.sample = build_triplet(text, video, out.weights, b_t, b_v, params, config);
  return out;
}

}  // namespace hnf
