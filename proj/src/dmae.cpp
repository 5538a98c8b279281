#include "hnf/dmae.hpp"

#include <cmath>
#include <stdexcept>

namespace hnf {

std::string to_string(Reduction r) { return r == Reduction::kTI ? "ti" : "wti"; }

Reduction reduction_from_string(const std::string& s) {
  if (s == "ti") return Reduction::kTI;
  if (s == "wti") return Reduction::kWTI;
  throw std::invalid_argument("reduction must be 'ti' or 'wti', got '" + s + "'");
}

void DmaeConfig::validate() const {
  if (eta < 1.0) throw std::invalid_argument("dmae config: eta must be >= 1");
  if (top_k < 1) throw std::invalid_argument("dmae config: top_k must be >= 1");
  if (irrelevant_k < 0) throw std::invalid_argument("dmae config: irrelevant_k must be >= 0");
}

Tensor textual_attention(const std::vector<double>& w_pos, const std::vector<double>& w_freq,
                         const std::vector<std::uint8_t>& valid) {
  if (w_pos.size() != w_freq.size() || w_pos.size() != valid.size()) {
    throw std::invalid_argument("textual_attention: length mismatch: w_pos " + std::to_string(w_pos.size()) +
                                ", w_freq " + std::to_string(w_freq.size()) + ", valid " +
                                std::to_string(valid.size()));
  }
  std::vector<double> product(w_pos.size());
  for (size_t i = 0; i < w_pos.size(); ++i) product[i] = w_pos[i] * w_freq[i];
  return masked_softmax(Tensor::row(std::move(product)), valid);
}

Tensor frame_cosine_matrix(const Tensor& v_h) {
  for (int64_t i = 0; i < v_h.rows(); ++i) {
    double norm = 0.0;
    for (int64_t j = 0; j < v_h.cols(); ++j) norm += v_h.at(i, j) * v_h.at(i, j);
    if (norm == 0.0) {
      throw std::domain_error("visual_attention: frame " + std::to_string(i) + " has zero norm");
    }
  }
  Tensor n = l2_normalize_rows(v_h);
  return matmul(n, transpose(n));
}

Tensor visual_attention(const Tensor& v_h, int64_t top_k) {
  return topk_per_column(frame_cosine_matrix(v_h), top_k);
}

Tensor visual_attention_with_pattern(const Tensor& v_h, const std::vector<std::uint8_t>& pattern) {
  Tensor s = frame_cosine_matrix(v_h);
  if (static_cast<int64_t>(pattern.size()) != s.size()) {
    throw std::invalid_argument("visual_attention_with_pattern: pattern has " + std::to_string(pattern.size()) +
                                " entries for an " + shape_str(s.shape()) + " matrix");
  }
  const int64_t n = s.rows();
  std::vector<double> mask(pattern.begin(), pattern.end());
  return mul(s, Tensor::matrix(n, n, std::move(mask)));
}

namespace {

AttentionBundle enhanced_prenormalized(const Tensor& nt_tokens, const Tensor& nt_cls, const Tensor& nv_h_t,
                                       const Tensor& w_ta, const Tensor& w_va) {
  AttentionBundle out;
  out.w_ta = w_ta;
  out.w_va = w_va;
  out.s_tokens = matmul(nt_tokens, nv_h_t);
  out.s_cls = matmul(nt_cls, nv_h_t);
  Tensor token_part = matmul(matmul(w_ta, out.s_tokens), w_va);
  Tensor cls_part = matmul(out.s_cls, w_va);
  out.s_prime = mul_scalar(add(token_part, cls_part), 0.5);
  return out;
}

Tensor reduce_prenormalized(const Tensor& s_prime, const Tensor& wti_weights, Reduction reduction) {
  if (reduction == Reduction::kTI) return mean(s_prime);
  return matmul(s_prime, transpose(wti_weights));
}

Tensor wti_frame_weights(const Tensor& v_h, const EncoderParams& params) {
  return softmax(transpose(matmul(v_h, params.wti_gate)), 1);
}

Tensor neutral_w_ta(const std::vector<std::uint8_t>& valid) {
  std::vector<double> ones(valid.size(), 1.0);
  return masked_softmax(Tensor::row(std::move(ones)), valid);
}

Tensor neutral_w_va(int64_t n) {
  std::vector<double> eye(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * n + i)] = 1.0;
  return Tensor::matrix(n, n, std::move(eye));
}

}  // namespace

AttentionBundle enhanced_similarity(const TextFeatures& text, const Tensor& v_h, const Tensor& w_ta,
                                    const Tensor& w_va) {
  if (w_ta.cols() != text.t_tokens.rows()) {
    throw std::invalid_argument("enhanced_similarity: W_TA shape " + shape_str(w_ta.shape()) +
                                " does not match " + std::to_string(text.t_tokens.rows()) + " tokens");
  }
  if (w_va.rows() != v_h.rows() || w_va.cols() != v_h.rows()) {
    throw std::invalid_argument("enhanced_similarity: W_VA shape " + shape_str(w_va.shape()) +
                                " does not match " + std::to_string(v_h.rows()) + " frames");
  }
  Tensor nt_tokens = l2_normalize_rows(text.t_tokens, text.valid);
  Tensor nt_cls = l2_normalize_rows(text.t_cls);
  Tensor nv_h_t = transpose(l2_normalize_rows(v_h));
  return enhanced_prenormalized(nt_tokens, nt_cls, nv_h_t, w_ta, w_va);
}

Tensor reduce_similarity(const Tensor& s_prime, const Tensor& v_h, Reduction reduction,
                         const EncoderParams& params) {
  if (s_prime.rows() != 1 || s_prime.cols() != v_h.rows()) {
    throw std::invalid_argument("reduce_similarity: S' shape " + shape_str(s_prime.shape()) +
                                " does not match " + std::to_string(v_h.rows()) + " frames");
  }
  if (reduction == Reduction::kTI) return mean(s_prime);
  return reduce_prenormalized(s_prime, wti_frame_weights(v_h, params), reduction);
}

SimilarityBundle batch_similarity(const std::vector<TextFeatures>& texts,
                                  const std::vector<TextAttention>& attentions,
                                  const std::vector<VideoFeatures>& videos, const DmaeConfig& config,
                                  const EncoderParams& params, bool keep_pairs) {
  config.validate();
  const int64_t b = static_cast<int64_t>(texts.size());
  if (b == 0 || videos.size() != texts.size() || attentions.size() != texts.size()) {
    throw std::invalid_argument("batch_similarity: expected equal nonzero counts of texts (" +
                                std::to_string(texts.size()) + "), attentions (" +
                                std::to_string(attentions.size()) + ") and videos (" +
                                std::to_string(videos.size()) + ")");
  }

  std::vector<Tensor> w_ta(texts.size());
  std::vector<Tensor> nt_tokens(texts.size());
  std::vector<Tensor> nt_cls(texts.size());
  for (size_t i = 0; i < texts.size(); ++i) {
    w_ta[i] = config.enabled ? textual_attention(attentions[i].w_pos, attentions[i].w_freq, texts[i].valid)
                             : neutral_w_ta(texts[i].valid);
    nt_tokens[i] = l2_normalize_rows(texts[i].t_tokens, texts[i].valid);
    nt_cls[i] = l2_normalize_rows(texts[i].t_cls);
  }

  std::vector<Tensor> w_va(videos.size());
  std::vector<Tensor> nv_h_t(videos.size());
  std::vector<Tensor> wti_weights(videos.size());
  for (size_t j = 0; j < videos.size(); ++j) {
    w_va[j] = config.enabled ? visual_attention(videos[j].v_h, config.top_k)
                             : neutral_w_va(videos[j].v_h.rows());
    nv_h_t[j] = transpose(l2_normalize_rows(videos[j].v_h));
    if (config.reduction == Reduction::kWTI) {
      wti_weights[j] = wti_frame_weights(videos[j].v_h, params);
    }
  }

  SimilarityBundle bundle;
  bundle.w_ta = w_ta;
  bundle.w_va = w_va;
  std::vector<Tensor> cells;
  cells.reserve(static_cast<size_t>(b * b));
  if (keep_pairs) bundle.pairs.reserve(static_cast<size_t>(b * b));
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t j = 0; j < b; ++j) {
      AttentionBundle pair = enhanced_prenormalized(nt_tokens[static_cast<size_t>(i)],
                                                    nt_cls[static_cast<size_t>(i)],
                                                    nv_h_t[static_cast<size_t>(j)],
                                                    w_ta[static_cast<size_t>(i)], w_va[static_cast<size_t>(j)]);
      Tensor sim = config.reduction == Reduction::kTI
                       ? mean(pair.s_prime)
                       : reduce_prenormalized(pair.s_prime, wti_weights[static_cast<size_t>(j)], config.reduction);
      cells.push_back(std::move(sim));
      if (keep_pairs) bundle.pairs.push_back(std::move(pair));
    }
  }
  bundle.scores = stack_scalars(b, b, cells);
  return bundle;
}

}  // namespace hnf
