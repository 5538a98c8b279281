#pragma once

// Dual-modal attention enhancement: PoS/TF-IDF textual attention, top-k
// self-frame visual attention, the attention-enhanced similarity chain, and
// the TI/WTI reductions producing scalar pair similarities.

#include <cstdint>
#include <string>
#include <vector>

#include "hnf/autodiff.hpp"
#include "hnf/encoder.hpp"

namespace hnf {

enum class Reduction { kTI, kWTI };

std::string to_string(Reduction r);
Reduction reduction_from_string(const std::string& s);

struct DmaeConfig {
  bool enabled = true;
  double eta = 2.0;
  int64_t top_k = 2;
  int64_t irrelevant_k = 5;
  Reduction reduction = Reduction::kTI;

  void validate() const;
};

struct AttentionBundle {
  Tensor w_ta;       // 1 x M
  Tensor w_va;       // N x N
  Tensor s_tokens;   // M x N cosine(t_tokens, v_h)
  Tensor s_cls;      // 1 x N cosine(t_cls, v_h)
  Tensor s_prime;    // 1 x N
};

// Per-text linguistic inputs for W_TA (from corpus-io).
struct TextAttention {
  std::vector<double> w_pos;
  std::vector<double> w_freq;
};

// Softmax over the valid positions of w_pos o w_freq; padded positions get 0.
Tensor textual_attention(const std::vector<double>& w_pos, const std::vector<double>& w_freq,
                         const std::vector<std::uint8_t>& valid);

// Cosine self-similarity of the frame rows (rows L2-normalized first).
Tensor frame_cosine_matrix(const Tensor& v_h);

// Keeps the top_k largest entries per column of the self-frame cosine matrix,
// erases the rest. Ties break toward the lower row index, which keeps the
// unit diagonal.
Tensor visual_attention(const Tensor& v_h, int64_t top_k);

// Same values as visual_attention but with the retention pattern supplied
// explicitly (row-major N x N, nonzero = keep). Used to hold the selection
// fixed across perturbations, e.g. in finite-difference checks.
Tensor visual_attention_with_pattern(const Tensor& v_h, const std::vector<std::uint8_t>& pattern);

// S'(t_tokens) = W_TA . S(t_tokens, v_h) . W_VA, S'(t_cls) = S(t_cls, v_h) . W_VA,
// S' = (S'(t_tokens) + S'(t_cls)) / 2. Features are L2-normalized right
// before each cosine; gradients flow end to end except through the top-k
// selection pattern.
AttentionBundle enhanced_similarity(const TextFeatures& text, const Tensor& v_h, const Tensor& w_ta,
                                    const Tensor& w_va);

// TI: mean over the N frame entries. WTI: softmax-weighted sum, weights from
// the learned linear gate on v_h rows (zero gate makes WTI equal TI).
Tensor reduce_similarity(const Tensor& s_prime, const Tensor& v_h, Reduction reduction,
                         const EncoderParams& params);

struct SimilarityBundle {
  Tensor scores;                       // B x B, entry (i, j) = sim(text i, video j)
  std::vector<Tensor> w_ta;            // per text
  std::vector<Tensor> w_va;            // per video
  std::vector<AttentionBundle> pairs;  // row-major i*B+j, filled when keep_pairs
};

// Entry (i, j) reduces the enhanced similarity of text i against video j.
// With config.enabled == false the attentions are neutral: uniform W_TA over
// valid tokens and identity W_VA.
SimilarityBundle batch_similarity(const std::vector<TextFeatures>& texts,
                                  const std::vector<TextAttention>& attentions,
                                  const std::vector<VideoFeatures>& videos, const DmaeConfig& config,
                                  const EncoderParams& params, bool keep_pairs = false);

}  // namespace hnf
