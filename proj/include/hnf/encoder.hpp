#pragma once

// Trainable stand-ins for the text/video backbones: linear projection heads
// into the shared D-dim space plus a single-layer self-attention temporal
// encoder with learned positions producing the aggregated frame features.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hnf/autodiff.hpp"
#include "hnf/corpus.hpp"

namespace hnf {

enum class TemporalSource { kPatch, kFrameCls };

std::string to_string(TemporalSource s);
TemporalSource temporal_source_from_string(const std::string& s);

struct EncoderConfig {
  int64_t d_raw = 16;
  int64_t d = 16;
  int64_t max_text_len = 32;
  int64_t max_frames = 12;
  int64_t patches_per_frame = 2;  // K, fixed per corpus
  TemporalSource temporal_source = TemporalSource::kPatch;
  double logit_scale = 100.0;  // temperature of the contrastive losses; fixed, not learned

  int64_t max_patches() const { return max_frames * (patches_per_frame + 1); }
  void validate() const;
};

struct TextFeatures {
  Tensor t_cls;     // 1 x D
  Tensor t_tokens;  // M x D, invalid rows are zero
  std::vector<std::uint8_t> valid;
};

struct VideoFeatures {
  Tensor f_cls;     // N x D
  Tensor v_tokens;  // P x D, P = N*(K+1)
  Tensor v_h;       // N x D
};

struct EncoderParams {
  Tensor text_proj;   // D_raw x D
  Tensor video_proj;  // D_raw x D
  // temporal encoder
  Tensor wq, wk, wv;  // D x D
  Tensor pos_emb;     // max_frames x D
  // WTI frame gate
  Tensor wti_gate;  // D x 1
  // token weight predictor heads (cross-modal)
  Tensor tw_align;              // max_text_len x max_frames
  Tensor tw_w1, tw_b1;          // 2D x D, 1 x D
  Tensor tw_w2, tw_b2;          // D x 1, 1 x 1
  Tensor vw_align;              // max_patches x 1
  Tensor vw_w1, vw_b1;          // 2D x D, 1 x D
  Tensor vw_w2, vw_b2;          // D x 1, 1 x 1

  // Projections start identity-like so a noiseless planted corpus is already
  // well-ordered; attention value path and positions start at zero so the
  // temporal encoder begins as the identity map.
  static EncoderParams init(const EncoderConfig& config, uint64_t seed);

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;

  // Copy with every tensor registered as a differentiable leaf.
  EncoderParams watched(Tape& tape) const;
};

// Projects raw token embeddings and mean-pools the valid rows into t_cls.
// M beyond config.max_text_len is truncated with a warning.
TextFeatures encode_text(const CaptionRecord& record, const Tensor& raw_tokens,
                         const EncoderParams& params, const EncoderConfig& config);

// Single-layer scaled dot-product self-attention over frames with learned
// positions and a residual connection.
Tensor temporal_encode(const Tensor& input, const EncoderParams& params, const EncoderConfig& config);

// Mean over the K+1 patch slots of each frame.
Tensor frame_aggregate(const Tensor& patch_tokens, int64_t frames, int64_t slots);

VideoFeatures encode_video(const VideoRecord& record, const EncoderParams& params,
                           const EncoderConfig& config);

void save_checkpoint(const std::filesystem::path& dir, const EncoderParams& params,
                     const EncoderConfig& config);
std::pair<EncoderParams, EncoderConfig> load_checkpoint(const std::filesystem::path& dir);

}  // namespace hnf
