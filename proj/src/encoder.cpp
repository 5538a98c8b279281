#include "hnf/encoder.hpp"

#include <cmath>
#include <iostream>
#include <random>
#include <stdexcept>

#include "hnf/bundle.hpp"

namespace hnf {

std::string to_string(TemporalSource s) {
  return s == TemporalSource::kPatch ? "patch" : "fcls";
}

TemporalSource temporal_source_from_string(const std::string& s) {
  if (s == "patch") return TemporalSource::kPatch;
  if (s == "fcls") return TemporalSource::kFrameCls;
  throw std::invalid_argument("temporal_source must be 'patch' or 'fcls', got '" + s + "'");
}

void EncoderConfig::validate() const {
  if (d_raw < 1 || d < 1) throw std::invalid_argument("encoder config: dimensions must be >= 1");
  if (max_text_len < 1) throw std::invalid_argument("encoder config: max_text_len must be >= 1");
  if (max_frames < 1) throw std::invalid_argument("encoder config: max_frames must be >= 1");
  if (patches_per_frame < 1) throw std::invalid_argument("encoder config: patches_per_frame must be >= 1");
  if (!(logit_scale > 0.0)) throw std::invalid_argument("encoder config: logit_scale must be > 0");
}

namespace {

Tensor randn(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> gauss(0.0, stddev);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = gauss(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor identity_like(std::mt19937_64& rng, int64_t rows, int64_t cols, double noise) {
  std::normal_distribution<double> gauss(0.0, noise);
  std::vector<double> v(static_cast<size_t>(rows * cols), 0.0);
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      double x = gauss(rng);
      if (i == j) x += 1.0;
      v[static_cast<size_t>(i * cols + j)] = x;
    }
  }
  return Tensor({rows, cols}, std::move(v));
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& config, uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int64_t d = config.d;
  EncoderParams p;
  p.text_proj = identity_like(rng, config.d_raw, d, 0.02);
  p.video_proj = identity_like(rng, config.d_raw, d, 0.02);
  p.wq = randn(rng, {d, d}, 0.02);
  p.wk = randn(rng, {d, d}, 0.02);
  p.wv = Tensor::zeros({d, d});
  p.pos_emb = Tensor::zeros({config.max_frames, d});
  p.wti_gate = Tensor::zeros({d, 1});
  p.tw_align = randn(rng, {config.max_text_len, config.max_frames}, 1.0 / std::sqrt(static_cast<double>(config.max_frames)));
  p.tw_w1 = randn(rng, {2 * d, d}, 1.0 / std::sqrt(static_cast<double>(2 * d)));
  p.tw_b1 = Tensor::zeros({1, d});
  p.tw_w2 = randn(rng, {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)));
  p.tw_b2 = Tensor::zeros({1, 1});
  p.vw_align = randn(rng, {config.max_patches(), 1}, 1.0);
  p.vw_w1 = randn(rng, {2 * d, d}, 1.0 / std::sqrt(static_cast<double>(2 * d)));
  p.vw_b1 = Tensor::zeros({1, d});
  p.vw_w2 = randn(rng, {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)));
  p.vw_b2 = Tensor::zeros({1, 1});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> EncoderParams::named() {
  return {
      {"text_proj", &text_proj}, {"video_proj", &video_proj}, {"wq", &wq},       {"wk", &wk},
      {"wv", &wv},               {"pos_emb", &pos_emb},       {"wti_gate", &wti_gate},
      {"tw_align", &tw_align},   {"tw_w1", &tw_w1},           {"tw_b1", &tw_b1}, {"tw_w2", &tw_w2},
      {"tw_b2", &tw_b2},         {"vw_align", &vw_align},     {"vw_w1", &vw_w1}, {"vw_b1", &vw_b1},
      {"vw_w2", &vw_w2},         {"vw_b2", &vw_b2},
  };
}

std::vector<std::pair<std::string, const Tensor*>> EncoderParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<EncoderParams*>(this)->named()) out.emplace_back(name, t);
  return out;
}

EncoderParams EncoderParams::watched(Tape& tape) const {
  EncoderParams copy = *this;
  for (auto& [name, t] : copy.named()) {
    (void)name;
    *t = tape.leaf(*t);
  }
  return copy;
}

TextFeatures encode_text(const CaptionRecord& record, const Tensor& raw_tokens,
                         const EncoderParams& params, const EncoderConfig& config) {
  if (raw_tokens.ndim() != 2 || raw_tokens.cols() != config.d_raw) {
    throw std::invalid_argument("encode_text: caption '" + record.caption_id + "' embeddings have shape " +
                                shape_str(raw_tokens.shape()) + ", expected [M, " +
                                std::to_string(config.d_raw) + "]");
  }
  Tensor tokens = raw_tokens;
  int64_t m = tokens.rows();
  if (m > config.max_text_len) {
    std::cerr << "warning: caption '" << record.caption_id << "' has " << m
              << " tokens; truncating to max_text_len=" << config.max_text_len << "\n";
    tokens = slice(tokens, 0, config.max_text_len, 0, config.d_raw);
    m = config.max_text_len;
  }
  TextFeatures out;
  out.valid.assign(static_cast<size_t>(m), 1);
  out.t_tokens = matmul(tokens, params.text_proj);
  // mean pooling over valid rows stands in for [EOS] pooling
  std::vector<double> pool(static_cast<size_t>(m), 1.0 / static_cast<double>(m));
  out.t_cls = matmul(Tensor::row(pool), out.t_tokens);
  return out;
}

Tensor frame_aggregate(const Tensor& patch_tokens, int64_t frames, int64_t slots) {
  if (patch_tokens.rows() != frames * slots) {
    throw std::invalid_argument("frame_aggregate: " + std::to_string(patch_tokens.rows()) +
                                " patch rows do not factor as " + std::to_string(frames) + " frames x " +
                                std::to_string(slots) + " slots");
  }
  std::vector<double> avg(static_cast<size_t>(frames * frames * slots), 0.0);
  for (int64_t f = 0; f < frames; ++f) {
    for (int64_t s = 0; s < slots; ++s) {
      avg[static_cast<size_t>(f * frames * slots + f * slots + s)] = 1.0 / static_cast<double>(slots);
    }
  }
  return matmul(Tensor::matrix(frames, frames * slots, std::move(avg)), patch_tokens);
}

Tensor temporal_encode(const Tensor& input, const EncoderParams& params, const EncoderConfig& config) {
  if (input.ndim() != 2 || input.cols() != config.d) {
    throw std::invalid_argument("temporal_encode: input shape " + shape_str(input.shape()) +
                                ", expected [N, " + std::to_string(config.d) + "]");
  }
  const int64_t n = input.rows();
  if (n == 0) throw std::invalid_argument("temporal_encode: zero frames");
  if (n > config.max_frames) {
    throw std::invalid_argument("temporal_encode: " + std::to_string(n) + " frames exceed max_frames=" +
                                std::to_string(config.max_frames));
  }
  Tensor h = add(input, slice(params.pos_emb, 0, n, 0, config.d));
  Tensor q = matmul(h, params.wq);
  Tensor k = matmul(h, params.wk);
  Tensor v = matmul(h, params.wv);
  Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(config.d)));
  Tensor attn = softmax(scores, 1);
  return add(h, matmul(attn, v));
}

VideoFeatures encode_video(const VideoRecord& record, const EncoderParams& params,
                           const EncoderConfig& config) {
  if (record.frame_count > config.max_frames) {
    throw std::invalid_argument("encode_video: video '" + record.video_id + "' has " +
                                std::to_string(record.frame_count) + " frames, max_frames=" +
                                std::to_string(config.max_frames));
  }
  if (record.patches_per_frame != config.patches_per_frame) {
    throw std::invalid_argument("encode_video: video '" + record.video_id + "' has K=" +
                                std::to_string(record.patches_per_frame) + ", config expects K=" +
                                std::to_string(config.patches_per_frame));
  }
  VideoFeatures out;
  out.f_cls = matmul(record.frame_embeddings, params.video_proj);
  out.v_tokens = matmul(record.patch_embeddings, params.video_proj);
  Tensor source = config.temporal_source == TemporalSource::kPatch
                      ? frame_aggregate(out.v_tokens, record.frame_count, record.patches_per_frame + 1)
                      : out.f_cls;
  out.v_h = temporal_encode(source, params, config);
  return out;
}

void save_checkpoint(const std::filesystem::path& dir, const EncoderParams& params,
                     const EncoderConfig& config) {
  BundleWriter writer;
  writer.set_meta("d_raw", config.d_raw);
  writer.set_meta("d", config.d);
  writer.set_meta("max_text_len", config.max_text_len);
  writer.set_meta("max_frames", config.max_frames);
  writer.set_meta("patches_per_frame", config.patches_per_frame);
  writer.set_meta("temporal_source", to_string(config.temporal_source));
  writer.set_meta("logit_scale", config.logit_scale);
  for (const auto& [name, t] : params.named()) {
    writer.add(name, "param", t->shape(), t->values());
  }
  writer.write(dir);
}

std::pair<EncoderParams, EncoderConfig> load_checkpoint(const std::filesystem::path& dir) {
  BundleReader reader(dir);
  EncoderConfig config;
  const auto& meta = reader.meta();
  config.d_raw = meta.at("d_raw").get<int64_t>();
  config.d = meta.at("d").get<int64_t>();
  config.max_text_len = meta.at("max_text_len").get<int64_t>();
  config.max_frames = meta.at("max_frames").get<int64_t>();
  config.patches_per_frame = meta.at("patches_per_frame").get<int64_t>();
  config.temporal_source = temporal_source_from_string(meta.at("temporal_source").get<std::string>());
  config.logit_scale = meta.at("logit_scale").get<double>();
  config.validate();

  EncoderParams params = EncoderParams::init(config, 0);
  for (auto& [name, t] : params.named()) {
    Tensor loaded = reader.read(name);
    if (loaded.shape() != t->shape()) {
      throw std::runtime_error("checkpoint: param '" + name + "' has shape " + shape_str(loaded.shape()) +
                               ", expected " + shape_str(t->shape()));
    }
    *t = std::move(loaded);
  }
  return {std::move(params), config};
}

}  // namespace hnf
