#pragma once

// Corpus formats and the linguistic statistics feeding textual attention:
// PoS weights, TF-IDF irrelevant-word sets, plus a planted synthetic corpus
// generator for desk-scale verification.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hnf/autodiff.hpp"

namespace hnf {

struct CaptionRecord {
  std::string caption_id;
  std::string video_id;
  std::vector<std::string> tokens;    // length M >= 1
  std::vector<std::string> pos_tags;  // UPOS-style, same length as tokens
};

struct VideoRecord {
  std::string video_id;
  int64_t frame_count = 0;       // N
  int64_t patches_per_frame = 0; // K
  // Patch slot 0 of each frame is the frame-CLS embedding, so
  // frame_embeddings duplicates patch_embeddings rows n*(K+1).
  Tensor frame_embeddings;  // N x D_raw
  Tensor patch_embeddings;  // (N*(K+1)) x D_raw
};

struct Corpus {
  int64_t d_raw = 0;
  std::vector<CaptionRecord> captions;
  std::vector<Tensor> caption_embeddings;  // M_i x D_raw, parallel to captions
  std::vector<VideoRecord> videos;
  std::map<std::string, std::string> pairing;  // caption_id -> video_id
  std::vector<std::pair<std::string, std::string>> planted_hard_negatives;  // (caption_id, video_id)
};

// Tag-from-scratch fallback for corpora that ship tokens without PoS tags.
// Small closed-class lexicon plus suffix heuristics; unknown words are NOUN.
std::vector<std::string> rule_based_pos_tags(const std::vector<std::string>& tokens);

// Weight eta for NOUN/VERB/ADJ tags, 1 otherwise. Unknown tag strings count
// as non-significant (weight 1) and are warned about once per tag.
std::vector<double> compute_pos_weights(const CaptionRecord& record, double eta);

// Corpus-wide idf over one concatenated paragraph per video.
class TfidfIndex {
 public:
  explicit TfidfIndex(const std::vector<CaptionRecord>& captions);
  int64_t paragraph_count() const { return paragraphs_; }
  // idf = log((1 + #paragraphs) / (1 + #paragraphs containing word))
  double idf(const std::string& word) const;

 private:
  std::map<std::string, int64_t> doc_freq_;
  int64_t paragraphs_ = 0;
};

struct FreqWeights {
  std::vector<std::string> irrelevant;           // F, sorted lexicographically
  std::vector<std::vector<double>> w_freq;       // per caption, entries in {0,1}
};

// F = the k lowest tf-idf scoring distinct words of the video's paragraph
// (ties by lexicographic word order); w_freq[m] = 0 iff token m is in F.
// k >= vocabulary size is clamped to vocab-1 with a warning.
FreqWeights compute_freq_weights(const std::vector<CaptionRecord>& captions_of_video,
                                 const TfidfIndex& index, int64_t k);

struct LinguisticStats {
  // Parallel to Corpus::captions.
  std::vector<std::vector<double>> w_pos;
  std::vector<std::vector<double>> w_freq;
  std::map<std::string, std::vector<std::string>> irrelevant_by_video;
};

LinguisticStats compute_linguistic_stats(const Corpus& corpus, double eta, int64_t k);

struct SyntheticSpec {
  int64_t pair_count = 1;
  int64_t concept_dim = 16;  // D_raw
  int64_t concepts_per_pair = 3;
  int64_t patches_per_frame = 2;  // K
  double noise_sigma = 0.0;
  double hard_negative_overlap = 0.0;  // fraction of pairs given a planted hard negative
  uint64_t seed = 0;

  void validate() const;
};

// One caption + one video per pair; token m and frame m share concept m, with
// independent Gaussian noise sigma on every embedding. For ceil(overlap * n)
// pairs (i, j=i+1 mod n), one frame-concept of video j is replaced by caption
// i's first concept, planting a single-frame-match hard negative.
Corpus generate_synthetic(const SyntheticSpec& spec);

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace hnf
