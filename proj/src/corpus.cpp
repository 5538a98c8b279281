#include "hnf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "hnf/bundle.hpp"

namespace hnf {

namespace {

const std::set<std::string>& known_tags() {
  static const std::set<std::string> tags{"ADJ",  "ADP",  "ADV",  "AUX",  "CCONJ", "DET",  "INTJ",
                                          "NOUN", "NUM",  "PART", "PRON", "PROPN", "PUNCT", "SCONJ",
                                          "SYM",  "VERB", "X"};
  return tags;
}

bool is_significant_tag(const std::string& tag) { return tag == "NOUN" || tag == "VERB" || tag == "ADJ"; }

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<std::string> rule_based_pos_tags(const std::vector<std::string>& tokens) {
  static const std::map<std::string, std::string> lexicon = {
      {"the", "DET"}, {"a", "DET"},    {"an", "DET"},   {"this", "DET"}, {"that", "DET"},
      {"of", "ADP"},  {"in", "ADP"},   {"on", "ADP"},   {"at", "ADP"},   {"to", "ADP"},
      {"with", "ADP"}, {"from", "ADP"}, {"by", "ADP"},  {"and", "CCONJ"}, {"or", "CCONJ"},
      {"but", "CCONJ"}, {"is", "AUX"}, {"are", "AUX"},  {"was", "AUX"},  {"were", "AUX"},
      {"be", "AUX"},  {"he", "PRON"},  {"she", "PRON"}, {"it", "PRON"},  {"they", "PRON"},
      {"her", "PRON"}, {"his", "PRON"}, {"as", "SCONJ"}, {"while", "SCONJ"}, {"not", "PART"}};
  std::vector<std::string> tags;
  tags.reserve(tokens.size());
  for (const auto& raw : tokens) {
    const std::string w = lower(raw);
    auto it = lexicon.find(w);
    if (it != lexicon.end()) {
      tags.push_back(it->second);
    } else if (ends_with(w, "ly")) {
      tags.push_back("ADV");
    } else if (ends_with(w, "ing") || ends_with(w, "ed")) {
      tags.push_back("VERB");
    } else if (ends_with(w, "ous") || ends_with(w, "ful") || ends_with(w, "ive") || ends_with(w, "al") ||
               ends_with(w, "ish")) {
      tags.push_back("ADJ");
    } else if (!w.empty() && std::isdigit(static_cast<unsigned char>(w[0]))) {
      tags.push_back("NUM");
    } else {
      tags.push_back("NOUN");
    }
  }
  return tags;
}

std::vector<double> compute_pos_weights(const CaptionRecord& record, double eta) {
  if (eta < 1.0) throw std::invalid_argument("compute_pos_weights: eta must be >= 1");
  if (record.pos_tags.size() != record.tokens.size()) {
    throw std::invalid_argument("compute_pos_weights: caption '" + record.caption_id + "' has " +
                                std::to_string(record.pos_tags.size()) + " tags for " +
                                std::to_string(record.tokens.size()) + " tokens");
  }
  std::vector<double> w;
  w.reserve(record.pos_tags.size());
  for (const auto& tag : record.pos_tags) {
    if (!known_tags().count(tag)) {
      std::cerr << "warning: unknown PoS tag '" << tag << "' in caption '" << record.caption_id
                << "' treated as non-significant\n";
    }
    w.push_back(is_significant_tag(tag) ? eta : 1.0);
  }
  return w;
}

TfidfIndex::TfidfIndex(const std::vector<CaptionRecord>& captions) {
  std::map<std::string, std::set<std::string>> vocab_by_video;
  for (const auto& cap : captions) {
    auto& vocab = vocab_by_video[cap.video_id];
    for (const auto& tok : cap.tokens) vocab.insert(tok);
  }
  paragraphs_ = static_cast<int64_t>(vocab_by_video.size());
  for (const auto& [vid, vocab] : vocab_by_video) {
    (void)vid;
    for (const auto& word : vocab) doc_freq_[word] += 1;
  }
}

double TfidfIndex::idf(const std::string& word) const {
  auto it = doc_freq_.find(word);
  const int64_t df = it == doc_freq_.end() ? 0 : it->second;
  return std::log(static_cast<double>(1 + paragraphs_) / static_cast<double>(1 + df));
}

FreqWeights compute_freq_weights(const std::vector<CaptionRecord>& captions_of_video,
                                 const TfidfIndex& index, int64_t k) {
  if (captions_of_video.empty()) {
    throw std::invalid_argument("compute_freq_weights: video has no captions");
  }
  if (k < 0) throw std::invalid_argument("compute_freq_weights: k must be >= 0");

  // Paragraph T = all captions of the video concatenated.
  std::map<std::string, int64_t> tf;
  for (const auto& cap : captions_of_video) {
    for (const auto& tok : cap.tokens) tf[tok] += 1;
  }
  const int64_t vocab = static_cast<int64_t>(tf.size());
  int64_t kk = k;
  if (kk >= vocab) {
    kk = vocab - 1;
    std::cerr << "warning: irrelevant-set size k=" << k << " >= paragraph vocabulary " << vocab
              << " for video '" << captions_of_video.front().video_id << "'; clamping to " << kk << "\n";
  }

  std::vector<std::pair<double, std::string>> scored;
  scored.reserve(tf.size());
  for (const auto& [word, count] : tf) {
    scored.emplace_back(static_cast<double>(count) * index.idf(word), word);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;  // lexicographic tie-break
  });

  FreqWeights out;
  std::set<std::string> irrelevant;
  for (int64_t i = 0; i < kk; ++i) irrelevant.insert(scored[static_cast<size_t>(i)].second);
  out.irrelevant.assign(irrelevant.begin(), irrelevant.end());

  for (const auto& cap : captions_of_video) {
    std::vector<double> w;
    w.reserve(cap.tokens.size());
    for (const auto& tok : cap.tokens) w.push_back(irrelevant.count(tok) ? 0.0 : 1.0);
    out.w_freq.push_back(std::move(w));
  }
  return out;
}

LinguisticStats compute_linguistic_stats(const Corpus& corpus, double eta, int64_t k) {
  LinguisticStats stats;
  stats.w_pos.resize(corpus.captions.size());
  stats.w_freq.resize(corpus.captions.size());

  TfidfIndex index(corpus.captions);

  std::map<std::string, std::vector<size_t>> caption_idx_by_video;
  for (size_t i = 0; i < corpus.captions.size(); ++i) {
    caption_idx_by_video[corpus.captions[i].video_id].push_back(i);
  }
  for (const auto& [vid, idxs] : caption_idx_by_video) {
    std::vector<CaptionRecord> caps;
    caps.reserve(idxs.size());
    for (size_t i : idxs) caps.push_back(corpus.captions[i]);
    FreqWeights fw = compute_freq_weights(caps, index, k);
    stats.irrelevant_by_video[vid] = fw.irrelevant;
    for (size_t j = 0; j < idxs.size(); ++j) stats.w_freq[idxs[j]] = std::move(fw.w_freq[j]);
  }
  for (size_t i = 0; i < corpus.captions.size(); ++i) {
    stats.w_pos[i] = compute_pos_weights(corpus.captions[i], eta);
  }
  return stats;
}

void SyntheticSpec::validate() const {
  if (pair_count < 1) throw std::invalid_argument("synthetic spec: pair_count must be >= 1");
  if (concept_dim < 1) throw std::invalid_argument("synthetic spec: concept_dim must be >= 1");
  if (concepts_per_pair < 1) throw std::invalid_argument("synthetic spec: concepts_per_pair must be >= 1");
  if (patches_per_frame < 1) throw std::invalid_argument("synthetic spec: patches_per_frame must be >= 1");
  if (noise_sigma < 0.0) throw std::invalid_argument("synthetic spec: noise_sigma must be >= 0");
  if (hard_negative_overlap < 0.0 || hard_negative_overlap > 1.0) {
    throw std::invalid_argument("synthetic spec: hard_negative_overlap must be in [0, 1]");
  }
  if (concepts_per_pair > concept_dim) {
    throw std::invalid_argument("synthetic spec: concepts_per_pair " + std::to_string(concepts_per_pair) +
                                " exceeds concept_dim " + std::to_string(concept_dim) +
                                "; concepts could not be near-orthogonal");
  }
}

namespace {

std::vector<double> unit_vector(std::mt19937_64& rng, int64_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(static_cast<size_t>(dim));
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = gauss(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Random unit vector orthogonal to everything in `basis` (Gram-Schmidt).
std::vector<double> orthogonal_unit_vector(std::mt19937_64& rng, int64_t dim,
                                           const std::vector<std::vector<double>>& basis) {
  while (true) {
    auto v = unit_vector(rng, dim);
    for (const auto& b : basis) {
      double dot = 0.0;
      for (size_t x = 0; x < v.size(); ++x) dot += v[x] * b[x];
      for (size_t x = 0; x < v.size(); ++x) v[x] -= dot * b[x];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 1e-8) {
      for (auto& x : v) x /= norm;
      return v;
    }
  }
}

std::vector<double> noisy_copy(std::mt19937_64& rng, const std::vector<double>& base, double sigma) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(base.size());
  for (size_t i = 0; i < base.size(); ++i) v[i] = base[i] + sigma * gauss(rng);
  return v;
}

const char* kPosCycle[] = {"NOUN", "VERB", "ADJ", "DET", "ADV"};

}  // namespace

Corpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  const int64_t n = spec.pair_count;
  const int64_t c = spec.concepts_per_pair;
  const int64_t d = spec.concept_dim;
  const int64_t k = spec.patches_per_frame;

  // Concept vectors per pair; concept identity drives token text so shared
  // concepts yield shared words. When all concepts fit in the dimension they
  // are drawn mutually orthogonal, which makes the planted geometry exact
  // (a non-shared concept contributes zero cosine at sigma = 0).
  const bool orthogonalize = n * c <= d;
  std::vector<std::vector<double>> drawn;
  std::vector<std::vector<std::vector<double>>> concepts(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    concepts[static_cast<size_t>(i)].reserve(static_cast<size_t>(c));
    for (int64_t m = 0; m < c; ++m) {
      auto v = orthogonalize ? orthogonal_unit_vector(rng, d, drawn) : unit_vector(rng, d);
      if (orthogonalize) drawn.push_back(v);
      concepts[static_cast<size_t>(i)].push_back(std::move(v));
    }
  }
  // concept id (i, m) -> global index i*c + m for naming
  std::vector<std::vector<int64_t>> caption_concept_ids(static_cast<size_t>(n));
  std::vector<std::vector<int64_t>> video_concept_ids(static_cast<size_t>(n));
  std::vector<std::vector<std::vector<double>>> video_concepts = concepts;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t m = 0; m < c; ++m) {
      caption_concept_ids[static_cast<size_t>(i)].push_back(i * c + m);
      video_concept_ids[static_cast<size_t>(i)].push_back(i * c + m);
    }
  }

  // Plant hard negatives: caption i shares its first concept with one frame
  // of video j = (i+1) mod n (the last concept slot of j is replaced).
  Corpus corpus;
  const int64_t hard = static_cast<int64_t>(std::ceil(spec.hard_negative_overlap * static_cast<double>(n)));
  for (int64_t h = 0; h < hard && n > 1; ++h) {
    const int64_t i = h;
    const int64_t j = (h + 1) % n;
    video_concepts[static_cast<size_t>(j)][static_cast<size_t>(c - 1)] = concepts[static_cast<size_t>(i)][0];
    video_concept_ids[static_cast<size_t>(j)][static_cast<size_t>(c - 1)] = i * c;
    corpus.planted_hard_negatives.emplace_back("cap" + std::to_string(i), "vid" + std::to_string(j));
  }

  corpus.d_raw = d;
  for (int64_t i = 0; i < n; ++i) {
    const std::string cap_id = "cap" + std::to_string(i);
    const std::string vid_id = "vid" + std::to_string(i);

    CaptionRecord cap;
    cap.caption_id = cap_id;
    cap.video_id = vid_id;
    std::vector<double> tok_data;
    tok_data.reserve(static_cast<size_t>(c * d));
    for (int64_t m = 0; m < c; ++m) {
      const int64_t cid = caption_concept_ids[static_cast<size_t>(i)][static_cast<size_t>(m)];
      cap.tokens.push_back("c" + std::to_string(cid));
      cap.pos_tags.push_back(kPosCycle[cid % 5]);
      auto row = noisy_copy(rng, concepts[static_cast<size_t>(i)][static_cast<size_t>(m)], spec.noise_sigma);
      tok_data.insert(tok_data.end(), row.begin(), row.end());
    }
    corpus.captions.push_back(std::move(cap));
    corpus.caption_embeddings.emplace_back(Shape{c, d}, std::move(tok_data));

    VideoRecord vid;
    vid.video_id = vid_id;
    vid.frame_count = c;  // one frame per concept
    vid.patches_per_frame = k;
    std::vector<double> frame_data;
    std::vector<double> patch_data;
    frame_data.reserve(static_cast<size_t>(c * d));
    patch_data.reserve(static_cast<size_t>(c * (k + 1) * d));
    for (int64_t m = 0; m < c; ++m) {
      const auto& base = video_concepts[static_cast<size_t>(i)][static_cast<size_t>(m)];
      auto frame = noisy_copy(rng, base, spec.noise_sigma);
      frame_data.insert(frame_data.end(), frame.begin(), frame.end());
      // patch slot 0 = frame-CLS
      patch_data.insert(patch_data.end(), frame.begin(), frame.end());
      for (int64_t p = 0; p < k; ++p) {
        auto patch = noisy_copy(rng, base, spec.noise_sigma);
        patch_data.insert(patch_data.end(), patch.begin(), patch.end());
      }
    }
    vid.frame_embeddings = Tensor(Shape{c, d}, std::move(frame_data));
    vid.patch_embeddings = Tensor(Shape{c * (k + 1), d}, std::move(patch_data));
    corpus.videos.push_back(std::move(vid));
    corpus.pairing[cap_id] = vid_id;
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  BundleWriter writer;
  writer.set_meta("D_raw", corpus.d_raw);
  for (size_t i = 0; i < corpus.captions.size(); ++i) {
    const auto& cap = corpus.captions[i];
    const auto& emb = corpus.caption_embeddings[i];
    writer.add(cap.caption_id, "caption", emb.shape(), emb.values(),
               {{"M", static_cast<int64_t>(cap.tokens.size())}});
  }
  for (const auto& vid : corpus.videos) {
    writer.add(vid.video_id, "video",
               Shape{vid.frame_count, vid.patches_per_frame + 1, corpus.d_raw},
               vid.patch_embeddings.values(), {{"N", vid.frame_count}, {"K", vid.patches_per_frame}});
  }
  writer.write(dir);

  std::ofstream cf(dir / "captions.jsonl");
  if (!cf) throw std::runtime_error("write_corpus: cannot write captions.jsonl");
  for (const auto& cap : corpus.captions) {
    nlohmann::json j;
    j["caption_id"] = cap.caption_id;
    j["video_id"] = cap.video_id;
    j["tokens"] = cap.tokens;
    j["pos_tags"] = cap.pos_tags;
    cf << j.dump() << "\n";
  }

  std::ofstream pf(dir / "pairing.json");
  if (!pf) throw std::runtime_error("write_corpus: cannot write pairing.json");
  pf << nlohmann::json(corpus.pairing).dump(2) << "\n";

  if (!corpus.planted_hard_negatives.empty()) {
    nlohmann::json hj = nlohmann::json::array();
    for (const auto& [cid, vid] : corpus.planted_hard_negatives) hj.push_back({cid, vid});
    std::ofstream hf(dir / "hard_negatives.json");
    hf << hj.dump(2) << "\n";
  }
}

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  BundleReader reader(dir);
  if (!reader.meta().contains("D_raw")) throw std::runtime_error("read_corpus: manifest missing D_raw");
  corpus.d_raw = reader.meta().at("D_raw").get<int64_t>();

  std::ifstream cf(dir / "captions.jsonl");
  if (!cf) throw std::runtime_error("read_corpus: missing captions.jsonl in " + dir.string());
  std::string line;
  size_t line_no = 0;
  while (std::getline(cf, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("read_corpus: captions.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    CaptionRecord cap;
    cap.caption_id = j.at("caption_id").get<std::string>();
    cap.video_id = j.at("video_id").get<std::string>();
    cap.tokens = j.at("tokens").get<std::vector<std::string>>();
    if (cap.tokens.empty()) {
      throw std::runtime_error("read_corpus: caption '" + cap.caption_id + "' has no tokens");
    }
    if (j.contains("pos_tags") && !j.at("pos_tags").empty()) {
      cap.pos_tags = j.at("pos_tags").get<std::vector<std::string>>();
      if (cap.pos_tags.size() != cap.tokens.size()) {
        throw std::runtime_error("read_corpus: caption '" + cap.caption_id + "' has " +
                                 std::to_string(cap.pos_tags.size()) + " tags for " +
                                 std::to_string(cap.tokens.size()) + " tokens");
      }
    } else {
      cap.pos_tags = rule_based_pos_tags(cap.tokens);
    }
    corpus.captions.push_back(std::move(cap));
  }

  for (const auto& cap : corpus.captions) {
    const BundleRecord& rec = reader.record(cap.caption_id);
    if (rec.role != "caption") throw std::runtime_error("read_corpus: record '" + cap.caption_id + "' is not a caption");
    if (rec.shape.size() != 2 || rec.shape[0] != static_cast<int64_t>(cap.tokens.size()) ||
        rec.shape[1] != corpus.d_raw) {
      throw std::runtime_error("read_corpus: caption tensor '" + cap.caption_id + "' has shape " +
                               shape_str(rec.shape) + ", expected [" + std::to_string(cap.tokens.size()) + ", " +
                               std::to_string(corpus.d_raw) + "]");
    }
    corpus.caption_embeddings.push_back(reader.read(cap.caption_id));
  }

  for (const auto& rec : reader.records()) {
    if (rec.role != "video") continue;
    if (rec.shape.size() != 3 || rec.shape[2] != corpus.d_raw) {
      throw std::runtime_error("read_corpus: video tensor '" + rec.id + "' has shape " + shape_str(rec.shape) +
                               ", expected [N, K+1, " + std::to_string(corpus.d_raw) + "]");
    }
    VideoRecord vid;
    vid.video_id = rec.id;
    vid.frame_count = rec.shape[0];
    vid.patches_per_frame = rec.shape[1] - 1;
    if (vid.frame_count < 1) throw std::runtime_error("read_corpus: video '" + rec.id + "' has no frames");
    Tensor patches3d = reader.read(rec.id);
    const int64_t slots = vid.patches_per_frame + 1;
    Tensor patches(Shape{vid.frame_count * slots, corpus.d_raw}, patches3d.values());
    std::vector<double> frames(static_cast<size_t>(vid.frame_count * corpus.d_raw));
    for (int64_t f = 0; f < vid.frame_count; ++f) {
      for (int64_t x = 0; x < corpus.d_raw; ++x) {
        frames[static_cast<size_t>(f * corpus.d_raw + x)] = patches.at(f * slots, x);
      }
    }
    vid.frame_embeddings = Tensor(Shape{vid.frame_count, corpus.d_raw}, std::move(frames));
    vid.patch_embeddings = std::move(patches);
    corpus.videos.push_back(std::move(vid));
  }

  std::ifstream pf(dir / "pairing.json");
  if (!pf) throw std::runtime_error("read_corpus: missing pairing.json in " + dir.string());
  nlohmann::json pj;
  pf >> pj;
  corpus.pairing = pj.get<std::map<std::string, std::string>>();

  if (std::filesystem::exists(dir / "hard_negatives.json")) {
    std::ifstream hf(dir / "hard_negatives.json");
    nlohmann::json hj;
    hf >> hj;
    for (const auto& pair : hj) {
      corpus.planted_hard_negatives.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
    }
  }
  return corpus;
}

}  // namespace hnf
