#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hnf/dmae.hpp"
#include "support/gradcheck.hpp"

using namespace hnf;
using hnf::testing::max_grad_rel_err;
using hnf::testing::random_tensor;

namespace {

TextFeatures make_text(std::mt19937_64& rng, int64_t m, int64_t d) {
  TextFeatures t;
  t.t_tokens = random_tensor(rng, {m, d});
  std::vector<double> pool(static_cast<size_t>(m), 1.0 / static_cast<double>(m));
  t.t_cls = matmul(Tensor::row(pool), t.t_tokens);
  t.valid.assign(static_cast<size_t>(m), 1);
  return t;
}

VideoFeatures make_video(std::mt19937_64& rng, int64_t n, int64_t d, int64_t k = 2) {
  VideoFeatures v;
  v.f_cls = random_tensor(rng, {n, d});
  v.v_tokens = random_tensor(rng, {n * (k + 1), d});
  v.v_h = random_tensor(rng, {n, d});
  return v;
}

TextAttention uniform_attention(int64_t m) {
  TextAttention a;
  a.w_pos.assign(static_cast<size_t>(m), 1.0);
  a.w_freq.assign(static_cast<size_t>(m), 1.0);
  return a;
}

}  // namespace

TEST_CASE("textual attention values") {
  std::vector<std::uint8_t> valid{1, 1, 1};
  SUBCASE("significant tags boosted") {
    Tensor w = textual_attention({1, 2, 2}, {1, 1, 1}, valid);
    CHECK(w.flat(0) == doctest::Approx(0.1554).epsilon(1e-3));
    CHECK(w.flat(1) == doctest::Approx(0.4223).epsilon(1e-3));
    CHECK(w.flat(2) == doctest::Approx(0.4223).epsilon(1e-3));
  }
  SUBCASE("irrelevant word still gets positive mass") {
    Tensor w = textual_attention({1, 2, 2}, {0, 1, 1}, valid);
    CHECK(w.flat(0) == doctest::Approx(0.0634).epsilon(1e-3));
    CHECK(w.flat(1) == doctest::Approx(0.4683).epsilon(1e-3));
    CHECK(w.flat(2) == doctest::Approx(0.4683).epsilon(1e-3));
    CHECK(w.flat(0) > 0.0);
  }
  SUBCASE("equal products give uniform weights") {
    Tensor w = textual_attention({2, 2, 2}, {1, 1, 1}, valid);
    for (int64_t i = 0; i < 3; ++i) CHECK(w.flat(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  }
  SUBCASE("padded positions get zero and the rest renormalizes") {
    Tensor w = textual_attention({1, 2, 2}, {1, 1, 1}, {1, 1, 0});
    CHECK(w.flat(2) == 0.0);
    CHECK(w.flat(0) + w.flat(1) == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("all padded is an error") {
    CHECK_THROWS_AS(textual_attention({1, 1}, {1, 1}, {0, 0}), std::invalid_argument);
  }
  SUBCASE("sums to one and argmax follows the product") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> pos(5), freq(5);
      for (auto& v : pos) v = u(rng);
      for (auto& v : freq) v = u(rng);
      Tensor w = textual_attention(pos, freq, std::vector<std::uint8_t>(5, 1));
      double s = 0.0;
      int64_t argmax_w = 0, argmax_p = 0;
      for (int64_t i = 0; i < 5; ++i) {
        s += w.flat(i);
        if (w.flat(i) > w.flat(argmax_w)) argmax_w = i;
        if (pos[static_cast<size_t>(i)] * freq[static_cast<size_t>(i)] >
            pos[static_cast<size_t>(argmax_p)] * freq[static_cast<size_t>(argmax_p)])
          argmax_p = i;
      }
      CHECK(std::fabs(s - 1.0) < 1e-12);
      CHECK(argmax_w == argmax_p);
    }
  }
}

TEST_CASE("visual attention") {
  std::mt19937_64 rng(5);
  SUBCASE("per-column count, diagonal retention, cosine values") {
    for (int trial = 0; trial < 50; ++trial) {
      int64_t n = 1 + static_cast<int64_t>(rng() % 6);
      Tensor v_h = random_tensor(rng, {n, 8});
      Tensor w = visual_attention(v_h, 2);
      Tensor cosines = frame_cosine_matrix(v_h);
      for (int64_t j = 0; j < n; ++j) {
        int64_t nonzeros = 0;
        for (int64_t i = 0; i < n; ++i) {
          if (w.at(i, j) != 0.0) {
            ++nonzeros;
            CHECK(w.at(i, j) == cosines.at(i, j));
          }
        }
        CHECK(nonzeros == std::min<int64_t>(2, n));
        CHECK(w.at(j, j) == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
  SUBCASE("single frame") {
    Tensor w = visual_attention(random_tensor(rng, {1, 4}), 2);
    CHECK(w.size() == 1);
    CHECK(w.flat(0) == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("top_k >= N keeps the full cosine matrix") {
    Tensor v_h = random_tensor(rng, {3, 4});
    Tensor w = visual_attention(v_h, 5);
    Tensor cosines = frame_cosine_matrix(v_h);
    for (int64_t i = 0; i < 9; ++i) CHECK(w.flat(i) == cosines.flat(i));
  }
  SUBCASE("zero-norm frame names the frame") {
    Tensor v_h = Tensor::matrix(2, 3, {1, 2, 3, 0, 0, 0});
    CHECK_THROWS_WITH_AS(visual_attention(v_h, 2), doctest::Contains("frame 1"), std::domain_error);
  }
}

TEST_CASE("enhanced similarity") {
  std::mt19937_64 rng(7);
  SUBCASE("neutral attentions reduce to plain means") {
    TextFeatures text = make_text(rng, 3, 4);
    Tensor v_h = random_tensor(rng, {2, 4});
    std::vector<double> uni(3, 1.0 / 3.0);
    Tensor w_ta = Tensor::row(uni);
    Tensor w_va = Tensor::matrix(2, 2, {1, 0, 0, 1});
    auto bundle = enhanced_similarity(text, v_h, w_ta, w_va);
    for (int64_t n = 0; n < 2; ++n) {
      double col_mean = 0.0;
      for (int64_t m = 0; m < 3; ++m) col_mean += bundle.s_tokens.at(m, n) / 3.0;
      CHECK(bundle.s_prime.at(0, n) == doctest::Approx(0.5 * (col_mean + bundle.s_cls.at(0, n))).epsilon(1e-12));
    }
  }
  SUBCASE("single token passes straight through W_VA") {
    TextFeatures text = make_text(rng, 1, 4);
    Tensor v_h = random_tensor(rng, {3, 4});
    Tensor w_va = visual_attention(v_h, 2);
    auto bundle = enhanced_similarity(text, v_h, Tensor::row({1.0}), w_va);
    for (int64_t n = 0; n < 3; ++n) {
      double tok = 0.0, cls = 0.0;
      for (int64_t i = 0; i < 3; ++i) {
        tok += bundle.s_tokens.at(0, i) * w_va.at(i, n);
        cls += bundle.s_cls.at(0, i) * w_va.at(i, n);
      }
      CHECK(bundle.s_prime.at(0, n) == doctest::Approx(0.5 * (tok + cls)).epsilon(1e-12));
    }
  }
  SUBCASE("two-token two-frame hand-evaluated chain") {
    TextFeatures text;
    text.t_tokens = Tensor::matrix(2, 2, {1.0, 0.0, 0.6, 0.8});
    text.t_cls = Tensor::matrix(1, 2, {0.8, 0.4});
    text.valid = {1, 1};
    Tensor v_h = Tensor::matrix(2, 2, {0.0, 2.0, 1.0, 1.0});
    Tensor w_ta = Tensor::row({0.3, 0.7});
    Tensor w_va = Tensor::matrix(2, 2, {1.0, 0.5, 0.0, 1.0});
    auto bundle = enhanced_similarity(text, v_h, w_ta, w_va);

    // hand evaluation with plain loops
    auto nrow = [](std::vector<double> v) {
      double n = std::sqrt(v[0] * v[0] + v[1] * v[1]);
      return std::vector<double>{v[0] / n, v[1] / n};
    };
    std::vector<std::vector<double>> t{nrow({1.0, 0.0}), nrow({0.6, 0.8})};
    std::vector<double> cls = nrow({0.8, 0.4});
    std::vector<std::vector<double>> v{nrow({0.0, 2.0}), nrow({1.0, 1.0})};
    double s[2][2];
    for (int m = 0; m < 2; ++m) {
      for (int n = 0; n < 2; ++n) s[m][n] = t[m][0] * v[n][0] + t[m][1] * v[n][1];
    }
    double s_cls[2];
    for (int n = 0; n < 2; ++n) s_cls[n] = cls[0] * v[n][0] + cls[1] * v[n][1];
    double chain[2];
    for (int n = 0; n < 2; ++n) chain[n] = 0.3 * s[0][n] + 0.7 * s[1][n];
    double wta_chain[2];
    wta_chain[0] = chain[0] * 1.0 + chain[1] * 0.0;
    wta_chain[1] = chain[0] * 0.5 + chain[1] * 1.0;
    double cls_chain[2];
    cls_chain[0] = s_cls[0] * 1.0 + s_cls[1] * 0.0;
    cls_chain[1] = s_cls[0] * 0.5 + s_cls[1] * 1.0;
    for (int n = 0; n < 2; ++n) {
      CHECK(bundle.s_prime.at(0, n) == doctest::Approx(0.5 * (wta_chain[n] + cls_chain[n])).epsilon(1e-12));
    }
  }
}

TEST_CASE("similarity reduction") {
  EncoderConfig config;
  config.d_raw = 4;
  config.d = 4;
  EncoderParams params = EncoderParams::init(config, 11);
  std::mt19937_64 rng(13);
  Tensor v_h = random_tensor(rng, {2, 4});

  SUBCASE("TI of a constant vector is the constant") {
    Tensor s = Tensor::row({0.37, 0.37});
    CHECK(reduce_similarity(s, v_h, Reduction::kTI, params).item() == doctest::Approx(0.37).epsilon(1e-14));
  }
  SUBCASE("TI averages") {
    Tensor s = Tensor::row({0.2, 0.8});
    CHECK(reduce_similarity(s, v_h, Reduction::kTI, params).item() == doctest::Approx(0.5).epsilon(1e-14));
  }
  SUBCASE("WTI with the zero-initialized gate equals TI") {
    Tensor s = Tensor::row({0.1, 0.9});
    double ti = reduce_similarity(s, v_h, Reduction::kTI, params).item();
    double wti = reduce_similarity(s, v_h, Reduction::kWTI, params).item();
    CHECK(wti == doctest::Approx(ti).epsilon(1e-15));
  }
}

TEST_CASE("batch similarity") {
  EncoderConfig config;
  config.d_raw = 4;
  config.d = 4;
  EncoderParams params = EncoderParams::init(config, 17);
  DmaeConfig dmae;
  std::mt19937_64 rng(19);

  SUBCASE("single pair gives a 1x1 matrix") {
    std::vector<TextFeatures> texts{make_text(rng, 2, 4)};
    std::vector<VideoFeatures> videos{make_video(rng, 2, 4)};
    auto bundle = batch_similarity(texts, {uniform_attention(2)}, videos, dmae, params);
    CHECK(bundle.scores.shape() == Shape{1, 1});
  }

  SUBCASE("duplicated video duplicates its column exactly") {
    std::vector<TextFeatures> texts{make_text(rng, 2, 4), make_text(rng, 3, 4), make_text(rng, 2, 4)};
    VideoFeatures v = make_video(rng, 2, 4);
    std::vector<VideoFeatures> videos{v, make_video(rng, 3, 4), v};
    std::vector<TextAttention> atts{uniform_attention(2), uniform_attention(3), uniform_attention(2)};
    auto bundle = batch_similarity(texts, atts, videos, dmae, params);
    for (int64_t i = 0; i < 3; ++i) CHECK(bundle.scores.at(i, 0) == bundle.scores.at(i, 2));
  }

  SUBCASE("matches the per-pair loop oracle") {
    for (Reduction reduction : {Reduction::kTI, Reduction::kWTI}) {
      DmaeConfig cfg;
      cfg.reduction = reduction;
      EncoderParams p2 = params;
      p2.wti_gate = random_tensor(rng, {4, 1});
      std::vector<TextFeatures> texts;
      std::vector<VideoFeatures> videos;
      std::vector<TextAttention> atts;
      std::mt19937_64 rng2(23);
      std::uniform_real_distribution<double> u(0.5, 2.0);
      for (int i = 0; i < 4; ++i) {
        int64_t m = 2 + i % 2;
        texts.push_back(make_text(rng, m, 4));
        videos.push_back(make_video(rng, 2 + (i + 1) % 2, 4));
        TextAttention a;
        for (int64_t t = 0; t < m; ++t) {
          a.w_pos.push_back(u(rng2));
          a.w_freq.push_back(1.0);
        }
        atts.push_back(std::move(a));
      }
      auto bundle = batch_similarity(texts, atts, videos, cfg, p2);
      for (int64_t i = 0; i < 4; ++i) {
        for (int64_t j = 0; j < 4; ++j) {
          Tensor w_ta = textual_attention(atts[static_cast<size_t>(i)].w_pos,
                                          atts[static_cast<size_t>(i)].w_freq, texts[static_cast<size_t>(i)].valid);
          Tensor w_va = visual_attention(videos[static_cast<size_t>(j)].v_h, cfg.top_k);
          auto pair = enhanced_similarity(texts[static_cast<size_t>(i)], videos[static_cast<size_t>(j)].v_h,
                                          w_ta, w_va);
          double expect = reduce_similarity(pair.s_prime, videos[static_cast<size_t>(j)].v_h, reduction, p2).item();
          CHECK(std::fabs(bundle.scores.at(i, j) - expect) < 1e-12);
        }
      }
    }
  }

  SUBCASE("permutation equivariance") {
    std::vector<TextFeatures> texts;
    std::vector<VideoFeatures> videos;
    std::vector<TextAttention> atts;
    for (int i = 0; i < 4; ++i) {
      texts.push_back(make_text(rng, 3, 4));
      videos.push_back(make_video(rng, 2, 4));
      atts.push_back(uniform_attention(3));
    }
    auto base = batch_similarity(texts, atts, videos, dmae, params);
    std::vector<size_t> perm{2, 0, 3, 1};
    std::vector<TextFeatures> ptexts;
    std::vector<VideoFeatures> pvideos;
    std::vector<TextAttention> patts;
    for (size_t p : perm) {
      ptexts.push_back(texts[p]);
      pvideos.push_back(videos[p]);
      patts.push_back(atts[p]);
    }
    auto permuted = batch_similarity(ptexts, patts, pvideos, dmae, params);
    for (size_t i = 0; i < 4; ++i) {
      for (size_t j = 0; j < 4; ++j) {
        CHECK(permuted.scores.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) ==
              base.scores.at(static_cast<int64_t>(perm[i]), static_cast<int64_t>(perm[j])));
      }
    }
  }

  SUBCASE("disabled DMAE uses neutral attentions") {
    std::vector<TextFeatures> texts{make_text(rng, 3, 4)};
    std::vector<VideoFeatures> videos{make_video(rng, 2, 4)};
    TextAttention att;
    att.w_pos = {5.0, 1.0, 1.0};  // would skew W_TA if enabled
    att.w_freq = {1.0, 1.0, 0.0};
    DmaeConfig off;
    off.enabled = false;
    auto bundle = batch_similarity(texts, {att}, videos, off, params);
    for (int64_t i = 0; i < 3; ++i) CHECK(bundle.w_ta[0].flat(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(bundle.w_va[0].at(0, 0) == 1.0);
    CHECK(bundle.w_va[0].at(0, 1) == 0.0);
  }
}

TEST_CASE("gradient of the scalar similarity wrt encoder params") {
  EncoderConfig config;
  config.d_raw = 3;
  config.d = 3;
  config.max_frames = 3;
  config.patches_per_frame = 1;
  std::mt19937_64 rng(29);

  CaptionRecord cap;
  cap.caption_id = "c";
  cap.video_id = "v";
  cap.tokens = {"a", "b"};
  cap.pos_tags = {"NOUN", "VERB"};
  Tensor raw_tokens = random_tensor(rng, {2, 3});
  VideoRecord vid;
  vid.video_id = "v";
  vid.frame_count = 3;
  vid.patches_per_frame = 1;
  vid.frame_embeddings = random_tensor(rng, {3, 3});
  vid.patch_embeddings = random_tensor(rng, {6, 3});

  EncoderParams base = EncoderParams::init(config, 31);
  std::mt19937_64 prng(37);
  base.wv = random_tensor(prng, {3, 3}, -0.3, 0.3);
  base.pos_emb = random_tensor(prng, {3, 3}, -0.3, 0.3);
  base.wti_gate = random_tensor(prng, {3, 1}, -0.5, 0.5);

  TextAttention att;
  att.w_pos = {2.0, 1.0};
  att.w_freq = {1.0, 1.0};

  // freeze the top-k retention pattern at the unperturbed parameters
  VideoFeatures vf0 = encode_video(vid, base, config);
  Tensor w_va0 = visual_attention(vf0.v_h, 2);
  std::vector<std::uint8_t> pattern(static_cast<size_t>(w_va0.size()), 0);
  for (int64_t i = 0; i < w_va0.size(); ++i) pattern[static_cast<size_t>(i)] = w_va0.flat(i) != 0.0 ? 1 : 0;

  auto build = [&](const std::vector<Tensor>& in) {
    EncoderParams p = base;
    p.text_proj = in[0];
    p.video_proj = in[1];
    p.wq = in[2];
    p.wk = in[3];
    p.wv = in[4];
    p.pos_emb = in[5];
    p.wti_gate = in[6];
    TextFeatures text = encode_text(cap, raw_tokens, p, config);
    VideoFeatures video = encode_video(vid, p, config);
    Tensor w_ta = textual_attention(att.w_pos, att.w_freq, text.valid);
    Tensor w_va = visual_attention_with_pattern(video.v_h, pattern);
    auto bundle = enhanced_similarity(text, video.v_h, w_ta, w_va);
    return reduce_similarity(bundle.s_prime, video.v_h, Reduction::kWTI, p);
  };
  double err = max_grad_rel_err(
      build, {base.text_proj, base.video_proj, base.wq, base.wk, base.wv, base.pos_emb, base.wti_gate});
  CHECK(err < 1e-4);
}
