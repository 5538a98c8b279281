#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "hnf/tpmcl.hpp"
#include "support/gradcheck.hpp"

using namespace hnf;
using hnf::testing::max_grad_rel_err;
using hnf::testing::random_tensor;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.d_raw = 4;
  c.d = 4;
  c.max_text_len = 6;
  c.max_frames = 4;
  c.patches_per_frame = 1;
  return c;
}

TextFeatures make_text(std::mt19937_64& rng, int64_t m, int64_t d) {
  TextFeatures t;
  t.t_tokens = random_tensor(rng, {m, d});
  std::vector<double> pool(static_cast<size_t>(m), 1.0 / static_cast<double>(m));
  t.t_cls = matmul(Tensor::row(pool), t.t_tokens);
  t.valid.assign(static_cast<size_t>(m), 1);
  return t;
}

VideoFeatures make_video(std::mt19937_64& rng, int64_t n, const EncoderParams& params,
                         const EncoderConfig& config) {
  VideoFeatures v;
  v.f_cls = random_tensor(rng, {n, config.d});
  v.v_tokens = random_tensor(rng, {n * (config.patches_per_frame + 1), config.d});
  v.v_h = temporal_encode(frame_aggregate(v.v_tokens, n, config.patches_per_frame + 1), params, config);
  return v;
}

// Enumeration oracle: sort (weight desc, index asc), walk prefix sums.
std::vector<std::uint8_t> mask_oracle(const std::vector<double>& w, double ratio) {
  std::vector<size_t> order(w.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (w[a] != w[b]) return w[a] > w[b];
    return a < b;
  });
  std::vector<std::uint8_t> keep(w.size(), 1);
  double cum = 0.0;
  for (size_t r : order) {
    cum += w[r];
    if (cum < ratio) keep[r] = 0;
  }
  return keep;
}

std::vector<double> random_weights(std::mt19937_64& rng, size_t len) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> w(len);
  double total = 0.0;
  for (auto& x : w) {
    x = u(rng);
    total += x;
  }
  for (auto& x : w) x /= total;
  return w;
}

}  // namespace

TEST_CASE("token weight predictors") {
  EncoderConfig config = small_config();
  EncoderParams params = EncoderParams::init(config, 3);
  std::mt19937_64 rng(5);

  SUBCASE("softmax of a single token is one") {
    TextFeatures text = make_text(rng, 1, 4);
    Tensor f_cls = random_tensor(rng, {3, 4});
    Tensor w = text_token_weights(text.t_tokens, f_cls, text.valid, params);
    CHECK(w.size() == 1);
    CHECK(w.item() == 1.0);

    Tensor one_patch = random_tensor(rng, {1, 4});
    Tensor wv = visual_token_weights(one_patch, text.t_cls, params);
    CHECK(wv.item() == 1.0);
  }

  SUBCASE("nonnegative, sums to one") {
    for (int trial = 0; trial < 20; ++trial) {
      TextFeatures text = make_text(rng, 2 + trial % 4, 4);
      Tensor f_cls = random_tensor(rng, {1 + trial % 3, 4});
      Tensor w = text_token_weights(text.t_tokens, f_cls, text.valid, params);
      double total = 0.0;
      for (int64_t i = 0; i < w.size(); ++i) {
        CHECK(w.flat(i) >= 0.0);
        total += w.flat(i);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

      Tensor patches = random_tensor(rng, {4, 4});
      Tensor wv = visual_token_weights(patches, text.t_cls, params);
      total = 0.0;
      for (int64_t i = 0; i < wv.size(); ++i) total += wv.flat(i);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  SUBCASE("deterministic under identical inputs") {
    TextFeatures text = make_text(rng, 3, 4);
    Tensor f_cls = random_tensor(rng, {2, 4});
    Tensor a = text_token_weights(text.t_tokens, f_cls, text.valid, params);
    Tensor b = text_token_weights(text.t_tokens, f_cls, text.valid, params);
    CHECK(a.values() == b.values());
  }

  SUBCASE("empty sides rejected") {
    TextFeatures text = make_text(rng, 2, 4);
    CHECK_THROWS_AS(text_token_weights(text.t_tokens, Tensor::zeros({0, 4}), text.valid, params),
                    std::invalid_argument);
  }
}

TEST_CASE("adaptive mask") {
  SUBCASE("worked example at the default ratio") {
    auto mask = adaptive_mask({0.5, 0.3, 0.2}, 0.6);
    CHECK(mask == std::vector<std::uint8_t>{0, 1, 1});
  }
  SUBCASE("ratio zero keeps everything") {
    auto mask = adaptive_mask({0.5, 0.3, 0.2}, 0.0);
    CHECK(mask == std::vector<std::uint8_t>{1, 1, 1});
  }
  SUBCASE("ratio one masks all but the last ranked token") {
    auto mask = adaptive_mask({0.5, 0.3, 0.2}, 1.0);
    CHECK(mask == std::vector<std::uint8_t>{0, 0, 1});
  }
  SUBCASE("ratio outside [0,1] rejected") {
    CHECK_THROWS_AS(adaptive_mask({1.0}, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(adaptive_mask({1.0}, -0.1), std::invalid_argument);
  }
  SUBCASE("matches the enumeration oracle") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> ratio_dist(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
      size_t len = 1 + rng() % 32;
      auto w = random_weights(rng, len);
      double ratio = ratio_dist(rng);
      CHECK(adaptive_mask(w, ratio) == mask_oracle(w, ratio));
    }
  }
  SUBCASE("masked count is non-decreasing in the ratio") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      auto w = random_weights(rng, 1 + rng() % 16);
      int64_t prev = -1;
      for (double ratio : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
        auto mask = adaptive_mask(w, ratio);
        int64_t masked = 0;
        for (auto b : mask) masked += b == 0 ? 1 : 0;
        CHECK(masked >= prev);
        prev = masked;
      }
    }
  }
  SUBCASE("at least one token always survives") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      auto w = random_weights(rng, 1 + rng() % 8);
      auto mask = adaptive_mask(w, 1.0);
      int64_t kept = 0;
      for (auto b : mask) kept += b;
      CHECK(kept >= 1);
    }
  }
}

TEST_CASE("build_triplet") {
  EncoderConfig config = small_config();
  EncoderParams params = EncoderParams::init(config, 13);
  std::mt19937_64 rng(17);

  SUBCASE("all-ones masks reproduce the originals bitwise") {
    TextFeatures text = make_text(rng, 3, 4);
    VideoFeatures video = make_video(rng, 2, params, config);
    TokenWeights weights;
    weights.w_text = Tensor::row({0.5, 0.3, 0.2});
    weights.w_visual = Tensor::row(std::vector<double>(4, 0.25));
    auto triplet = build_triplet(text, video, weights, {1, 1, 1}, {1, 1, 1, 1}, params, config);
    CHECK(triplet.t_g.values() == triplet.t_g_p.values());
    CHECK(triplet.v_h.values() == triplet.v_h_p.values());
    CHECK_FALSE(triplet.text_all_masked);
  }

  SUBCASE("masking removes exactly the weighted token rows") {
    for (int trial = 0; trial < 50; ++trial) {
      int64_t m = 2 + trial % 4;
      TextFeatures text = make_text(rng, m, 4);
      VideoFeatures video = make_video(rng, 2, params, config);
      TokenWeights weights;
      auto w = random_weights(rng, static_cast<size_t>(m));
      weights.w_text = Tensor::row(w);
      weights.w_visual = Tensor::row(std::vector<double>(4, 0.25));
      std::vector<std::uint8_t> b_t(static_cast<size_t>(m), 1);
      b_t[trial % static_cast<size_t>(m)] = 0;
      auto triplet = build_triplet(text, video, weights, b_t, {1, 1, 1, 1}, params, config);
      for (int64_t j = 0; j < 4; ++j) {
        double removed = 0.0;
        for (int64_t i = 0; i < m; ++i) {
          if (!b_t[static_cast<size_t>(i)]) removed += w[static_cast<size_t>(i)] * text.t_tokens.at(i, j);
        }
        CHECK(std::fabs((triplet.t_g.at(0, j) - triplet.t_g_p.at(0, j)) - removed) < 1e-12);
      }
    }
  }

  SUBCASE("zero weight on the masked token keeps t_g^p equal to t_g") {
    TextFeatures text = make_text(rng, 3, 4);
    VideoFeatures video = make_video(rng, 2, params, config);
    TokenWeights weights;
    weights.w_text = Tensor::row({0.0, 0.6, 0.4});
    weights.w_visual = Tensor::row(std::vector<double>(4, 0.25));
    auto triplet = build_triplet(text, video, weights, {0, 1, 1}, {1, 1, 1, 1}, params, config);
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(triplet.t_g.at(0, j) == doctest::Approx(triplet.t_g_p.at(0, j)).epsilon(1e-15));
    }
  }

  SUBCASE("fully masked sides are flagged and produce zero features") {
    TextFeatures text = make_text(rng, 2, 4);
    VideoFeatures video = make_video(rng, 2, params, config);
    TokenWeights weights;
    weights.w_text = Tensor::row({0.5, 0.5});
    weights.w_visual = Tensor::row(std::vector<double>(4, 0.25));
    auto triplet = build_triplet(text, video, weights, {0, 0}, {1, 1, 1, 1}, params, config);
    CHECK(triplet.text_all_masked);
    for (int64_t j = 0; j < 4; ++j) CHECK(triplet.t_g_p.at(0, j) == 0.0);
  }

  SUBCASE("v_h and v_h^p share the temporal encoder parameters") {
    TextFeatures text = make_text(rng, 2, 4);
    VideoFeatures video = make_video(rng, 2, params, config);
    TokenWeights weights;
    weights.w_text = Tensor::row({0.5, 0.5});
    weights.w_visual = Tensor::row(std::vector<double>(4, 0.25));
    // different encoder weights would break the all-ones equality
    auto triplet = build_triplet(text, video, weights, {1, 1}, {1, 1, 1, 1}, params, config);
    CHECK(triplet.v_h_p.values() == video.v_h.values());
  }
}

TEST_CASE("tpm loss") {
  SUBCASE("hand-evaluated first hinge") {
    // cosines: s(t_cls, v_h) = 0.9, s(t_cls, v_h_p) = 0.6, delta = 0.6 -> L1 = 0.3
    TripletSample t;
    Tensor t_cls = Tensor::row({1.0, 0.0});
    t.v_h = Tensor::matrix(1, 2, {0.9, std::sqrt(1.0 - 0.81)});
    t.v_h_p = Tensor::matrix(1, 2, {0.6, 0.8});
    t.t_g = t_cls;
    t.t_g_p = t_cls;
    auto loss = tpm_loss(t, t_cls, 0.6);
    CHECK(loss.l1.item() == doctest::Approx(0.3).epsilon(1e-12));
  }

  SUBCASE("identical triplet with zero margin is free") {
    std::mt19937_64 rng(23);
    Tensor t_cls = random_tensor(rng, {1, 4});
    TripletSample t;
    t.v_h = random_tensor(rng, {3, 4});
    t.v_h_p = t.v_h;
    t.t_g = random_tensor(rng, {1, 4});
    t.t_g_p = t.t_g;
    auto loss = tpm_loss(t, t_cls, 0.0);
    CHECK(loss.total.item() == 0.0);
  }

  SUBCASE("identical triplet hinges sit exactly at delta") {
    std::mt19937_64 rng(29);
    Tensor t_cls = random_tensor(rng, {1, 4});
    TripletSample t;
    t.v_h = random_tensor(rng, {2, 4});
    t.v_h_p = t.v_h;
    t.t_g = random_tensor(rng, {1, 4});
    t.t_g_p = t.t_g;
    const double delta = 0.6;
    auto loss = tpm_loss(t, t_cls, delta);
    CHECK(loss.l1.item() == delta);
    CHECK(loss.l2.item() == delta);
    CHECK(loss.l3.item() == delta);
  }

  SUBCASE("satisfied margins zero out") {
    // masked similarity lower than the original by more than delta
    Tensor t_cls = Tensor::row({1.0, 0.0});
    TripletSample t;
    t.v_h = Tensor::matrix(1, 2, {1.0, 0.0});
    t.v_h_p = Tensor::matrix(1, 2, {-1.0, 0.0});
    t.t_g = Tensor::row({1.0, 0.0});
    t.t_g_p = Tensor::row({-1.0, 0.0});
    auto loss = tpm_loss(t, t_cls, 0.5);
    CHECK(loss.total.item() == 0.0);
  }

  SUBCASE("component bounds") {
    std::mt19937_64 rng(31);
    const double delta = 0.6;
    for (int trial = 0; trial < 50; ++trial) {
      TripletSample t;
      Tensor t_cls = random_tensor(rng, {1, 4});
      t.v_h = random_tensor(rng, {3, 4});
      t.v_h_p = random_tensor(rng, {3, 4});
      t.t_g = random_tensor(rng, {1, 4});
      t.t_g_p = random_tensor(rng, {1, 4});
      auto loss = tpm_loss(t, t_cls, delta);
      for (const Tensor* l : {&loss.l1, &loss.l2, &loss.l3}) {
        CHECK(l->item() >= 0.0);
        CHECK(l->item() <= 2.0 + delta);
      }
      CHECK(loss.total.item() >= 0.0);
    }
  }

  SUBCASE("zero-norm feature names the feature") {
    Tensor t_cls = Tensor::row({1.0, 0.0});
    TripletSample t;
    t.v_h = Tensor::matrix(1, 2, {1.0, 0.0});
    t.v_h_p = t.v_h;
    t.t_g = Tensor::row({0.0, 0.0});
    t.t_g_p = t.t_g;
    CHECK_THROWS_WITH_AS(tpm_loss(t, t_cls, 0.1), doctest::Contains("t_g"), std::domain_error);
  }
}

TEST_CASE("end-to-end triplet generation and gradients") {
  EncoderConfig config = small_config();
  EncoderParams base = EncoderParams::init(config, 37);
  std::mt19937_64 rng(41);
  TpmConfig tpm;

  TextFeatures text = make_text(rng, 3, 4);
  VideoFeatures video = make_video(rng, 2, base, config);

  SUBCASE("generate_triplet is deterministic") {
    auto a = generate_triplet(text, video, base, config, tpm);
    auto b = generate_triplet(text, video, base, config, tpm);
    CHECK(a.weights.w_text.values() == b.weights.w_text.values());
    CHECK(a.sample.b_t == b.sample.b_t);
    CHECK(a.sample.t_g_p.values() == b.sample.t_g_p.values());
  }

  SUBCASE("gradients wrt predictor heads and encoder match finite differences") {
    // masks held fixed from the unperturbed forward pass
    auto fixed = generate_triplet(text, video, base, config, tpm);
    const auto b_t = fixed.sample.b_t;
    const auto b_v = fixed.sample.b_v;

    Tensor raw_tokens = random_tensor(rng, {3, 4});
    Tensor raw_frames = random_tensor(rng, {2, 4});
    Tensor raw_patches = random_tensor(rng, {4, 4});

    auto build = [&](const std::vector<Tensor>& in) {
      EncoderParams p = base;
      p.text_proj = in[0];
      p.video_proj = in[1];
      p.wv = in[2];
      p.tw_align = in[3];
      p.tw_w1 = in[4];
      p.tw_w2 = in[5];
      p.vw_align = in[6];
      p.vw_w1 = in[7];
      p.vw_w2 = in[8];
      TextFeatures tf;
      tf.t_tokens = matmul(raw_tokens, p.text_proj);
      tf.t_cls = matmul(Tensor::row({1.0 / 3, 1.0 / 3, 1.0 / 3}), tf.t_tokens);
      tf.valid = {1, 1, 1};
      VideoFeatures vf;
      vf.f_cls = matmul(raw_frames, p.video_proj);
      vf.v_tokens = matmul(raw_patches, p.video_proj);
      vf.v_h = temporal_encode(frame_aggregate(vf.v_tokens, 2, 2), p, config);
      TokenWeights w;
      w.w_text = text_token_weights(tf.t_tokens, vf.f_cls, tf.valid, p);
      w.w_visual = visual_token_weights(vf.v_tokens, tf.t_cls, p);
      auto triplet = build_triplet(tf, vf, w, b_t, b_v, p, config);
      return tpm_loss(triplet, tf.t_cls, 0.6).total;
    };
    double err = max_grad_rel_err(build, {base.text_proj, base.video_proj, base.wv, base.tw_align,
                                          base.tw_w1, base.tw_w2, base.vw_align, base.vw_w1, base.vw_w2});
    CHECK(err < 1e-4);
  }
}
