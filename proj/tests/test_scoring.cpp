#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "setar/errors.hpp"
#include "setar/scoring.hpp"

using namespace setar;

namespace {

EncodedImage random_encoded(Rng& rng, std::size_t patches, std::size_t d) {
  EncodedImage img;
  img.global = testing::random_vector(rng, d);
  img.local = testing::random_matrix(rng, patches, d);
  return img;
}

ConceptBank random_bank(Rng& rng, std::size_t k, std::size_t d) {
  ConceptBank b;
  b.features = testing::random_matrix(rng, k, d);
  b.class_names.resize(k);
  return b;
}

}  // namespace

TEST_CASE("iwic_global examples") {
  EncodedImage img;
  img.global = {1.0, 0.0, 0.0};
  ConceptBank bank;
  bank.features = Matrix(2, 3, std::vector<double>{1.0, 0.0, 0.0, 0.0, 2.0, 0.0});
  CHECK(iwic_global(img, bank) == std::vector<double>{1.0, 0.0});
  img.global = {5.0, 0.0, 0.0};
  CHECK(iwic_global(img, bank) == std::vector<double>{1.0, 0.0});

  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const EncodedImage r = random_encoded(rng, 3, 6);
    const ConceptBank b = random_bank(rng, 4, 6);
    const auto s = iwic_global(r, b);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(std::abs(s[c] - static_cast<double>(oracle::cos_sim(r.global, b.features.row(c)))) < 1e-12);
      CHECK(std::abs(s[c]) <= 1.0);
    }
  }
}

TEST_CASE("iwic_local examples") {
  Rng rng(2);
  const ConceptBank b = random_bank(rng, 3, 5);
  EncodedImage one;
  one.global = testing::random_vector(rng, 5);
  one.local = Matrix(1, 5);
  std::copy(one.global.begin(), one.global.end(), one.local.row(0).begin());
  CHECK(iwic_local(one, b) == iwic_global(one, b));

  EncodedImage dup = one;
  dup.local = Matrix(3, 5);
  for (std::size_t i = 0; i < 3; ++i) std::copy(one.global.begin(), one.global.end(), dup.local.row(i).begin());
  CHECK(iwic_local(dup, b) == iwic_local(one, b));

  const EncodedImage r = random_encoded(rng, 4, 5);
  const auto s = iwic_local(r, b);
  for (std::size_t c = 0; c < 3; ++c) {
    long double best = -2.0L;
    for (std::size_t i = 0; i < 4; ++i) best = std::max(best, oracle::cos_sim(r.local.row(i), b.features.row(c)));
    CHECK(std::abs(s[c] - static_cast<double>(best)) < 1e-12);
  }
}

TEST_CASE("zero-norm features raise numeric errors") {
  Rng rng(3);
  const ConceptBank b = random_bank(rng, 2, 3);
  EncodedImage img = random_encoded(rng, 2, 3);
  img.global = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(iwic_global(img, b), NumericError);
  img.global = {1.0, 0.0, 0.0};
  for (double& x : img.local.row(1)) x = 0.0;
  CHECK_THROWS_AS(iwic_local(img, b), NumericError);
}

TEST_CASE("mcm_score examples") {
  CHECK(mcm_score(std::vector<double>{0.3}, 1.0) == 1.0);
  CHECK(mcm_score(std::vector<double>{0.2, 0.2, 0.2, 0.2}, 1.0) == doctest::Approx(0.25).epsilon(1e-15));
  const std::vector<double> s{0.9, 0.1, 0.1};
  const double got = mcm_score(s, 1.0);
  CHECK(std::abs(got - static_cast<double>(oracle::max_softmax(s, 1.0L))) < 1e-12);
  CHECK(got == doctest::Approx(0.526688).epsilon(1e-6));
}

TEST_CASE("glmcm_score examples") {
  CHECK(glmcm_score(std::vector<double>{0.1}, std::vector<double>{-0.4}, 1.0, 1.0) == 2.0);
  const std::vector<double> s{0.3, -0.2, 0.7, 0.1};
  CHECK(glmcm_score(s, s, 0.5, 0.5) == 2.0 * mcm_score(s, 0.5));
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto g = testing::random_vector(rng, 5);
    const auto l = testing::random_vector(rng, 5);
    const long double want = oracle::max_softmax(g, 0.7L) + oracle::max_softmax(l, 1.3L);
    CHECK(std::abs(glmcm_score(g, l, 0.7, 1.3) - static_cast<double>(want)) < 1e-12);
  }
}

TEST_CASE("msp and energy examples") {
  CHECK(msp_score(std::vector<double>(5, 0.0)) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(energy_score(std::vector<double>{3.25}, 1.0) == 3.25);
  CHECK(energy_score(std::vector<double>{-7.5}, 0.1) == doctest::Approx(-7.5).epsilon(1e-15));
  const std::vector<double> z{2.0, 1.0, 0.0};
  const double e = energy_score(z, 0.1);
  CHECK(std::abs(e - static_cast<double>(oracle::energy(z, 0.1L))) < 1e-12);
  CHECK(e == doctest::Approx(2.0000045400960).epsilon(1e-12));
}

TEST_CASE("energy and msp are stable for large logits") {
  for (double mag : {1e2, 1e3, 1e4}) {
    const std::vector<double> z{mag, -mag, 0.5 * mag};
    for (double t : {0.1, 1.0, 10.0}) {
      const double e = energy_score(z, t);
      CHECK(std::isfinite(e));
      CHECK(std::abs(e - static_cast<double>(oracle::energy(z, t))) <= 1e-12 * std::max(1.0, std::abs(e)));
    }
    CHECK(msp_score(z) == doctest::Approx(1.0));
  }
}

TEST_CASE("score bounds and monotonicity on random inputs") {
  Rng rng(5);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t k = 1 + rng.uniform_int(9);
    const auto g = testing::random_vector(rng, k);
    const auto l = testing::random_vector(rng, k);
    const double tau = rng.uniform(0.05, 2.0);
    const double m = mcm_score(g, tau);
    CHECK(m >= 1.0 / static_cast<double>(k));
    CHECK(m <= 1.0);
    const double gl = glmcm_score(g, l, tau, tau);
    CHECK(gl >= 2.0 / static_cast<double>(k));
    CHECK(gl <= 2.0);

    auto bumped = g;
    const auto top = std::max_element(bumped.begin(), bumped.end()) - bumped.begin();
    bumped[static_cast<std::size_t>(top)] += 0.1;
    CHECK(mcm_score(bumped, tau) >= m);

    const auto p1 = softmax(g, tau);
    const auto p2 = softmax(g, 3.0 * tau);
    CHECK(std::max_element(p1.begin(), p1.end()) - p1.begin() == std::max_element(p2.begin(), p2.end()) - p2.begin());
  }
}

TEST_CASE("score functions reject bad input") {
  CHECK_THROWS_AS(mcm_score(std::vector<double>{}, 1.0), InvalidInput);
  CHECK_THROWS_AS(mcm_score(std::vector<double>{1.0}, 0.0), InvalidInput);
  CHECK_THROWS_AS(mcm_score(std::vector<double>{std::nan("")}, 1.0), InvalidInput);
  CHECK_THROWS_AS(energy_score(std::vector<double>{1.0}, -1.0), InvalidInput);
  CHECK_THROWS_AS(glmcm_score(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 1.0, 1.0), InvalidInput);
  CHECK_THROWS_AS((ScoreParams{1.0, 0.0, 1.0}.validate()), InvalidInput);
}

TEST_CASE("fit_threshold examples") {
  std::vector<double> s;
  for (int i = 1; i <= 100; ++i) s.push_back(i / 100.0);
  const double lambda = fit_threshold(s, 0.95);
  CHECK(lambda == 0.05);
  CHECK(std::count_if(s.begin(), s.end(), [&](double x) { return x >= lambda; }) == 96);

  CHECK(fit_threshold(std::vector<double>(7, 0.3), 0.95) == 0.3);
  CHECK(fit_threshold(std::vector<double>{0.4, 0.1, 0.3, 0.2}, 0.5) == 0.2);
  CHECK_THROWS_AS(fit_threshold(std::vector<double>{}, 0.95), InvalidInput);
  CHECK_THROWS_AS(fit_threshold(std::vector<double>{1.0}, 1.0), InvalidInput);
}

TEST_CASE("fit_threshold keeps at least the requested fraction") {
  Rng rng(6);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + rng.uniform_int(60);
    std::vector<double> s(n);
    for (double& x : s) x = std::round(rng.uniform(0.0, 10.0));
    const double tpr = rng.uniform(0.01, 0.99);
    const double lambda = fit_threshold(s, tpr);
    const auto kept = std::count_if(s.begin(), s.end(), [&](double x) { return detect(x, lambda); });
    CHECK(static_cast<double>(kept) >= tpr * static_cast<double>(n) - 1e-9);
    CHECK(std::find(s.begin(), s.end(), lambda) != s.end());
  }
}

TEST_CASE("detect is inclusive") {
  CHECK(detect(0.9, 0.5) == 1);
  CHECK(detect(0.5, 0.5) == 1);
  CHECK(detect(0.4, 0.5) == 0);
}

TEST_CASE("score names") {
  for (ScoreKind k : {ScoreKind::mcm, ScoreKind::glmcm, ScoreKind::msp, ScoreKind::energy}) {
    CHECK(score_kind_from_string(to_string(k)) == k);
    CHECK(score_kind_from_string(file_stem(k)) == k);
  }
  CHECK(score_kind_from_string("gl_mcm") == ScoreKind::glmcm);
  CHECK_THROWS_AS(score_kind_from_string("neglabel"), InvalidInput);
}

TEST_CASE("score_images respects the modality") {
  const ModelConfig dual = testing::tiny_config();
  const ModelConfig uni = testing::tiny_config(true);
  Rng rng(7);
  const std::vector<LabeledImage> imgs{testing::random_image(rng, dual), testing::random_image(rng, dual)};
  const ClassPrompts prompts = ClassPrompts::from_names({"a", "b", "c"});
  const WeightStore ds = init_weights(dual, 1);
  const WeightStore us = init_weights(uni, 1);
  CHECK_THROWS_AS(score_images(ds, imgs, prompts, ScoreKind::msp, {}), Unsupported);
  CHECK_THROWS_AS(score_images(us, imgs, prompts, ScoreKind::glmcm, {}), Unsupported);

  const auto gl = score_images(ds, imgs, prompts, ScoreKind::glmcm, {});
  const ConceptBank bank = encode_concepts(ds, prompts);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const EncodedImage e = encode_image(ds, imgs[i].patches);
    CHECK(gl[i] == glmcm_score(iwic_global(e, bank), iwic_local(e, bank), 1.0, 1.0));
  }
  const auto en = score_images(us, imgs, prompts, ScoreKind::energy, {1.0, 1.0, 0.1});
  CHECK(en[1] == energy_score(classify_logits(us, imgs[1].patches), 0.1));
}
