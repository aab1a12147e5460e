#include "setar/scoring.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "setar/errors.hpp"
#include "setar/parallel.hpp"

namespace setar {

void ScoreParams::validate() const {
  if (!(tau > 0.0) || !(tau_local > 0.0) || !(energy_T > 0.0)) {
    throw InvalidInput("score temperatures must be strictly positive");
  }
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("cosine_similarity: dimension mismatch");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero-norm feature");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> iwic_global(const EncodedImage& img, const ConceptBank& bank) {
  std::vector<double> s(bank.features.rows());
  for (std::size_t c = 0; c < s.size(); ++c) s[c] = cosine_similarity(img.global, bank.features.row(c));
  return s;
}

std::vector<double> iwic_local(const EncodedImage& img, const ConceptBank& bank) {
  if (img.local.rows() == 0) throw InvalidInput("iwic_local: image has no patches");
  std::vector<double> s(bank.features.rows(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < img.local.rows(); ++i)
    for (std::size_t c = 0; c < s.size(); ++c)
      s[c] = std::max(s[c], cosine_similarity(img.local.row(i), bank.features.row(c)));
  return s;
}

std::vector<double> softmax(std::span<const double> values, double temperature) {
  if (values.empty()) throw InvalidInput("softmax of an empty vector");
  if (!(temperature > 0.0)) throw InvalidInput("softmax temperature must be positive");
  const double mx = *std::max_element(values.begin(), values.end());
  std::vector<double> p(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    p[i] = std::exp((values[i] - mx) / temperature);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw InvalidInput("log_sum_exp of an empty vector");
  const double mx = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw InvalidInput(std::string(what) + ": non-finite input");
}

double max_softmax(std::span<const double> values, double temperature) {
  // max_c softmax_c = 1 / Σ exp((v_c - v_max)/T)
  const double mx = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += std::exp((v - mx) / temperature);
  return 1.0 / sum;
}

}  // namespace

double mcm_score(std::span<const double> sims_global, double tau) {
  if (sims_global.empty()) throw InvalidInput("mcm_score: no classes");
  if (!(tau > 0.0)) throw InvalidInput("mcm_score: tau must be positive");
  require_finite(sims_global, "mcm_score");
  return max_softmax(sims_global, tau);
}

double glmcm_score(std::span<const double> sims_global, std::span<const double> sims_local, double tau,
                   double tau_local) {
  if (sims_global.size() != sims_local.size()) throw InvalidInput("glmcm_score: class count mismatch");
  if (!(tau_local > 0.0)) throw InvalidInput("glmcm_score: tau_local must be positive");
  require_finite(sims_local, "glmcm_score");
  return mcm_score(sims_global, tau) + max_softmax(sims_local, tau_local);
}

double msp_score(std::span<const double> logits) {
  if (logits.empty()) throw InvalidInput("msp_score: no classes");
  require_finite(logits, "msp_score");
  return max_softmax(logits, 1.0);
}

double energy_score(std::span<const double> logits, double T) {
  if (logits.empty()) throw InvalidInput("energy_score: no classes");
  if (!(T > 0.0)) throw InvalidInput("energy_score: T must be positive");
  require_finite(logits, "energy_score");
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& x : scaled) x /= T;
  return T * log_sum_exp(scaled);
}

double fit_threshold(std::span<const double> id_scores, double tpr) {
  if (id_scores.empty()) throw InvalidInput("fit_threshold: no ID scores");
  if (!(tpr > 0.0 && tpr < 1.0)) throw InvalidInput("fit_threshold: tpr must be in (0, 1)");
  require_finite(id_scores, "fit_threshold");
  const double n = static_cast<double>(id_scores.size());
  // The small offset keeps e.g. (1 - 0.95) * 100 from rounding up to 6.
  auto k = static_cast<std::size_t>(std::ceil((1.0 - tpr) * n - 1e-9));
  k = std::clamp<std::size_t>(k, 1, id_scores.size());
  std::vector<double> sorted(id_scores.begin(), id_scores.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
  return sorted[k - 1];
}

std::string to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::mcm:
      return "MCM";
    case ScoreKind::glmcm:
      return "GL-MCM";
    case ScoreKind::msp:
      return "MSP";
    case ScoreKind::energy:
      return "Energy";
  }
  return "?";
}

std::string file_stem(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::mcm:
      return "mcm";
    case ScoreKind::glmcm:
      return "glmcm";
    case ScoreKind::msp:
      return "msp";
    case ScoreKind::energy:
      return "energy";
  }
  return "?";
}

ScoreKind score_kind_from_string(const std::string& s) {
  std::string lower;
  for (char c : s)
    if (c != '-' && c != '_') lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "mcm") return ScoreKind::mcm;
  if (lower == "glmcm") return ScoreKind::glmcm;
  if (lower == "msp") return ScoreKind::msp;
  if (lower == "energy") return ScoreKind::energy;
  throw InvalidInput("unknown score '" + s + "'");
}

bool requires_dual_encoder(ScoreKind kind) { return kind == ScoreKind::mcm || kind == ScoreKind::glmcm; }

std::vector<double> score_images(const WeightStore& store, std::span<const LabeledImage> images,
                                 const ClassPrompts& prompts, ScoreKind kind, const ScoreParams& params) {
  params.validate();
  const bool unimodal = store.config().unimodal;
  if (requires_dual_encoder(kind) == unimodal) {
    throw Unsupported("score " + to_string(kind) + " is not available for a " +
                      (unimodal ? "unimodal" : "dual-encoder") + " model");
  }
  ConceptBank bank;
  if (!unimodal) bank = encode_concepts(store, prompts);
  std::vector<double> scores(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    switch (kind) {
      case ScoreKind::mcm:
        scores[i] = mcm_score(iwic_global(encode_image(store, images[i].patches), bank), params.tau);
        break;
      case ScoreKind::glmcm: {
        const EncodedImage img = encode_image(store, images[i].patches);
        scores[i] = glmcm_score(iwic_global(img, bank), iwic_local(img, bank), params.tau, params.tau_local);
        break;
      }
      case ScoreKind::msp:
        scores[i] = msp_score(classify_logits(store, images[i].patches));
        break;
      case ScoreKind::energy:
        scores[i] = energy_score(classify_logits(store, images[i].patches), params.energy_T);
        break;
    }
  });
  return scores;
}

}  // namespace setar
