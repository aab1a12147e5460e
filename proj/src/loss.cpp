#include "setar/loss.hpp"

#include <algorithm>
#include <cmath>

#include "setar/errors.hpp"
#include "setar/parallel.hpp"
#include "setar/scoring.hpp"

namespace setar {

void LossParams::validate(std::size_t n_classes) const {
  if (!(lambda_ood >= 0.0) || !std::isfinite(lambda_ood)) throw InvalidInput("lambda_ood must be >= 0");
  if (top_k > n_classes) {
    throw InvalidInput("top_k " + std::to_string(top_k) + " exceeds class count " + std::to_string(n_classes));
  }
  if (!(tau_local > 0.0)) throw InvalidInput("tau_local must be positive");
}

Matrix patch_probs(const EncodedImage& img, const ConceptBank& bank, double tau_local) {
  const std::size_t k = bank.features.rows();
  Matrix probs(img.local.rows(), k);
  std::vector<double> sims(k);
  for (std::size_t i = 0; i < img.local.rows(); ++i) {
    for (std::size_t c = 0; c < k; ++c) sims[c] = cosine_similarity(img.local.row(i), bank.features.row(c));
    const auto p = softmax(sims, tau_local);
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  return probs;
}

std::vector<std::size_t> ood_regions(const Matrix& probs, std::size_t true_class, std::size_t top_k) {
  if (true_class >= probs.cols()) throw InvalidInput("ood_regions: true class out of range");
  if (top_k > probs.cols()) throw InvalidInput("ood_regions: top_k exceeds class count");
  std::vector<std::size_t> regions;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const double pt = probs(i, true_class);
    std::size_t rank = 1;
    for (std::size_t c = 0; c < probs.cols(); ++c) {
      if (c == true_class) continue;
      const double pc = probs(i, c);
      if (pc > pt || (pc == pt && c < true_class)) ++rank;
    }
    if (rank > top_k) regions.push_back(i);
  }
  return regions;
}

namespace {

double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

// d cos(a, b) / d a, scaled by `weight` and added into out.
void add_cosine_grad(std::span<const double> a, std::span<const double> b, double cos_ab, double weight,
                     std::span<double> out) {
  const double na = norm2(a);
  const double nb = norm2(b);
  const double inv = 1.0 / (na * nb);
  const double self = cos_ab / (na * na);
  for (std::size_t j = 0; j < a.size(); ++j) out[j] += weight * (b[j] * inv - self * a[j]);
}

LossBreakdown locoop_impl(const EncodedImage& img, const ConceptBank& bank, std::size_t true_class,
                          const LossParams& params, FeatureGrads* grads) {
  const std::size_t k = bank.features.rows();
  if (k == 0) throw InvalidInput("locoop_loss: empty concept bank");
  if (true_class >= k) throw InvalidInput("locoop_loss: true class out of range");
  params.validate(k);
  const double tau = params.tau_local;

  const auto sims = iwic_global(img, bank);
  const auto q = softmax(sims, tau);
  LossBreakdown out;
  out.id_loss = -std::log(q[true_class]);

  const std::size_t l = img.local.rows();
  Matrix cos_local(l, k);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t c = 0; c < k; ++c) cos_local(i, c) = cosine_similarity(img.local.row(i), bank.features.row(c));
  Matrix probs(l, k);
  for (std::size_t i = 0; i < l; ++i) {
    const auto p = softmax(cos_local.row(i), tau);
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  const auto regions = ood_regions(probs, true_class, params.top_k);
  double neg_entropy_sum = 0.0;
  for (std::size_t j : regions)
    for (std::size_t c = 0; c < k; ++c) neg_entropy_sum += xlogx(probs(j, c));
  out.ood_loss = regions.empty() ? 0.0 : neg_entropy_sum / static_cast<double>(regions.size());
  out.ood_patch_fraction = l == 0 ? 0.0 : static_cast<double>(regions.size()) / static_cast<double>(l);
  out.total = out.id_loss + params.lambda_ood * out.ood_loss;

  if (grads) {
    const std::size_t d = img.global.size();
    grads->d_global.assign(d, 0.0);
    grads->d_local = Matrix(l, d);
    grads->d_concepts = Matrix(k, d);
    grads->d_logits.clear();
    for (std::size_t c = 0; c < k; ++c) {
      const double ds = (q[c] - (c == true_class ? 1.0 : 0.0)) / tau;
      if (ds == 0.0) continue;
      add_cosine_grad(img.global, bank.features.row(c), sims[c], ds, grads->d_global);
      add_cosine_grad(bank.features.row(c), img.global, sims[c], ds, grads->d_concepts.row(c));
    }
    if (!regions.empty() && params.lambda_ood != 0.0) {
      const double w = params.lambda_ood / static_cast<double>(regions.size());
      for (std::size_t j : regions) {
        double mean_log = 0.0;
        for (std::size_t c = 0; c < k; ++c) mean_log += xlogx(probs(j, c));
        for (std::size_t c = 0; c < k; ++c) {
          const double p = probs(j, c);
          if (p == 0.0) continue;
          const double dt = w * p * (std::log(p) - mean_log) / tau;
          add_cosine_grad(img.local.row(j), bank.features.row(c), cos_local(j, c), dt, grads->d_local.row(j));
          add_cosine_grad(bank.features.row(c), img.local.row(j), cos_local(j, c), dt, grads->d_concepts.row(c));
        }
      }
    }
  }
  return out;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

LossBreakdown locoop_loss(const EncodedImage& img, const ConceptBank& bank, std::size_t true_class,
                          const LossParams& params) {
  return locoop_impl(img, bank, true_class, params, nullptr);
}

LossBreakdown locoop_loss_grad(const EncodedImage& img, const ConceptBank& bank, std::size_t true_class,
                               const LossParams& params, FeatureGrads& grads) {
  return locoop_impl(img, bank, true_class, params, &grads);
}

double cross_entropy(std::span<const double> logits, std::size_t true_class) {
  if (true_class >= logits.size()) throw InvalidInput("cross_entropy: true class out of range");
  return log_sum_exp(logits) - logits[true_class];
}

DatasetEval evaluate_dataset(const WeightStore& store, std::span<const LabeledImage> samples,
                             const ClassPrompts& prompts, const LossParams& params) {
  if (samples.empty()) throw InvalidInput("dataset loss over an empty set");
  const bool unimodal = store.config().unimodal;
  params.validate(store.config().n_classes);
  ConceptBank bank;
  if (!unimodal) bank = encode_concepts(store, prompts);

  const std::size_t n = samples.size();
  std::vector<double> total(n), id(n), ood(n), frac(n), hit(n);
  parallel_for(n, [&](std::size_t i) {
    const LabeledImage& s = samples[i];
    if (unimodal) {
      const auto logits = classify_logits(store, s.patches);
      id[i] = cross_entropy(logits, s.label);
      total[i] = id[i];
      ood[i] = 0.0;
      frac[i] = 0.0;
      hit[i] = argmax(logits) == s.label ? 1.0 : 0.0;
    } else {
      const EncodedImage img = encode_image(store, s.patches);
      const LossBreakdown b = locoop_loss(img, bank, s.label, params);
      total[i] = b.total;
      id[i] = b.id_loss;
      ood[i] = b.ood_loss;
      frac[i] = b.ood_patch_fraction;
      hit[i] = argmax(iwic_global(img, bank)) == s.label ? 1.0 : 0.0;
    }
  });
  const double dn = static_cast<double>(n);
  DatasetEval out;
  out.loss.total = pairwise_sum(total) / dn;
  out.loss.id_loss = pairwise_sum(id) / dn;
  out.loss.ood_loss = pairwise_sum(ood) / dn;
  out.loss.ood_patch_fraction = pairwise_sum(frac) / dn;
  out.accuracy = pairwise_sum(hit) / dn;
  return out;
}

LossBreakdown dataset_loss(const WeightStore& store, std::span<const LabeledImage> samples,
                           const ClassPrompts& prompts, const LossParams& params) {
  return evaluate_dataset(store, samples, prompts, params).loss;
}

}  // namespace setar
