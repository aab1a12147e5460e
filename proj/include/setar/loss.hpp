#pragma once

#include <span>
#include <vector>

#include "setar/linalg.hpp"
#include "setar/model.hpp"

namespace setar {

struct LossParams {
  double lambda_ood = 0.25;  // weight of the OOD entropy term
  std::size_t top_k = 1;     // rank cutoff selecting ID-irrelevant patches
  double tau_local = 1.0;    // temperature of the patch and global softmaxes

  void validate(std::size_t n_classes) const;
};

struct LossBreakdown {
  double total = 0.0;
  double id_loss = 0.0;
  double ood_loss = 0.0;
  double ood_patch_fraction = 0.0;
};

/// Per-patch softmax over classes of cos(p_i, h_c) / tau_local.
Matrix patch_probs(const EncodedImage& img, const ConceptBank& bank, double tau_local);

/// Patches whose true-class probability ranks below top_k (1 = largest;
/// ties rank the lower class index first).
std::vector<std::size_t> ood_regions(const Matrix& probs, std::size_t true_class, std::size_t top_k);

/// LoCoOp: cross-entropy of the global softmax plus lambda_ood times the mean
/// negative entropy over the ID-irrelevant patches.
LossBreakdown locoop_loss(const EncodedImage& img, const ConceptBank& bank, std::size_t true_class,
                          const LossParams& params);

/// Gradients of a per-sample loss with respect to the encoder outputs.
struct FeatureGrads {
  std::vector<double> d_global;
  Matrix d_local;
  Matrix d_concepts;  // zero-sized for unimodal models
  std::vector<double> d_logits;
};

LossBreakdown locoop_loss_grad(const EncodedImage& img, const ConceptBank& bank, std::size_t true_class,
                               const LossParams& params, FeatureGrads& grads);

/// Plain cross-entropy over classifier logits (unimodal path).
double cross_entropy(std::span<const double> logits, std::size_t true_class);

struct DatasetEval {
  LossBreakdown loss;  // arithmetic means over samples
  double accuracy = 0.0;
};

/// Mean LoCoOp loss over a labelled set, plus argmax accuracy. Unimodal
/// stores use logit cross-entropy with zero OOD term.
DatasetEval evaluate_dataset(const WeightStore& store, std::span<const LabeledImage> samples,
                             const ClassPrompts& prompts, const LossParams& params);

LossBreakdown dataset_loss(const WeightStore& store, std::span<const LabeledImage> samples,
                           const ClassPrompts& prompts, const LossParams& params);

}  // namespace setar
