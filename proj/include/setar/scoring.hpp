#pragma once

#include <span>
#include <string>
#include <vector>

#include "setar/model.hpp"

namespace setar {

struct ScoreParams {
  double tau = 1.0;        // global softmax temperature
  double tau_local = 1.0;  // local (patch) softmax temperature
  double energy_T = 1.0;

  void validate() const;
};

/// Labeled ID/OOD scores for one scoring function. Higher means more ID.
struct ScoreSet {
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
  std::string score_name;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// s^G_c: cosine between the global image feature and each concept.
std::vector<double> iwic_global(const EncodedImage& img, const ConceptBank& bank);
/// s^L_c: max over patches of the patch/concept cosine.
std::vector<double> iwic_local(const EncodedImage& img, const ConceptBank& bank);

/// Numerically stable softmax of values / temperature.
std::vector<double> softmax(std::span<const double> values, double temperature = 1.0);
/// log Σ exp(values), max-shifted.
double log_sum_exp(std::span<const double> values);

double mcm_score(std::span<const double> sims_global, double tau);
double glmcm_score(std::span<const double> sims_global, std::span<const double> sims_local, double tau,
                   double tau_local);
double msp_score(std::span<const double> logits);
/// T·logsumexp(logits/T); sign chosen so that larger means more ID.
double energy_score(std::span<const double> logits, double T);

/// The ⌈(1−tpr)·n⌉-th smallest ID score.
double fit_threshold(std::span<const double> id_scores, double tpr = 0.95);

/// 1 (ID) iff score ≥ lambda.
inline int detect(double score, double lambda) { return score >= lambda ? 1 : 0; }

enum class ScoreKind { mcm, glmcm, msp, energy };

/// Display names "MCM", "GL-MCM", "MSP", "Energy".
std::string to_string(ScoreKind kind);
/// File-name stem "mcm", "glmcm", "msp", "energy".
std::string file_stem(ScoreKind kind);
/// Accepts either display names or file stems (case-insensitive).
ScoreKind score_kind_from_string(const std::string& s);
bool requires_dual_encoder(ScoreKind kind);

/// Scores every image with `kind`; concept features are encoded once.
std::vector<double> score_images(const WeightStore& store, std::span<const LabeledImage> images,
                                 const ClassPrompts& prompts, ScoreKind kind, const ScoreParams& params);

}  // namespace setar
