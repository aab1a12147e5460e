#pragma once

#include <string>

#include "setar/scoring.hpp"

namespace setar {

struct EvalReport {
  double fpr95 = 0.0;
  double auroc = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  std::string score_name;
};

/// Fraction of OOD scores accepted (≥ λ) at the threshold fitted on ID scores.
double fpr_at_tpr(const ScoreSet& scores, double tpr = 0.95);

/// Mann–Whitney estimate: P(id > ood) + ½ P(id = ood). Sort-based, O(n log n).
double auroc(const ScoreSet& scores);

EvalReport evaluate(const ScoreSet& scores, double tpr = 0.95);

}  // namespace setar
