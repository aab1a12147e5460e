#include "setar/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "setar/errors.hpp"

namespace setar {

namespace {

void require_scores(const ScoreSet& s) {
  if (s.id_scores.empty() || s.ood_scores.empty()) {
    throw InvalidInput("score set '" + s.score_name + "' needs non-empty ID and OOD scores");
  }
  for (const auto* v : {&s.id_scores, &s.ood_scores})
    for (double x : *v)
      if (!std::isfinite(x)) throw InvalidInput("score set '" + s.score_name + "' has non-finite scores");
}

}  // namespace

double fpr_at_tpr(const ScoreSet& scores, double tpr) {
  require_scores(scores);
  const double lambda = fit_threshold(scores.id_scores, tpr);
  std::size_t accepted = 0;
  for (double s : scores.ood_scores) accepted += static_cast<std::size_t>(detect(s, lambda));
  return static_cast<double>(accepted) / static_cast<double>(scores.ood_scores.size());
}

double auroc(const ScoreSet& scores) {
  require_scores(scores);
  std::vector<double> ood = scores.ood_scores;
  std::sort(ood.begin(), ood.end());
  // Count in twice-units so ties contribute exactly 1 and the sum stays integral.
  std::size_t twice_wins = 0;
  for (double x : scores.id_scores) {
    const auto lo = std::lower_bound(ood.begin(), ood.end(), x);
    const auto hi = std::upper_bound(lo, ood.end(), x);
    twice_wins += 2 * static_cast<std::size_t>(lo - ood.begin()) + static_cast<std::size_t>(hi - lo);
  }
  const double pairs = static_cast<double>(scores.id_scores.size()) * static_cast<double>(ood.size());
  return static_cast<double>(twice_wins) / (2.0 * pairs);
}

EvalReport evaluate(const ScoreSet& scores, double tpr) {
  EvalReport r;
  r.fpr95 = fpr_at_tpr(scores, tpr);
  r.auroc = auroc(scores);
  r.n_id = scores.id_scores.size();
  r.n_ood = scores.ood_scores.size();
  r.score_name = scores.score_name;
  return r;
}

}  // namespace setar
