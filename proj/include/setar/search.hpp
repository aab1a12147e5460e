#pragma once

#include <span>
#include <string>
#include <vector>

#include "setar/linalg.hpp"
#include "setar/loss.hpp"
#include "setar/model.hpp"

namespace setar {

enum class Modality { both, vision, text };

/// sequential = vision top-to-bottom then text (SeTAR-S); interleaved = MIS;
/// exhaustive = per-round best (layer, ratio) pair (LES).
enum class SearchAlgorithm { sequential, interleaved, exhaustive };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);
std::string to_string(SearchAlgorithm a);
SearchAlgorithm search_algorithm_from_string(const std::string& s);

struct SearchConfig {
  std::vector<double> candidates = default_candidates();
  WeightType weight_type = WeightType::up;
  Modality modality = Modality::both;
  SearchAlgorithm algorithm = SearchAlgorithm::sequential;
  PruneStrategy strategy;
  LossParams loss_params;
  /// Also search each tower's projector, right before that tower's layers.
  bool include_projection = false;

  /// 0, 0.05, ..., 0.40
  static std::vector<double> default_candidates();
  void validate() const;
};

struct PlanEntry {
  WeightKey key;
  double ratio = 0.0;

  friend bool operator==(const PlanEntry&, const PlanEntry&) = default;
};

/// Per-matrix rank-reduction ratios in search order.
struct RankPlan {
  std::vector<PlanEntry> entries;
  WeightType weight_type = WeightType::up;
  PruneStrategy strategy;

  std::vector<double> ratios() const;
  friend bool operator==(const RankPlan&, const RankPlan&) = default;
};

struct TraceRow {
  std::size_t step = 0;
  WeightKey key;
  double best_ratio = 0.0;
  double total_loss = 0.0;
  double id_loss = 0.0;
  double ood_loss = 0.0;
  double val_acc = 0.0;            // percent
  double ood_patch_percent = 0.0;  // percent
};

struct SearchTrace {
  std::vector<TraceRow> rows;
};

struct SearchResult {
  RankPlan plan;
  SearchTrace trace;
  WeightStore final_store;
  DatasetEval initial;  // L_0, before any replacement
  DatasetEval final;
  std::size_t loss_evaluations = 0;
};

/// Matrices visited by the configured algorithm, in visiting order.
std::vector<WeightKey> search_order(const ModelConfig& config, const SearchConfig& cfg);

/// Greedy layer-by-layer search; accepts a candidate only when it strictly
/// lowers the running best validation loss.
SearchResult greedy_search(const WeightStore& store, std::span<const LabeledImage> val_set,
                           const ClassPrompts& prompts, const SearchConfig& cfg);

/// Each round commits the single best strictly improving (layer, ratio) pair
/// among the layers not yet committed; stops when nothing improves.
SearchResult exhaustive_step_search(const WeightStore& store, std::span<const LabeledImage> val_set,
                                    const ClassPrompts& prompts, const SearchConfig& cfg);

/// Dispatches on cfg.algorithm.
SearchResult run_search(const WeightStore& store, std::span<const LabeledImage> val_set,
                        const ClassPrompts& prompts, const SearchConfig& cfg);

/// Low-rank replacement of one matrix at the given ratio (ratio 0 returns W unchanged).
Matrix approximate_weight(const Matrix& w, double ratio, const PruneStrategy& strategy,
                          const std::string& name = "matrix");

/// Replays a plan on a store.
WeightStore apply_plan(const WeightStore& store, const RankPlan& plan);

}  // namespace setar
