#include "setar/search.hpp"

#include <algorithm>
#include <map>
#include <optional>

#include "setar/errors.hpp"

namespace setar {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::both:
      return "vision+text";
    case Modality::vision:
      return "vision";
    case Modality::text:
      return "text";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  if (s == "vision+text" || s == "both") return Modality::both;
  if (s == "vision") return Modality::vision;
  if (s == "text") return Modality::text;
  throw InvalidInput("unknown modality '" + s + "'");
}

std::string to_string(SearchAlgorithm a) {
  switch (a) {
    case SearchAlgorithm::sequential:
      return "sequential";
    case SearchAlgorithm::interleaved:
      return "interleaved";
    case SearchAlgorithm::exhaustive:
      return "exhaustive";
  }
  return "?";
}

SearchAlgorithm search_algorithm_from_string(const std::string& s) {
  if (s == "sequential" || s == "setar-s") return SearchAlgorithm::sequential;
  if (s == "interleaved" || s == "mis") return SearchAlgorithm::interleaved;
  if (s == "exhaustive" || s == "les") return SearchAlgorithm::exhaustive;
  throw InvalidInput("unknown search algorithm '" + s + "'");
}

std::vector<double> SearchConfig::default_candidates() {
  std::vector<double> c;
  for (int i = 0; i <= 8; ++i) c.push_back(0.05 * i);
  return c;
}

void SearchConfig::validate() const {
  if (candidates.empty() || candidates.front() != 0.0) {
    throw InvalidInput("ratio candidates must start with 0");
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!(candidates[i] >= 0.0 && candidates[i] < 1.0)) {
      throw InvalidInput("ratio candidate " + std::to_string(candidates[i]) + " outside [0, 1)");
    }
    if (i > 0 && !(candidates[i] > candidates[i - 1])) {
      throw InvalidInput("ratio candidates must be strictly increasing");
    }
  }
  if (weight_type == WeightType::proj || weight_type == WeightType::head) {
    throw InvalidInput("search weight type must be a per-layer matrix; use include_projection for W_p");
  }
}

std::vector<double> RankPlan::ratios() const {
  std::vector<double> r;
  for (const auto& e : entries) r.push_back(e.ratio);
  return r;
}

std::vector<WeightKey> search_order(const ModelConfig& config, const SearchConfig& cfg) {
  std::vector<Tower> towers;
  if (cfg.modality != Modality::text) towers.push_back(Tower::vision);
  if (cfg.modality != Modality::vision && !config.unimodal) towers.push_back(Tower::text);
  if (cfg.modality == Modality::text && config.unimodal) {
    throw Unsupported("text-only search on a unimodal model");
  }

  std::vector<WeightKey> order;
  if (cfg.algorithm == SearchAlgorithm::interleaved) {
    if (cfg.include_projection)
      for (Tower t : towers) order.push_back(tower_key(t, WeightType::proj));
    std::size_t depth = 0;
    for (Tower t : towers) depth = std::max(depth, config.n_layers(t));
    for (std::size_t d = depth; d-- > 0;)
      for (Tower t : towers)
        if (d < config.n_layers(t)) order.push_back(layer_key(t, d, cfg.weight_type));
  } else {
    for (Tower t : towers) {
      if (cfg.include_projection) order.push_back(tower_key(t, WeightType::proj));
      for (std::size_t l = config.n_layers(t); l-- > 0;) order.push_back(layer_key(t, l, cfg.weight_type));
    }
  }
  return order;
}

Matrix approximate_weight(const Matrix& w, double ratio, const PruneStrategy& strategy, const std::string& name) {
  if (ratio == 0.0) return w;
  const SvdTriple t = svd(w, name);
  return low_rank_approx(t, reduced_rank(t.rank_capacity(), ratio), strategy);
}

WeightStore apply_plan(const WeightStore& store, const RankPlan& plan) {
  WeightStore out = store;
  for (const PlanEntry& e : plan.entries) {
    if (!store.config().valid_key(e.key)) {
      throw InvalidInput("plan entry " + to_string(e.key) + " does not exist in this model");
    }
    if (!(e.ratio >= 0.0 && e.ratio < 1.0)) {
      throw InvalidInput("plan ratio for " + to_string(e.key) + " outside [0, 1)");
    }
    if (e.ratio == 0.0) continue;
    out = out.with(e.key, approximate_weight(store.get(e.key), e.ratio, plan.strategy, to_string(e.key)));
  }
  return out;
}

namespace {

class CandidateEvaluator {
 public:
  CandidateEvaluator(std::span<const LabeledImage> val_set, const ClassPrompts& prompts, const SearchConfig& cfg)
      : val_set_(val_set), prompts_(prompts), cfg_(cfg) {}

  DatasetEval evaluate(const WeightStore& s) {
    ++count_;
    return evaluate_dataset(s, val_set_, prompts_, cfg_.loss_params);
  }

  // Replacement for `key` at candidate ratio `ratio`, from the cached SVD.
  Matrix candidate(const WeightStore& original, const WeightKey& key, double ratio) {
    auto it = svd_cache_.find(key);
    if (it == svd_cache_.end()) it = svd_cache_.emplace(key, svd(original.get(key), to_string(key))).first;
    const SvdTriple& t = it->second;
    return low_rank_approx(t, reduced_rank(t.rank_capacity(), ratio), cfg_.strategy);
  }

  DatasetEval evaluate_candidate(const WeightStore& incumbent, const WeightStore& original, const WeightKey& key,
                                 double ratio, Matrix& replacement) {
    try {
      replacement = candidate(original, key, ratio);
      return evaluate(incumbent.with(key, replacement));
    } catch (const NumericError& e) {
      throw NumericError("search at " + to_string(key) + " ratio " + std::to_string(ratio) + ": " + e.what());
    }
  }

  std::size_t count() const { return count_; }

 private:
  std::span<const LabeledImage> val_set_;
  const ClassPrompts& prompts_;
  const SearchConfig& cfg_;
  std::map<WeightKey, SvdTriple> svd_cache_;
  std::size_t count_ = 0;
};

TraceRow make_row(std::size_t step, const WeightKey& key, double ratio, const DatasetEval& ev) {
  TraceRow row;
  row.step = step;
  row.key = key;
  row.best_ratio = ratio;
  row.total_loss = ev.loss.total;
  row.id_loss = ev.loss.id_loss;
  row.ood_loss = ev.loss.ood_loss;
  row.val_acc = 100.0 * ev.accuracy;
  row.ood_patch_percent = 100.0 * ev.loss.ood_patch_fraction;
  return row;
}

void check_inputs(const WeightStore& store, std::span<const LabeledImage> val_set, const SearchConfig& cfg) {
  cfg.validate();
  if (val_set.empty()) throw InvalidInput("search needs a non-empty validation set");
  cfg.loss_params.validate(store.config().n_classes);
}

}  // namespace

SearchResult greedy_search(const WeightStore& store, std::span<const LabeledImage> val_set,
                           const ClassPrompts& prompts, const SearchConfig& cfg) {
  check_inputs(store, val_set, cfg);
  const auto order = search_order(store.config(), cfg);
  CandidateEvaluator eval(val_set, prompts, cfg);

  SearchResult result;
  result.plan.weight_type = cfg.weight_type;
  result.plan.strategy = cfg.strategy;
  result.initial = eval.evaluate(store);
  DatasetEval best = result.initial;
  WeightStore incumbent = store;

  for (std::size_t step = 0; step < order.size(); ++step) {
    const WeightKey& key = order[step];
    double best_ratio = 0.0;
    std::optional<Matrix> best_w;
    for (std::size_t j = 1; j < cfg.candidates.size(); ++j) {
      Matrix w_hat;
      const DatasetEval ev = eval.evaluate_candidate(incumbent, store, key, cfg.candidates[j], w_hat);
      if (ev.loss.total < best.loss.total) {
        best = ev;
        best_ratio = cfg.candidates[j];
        best_w = std::move(w_hat);
      }
    }
    if (best_w) incumbent = incumbent.with(key, std::move(*best_w));
    result.plan.entries.push_back({key, best_ratio});
    result.trace.rows.push_back(make_row(step, key, best_ratio, best));
  }
  result.final_store = std::move(incumbent);
  result.final = best;
  result.loss_evaluations = eval.count();
  return result;
}

SearchResult exhaustive_step_search(const WeightStore& store, std::span<const LabeledImage> val_set,
                                    const ClassPrompts& prompts, const SearchConfig& cfg) {
  check_inputs(store, val_set, cfg);
  const auto order = search_order(store.config(), cfg);
  CandidateEvaluator eval(val_set, prompts, cfg);

  SearchResult result;
  result.plan.weight_type = cfg.weight_type;
  result.plan.strategy = cfg.strategy;
  for (const auto& key : order) result.plan.entries.push_back({key, 0.0});
  result.initial = eval.evaluate(store);
  DatasetEval best = result.initial;
  WeightStore incumbent = store;
  std::vector<bool> committed(order.size(), false);

  for (std::size_t round = 0; round < order.size(); ++round) {
    std::optional<std::size_t> pick;
    double pick_ratio = 0.0;
    Matrix pick_w;
    DatasetEval round_best = best;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (committed[i]) continue;
      for (std::size_t j = 1; j < cfg.candidates.size(); ++j) {
        Matrix w_hat;
        const DatasetEval ev = eval.evaluate_candidate(incumbent, store, order[i], cfg.candidates[j], w_hat);
        if (ev.loss.total < round_best.loss.total) {
          round_best = ev;
          pick = i;
          pick_ratio = cfg.candidates[j];
          pick_w = std::move(w_hat);
        }
      }
    }
    if (!pick) break;
    committed[*pick] = true;
    incumbent = incumbent.with(order[*pick], std::move(pick_w));
    best = round_best;
    result.plan.entries[*pick].ratio = pick_ratio;
    result.trace.rows.push_back(make_row(round, order[*pick], pick_ratio, best));
  }
  result.final_store = std::move(incumbent);
  result.final = best;
  result.loss_evaluations = eval.count();
  return result;
}

SearchResult run_search(const WeightStore& store, std::span<const LabeledImage> val_set,
                        const ClassPrompts& prompts, const SearchConfig& cfg) {
  if (cfg.algorithm == SearchAlgorithm::exhaustive) return exhaustive_step_search(store, val_set, prompts, cfg);
  return greedy_search(store, val_set, prompts, cfg);
}

}  // namespace setar
