#pragma once

// Experiment configuration, task directories, and the search → eval →
// finetune → eval pipeline that writes every artifact under output_dir.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "setar/finetune.hpp"
#include "setar/io.hpp"
#include "setar/scoring.hpp"
#include "setar/search.hpp"
#include "setar/task.hpp"

namespace setar {

struct ExperimentConfig {
  TaskSpec task;                     // model, seeds and generator parameters
  std::filesystem::path task_dir;    // when set, data and weights are loaded from here
  SearchConfig search;
  std::optional<FtConfig> ft;
  std::vector<FtMode> ft_modes;      // which fine-tuning rows to produce
  std::vector<ScoreKind> scores;
  ScoreParams score_params;
  std::filesystem::path output_dir = "out";

  void validate() const;
};

ExperimentConfig experiment_config_from_json(const json& j);
json to_json(const ExperimentConfig& cfg);

/// Sets `dotted.path` in a JSON object. The value is parsed as JSON when it
/// parses, and taken as a string otherwise.
void apply_override(json& cfg, const std::string& dotted_key, const std::string& value);

json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const json& j);
json to_json(const SearchConfig& cfg);
SearchConfig search_config_from_json(const json& j);
json to_json(const FtConfig& cfg);
FtConfig ft_config_from_json(const json& j);

struct TaskData {
  SyntheticTask task;
  bool has_clean = false;
};

/// task.json, weights_vanilla, weights_clean (optional), and one samples
/// container per split: id_train, id_val, id_test, ood_<name>.
void save_task(const SyntheticTask& task, const std::filesystem::path& dir);
TaskData load_task(const std::filesystem::path& dir);

/// Generated from cfg.task, or loaded from cfg.task_dir.
TaskData prepare_task(const ExperimentConfig& cfg);

/// Scores one store on every OOD set, writes the score CSVs into
/// `dir`, and returns the per-score report rows (one per set plus "Average").
json evaluate_method(const WeightStore& store, const TaskData& data, const ExperimentConfig& cfg,
                     const std::string& method, const std::filesystem::path& dir);

/// Runs the full pipeline and returns report.json's content. On a module
/// error the report holds an error record and the error is rethrown.
json run_pipeline(const ExperimentConfig& cfg);

json error_record(const std::exception& e);

}  // namespace setar
