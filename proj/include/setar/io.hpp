#pragma once

// File formats: float32 weight/sample containers, CSV score/trace/loss files,
// and JSON encodings of configs, plans and reports.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "setar/finetune.hpp"
#include "setar/metrics.hpp"
#include "setar/model.hpp"
#include "setar/search.hpp"

namespace setar {

using nlohmann::json;

inline constexpr std::string_view kTraceHeader =
    "step,tower_type,weight_type,layer_num,best_ratio,total_loss,id_loss,ood_loss,val_acc,ood_patch_percent";
inline constexpr std::string_view kScoresHeader = "sample_id,label,score";
inline constexpr std::string_view kLossCurveHeader = "epoch,total,id,ood";

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

/// Writes `<dir>/<name>.manifest.json` and `<dir>/<name>.weights.bin`
/// (float32 little-endian, row-major, manifest key order).
void save_weights(const WeightStore& store, const std::filesystem::path& dir, const std::string& name);
WeightStore load_weights(const std::filesystem::path& dir, const std::string& name);

/// Same convention for labelled patch-token matrices; blob is `<name>.samples.bin`.
void save_samples(std::span<const LabeledImage> samples, const std::filesystem::path& dir, const std::string& name);
std::vector<LabeledImage> load_samples(const std::filesystem::path& dir, const std::string& name);

json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const json& j);

json to_json(const RankPlan& plan);
RankPlan rank_plan_from_json(const json& j);

/// One row per search step; towers are written as "visual"/"text".
std::string trace_csv(const SearchTrace& trace);

/// One row per sample; `sample_prefix` names rows "<prefix>-<i>".
std::string scores_csv(const ScoreSet& scores, const std::string& id_prefix, const std::string& ood_prefix);
ScoreSet parse_scores_csv(const std::string& text, const std::string& score_name);

std::string loss_curve_csv(std::span<const LossBreakdown> curve);

json to_json(const EvalReport& r);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Shortest round-trippable decimal form of a double.
std::string format_double(double x);

}  // namespace setar
