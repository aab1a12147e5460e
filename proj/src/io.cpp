#include "setar/io.hpp"

#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "setar/errors.hpp"

namespace setar {

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

namespace {

void append_f32(std::vector<std::uint8_t>& out, double x) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

double read_f32(std::span<const std::uint8_t> blob, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(blob[offset + b]) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::vector<std::uint8_t> read_blob(const std::filesystem::path& path) {
  const std::string s = read_text(path);
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

void write_blob(const std::filesystem::path& path, std::span<const std::uint8_t> blob) {
  write_text(path, std::string(blob.begin(), blob.end()));
}

json read_manifest(const std::filesystem::path& dir, const std::string& name, const char* format) {
  const auto path = dir / (name + ".manifest.json");
  json m;
  try {
    m = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw InvalidInput("malformed manifest " + path.string() + ": " + e.what());
  }
  if (m.value("format", "") != format) throw InvalidInput(path.string() + " is not a " + format + " manifest");
  return m;
}

std::vector<std::uint8_t> checked_blob(const std::filesystem::path& dir, const json& m) {
  const auto path = dir / m.at("blob").get<std::string>();
  auto blob = read_blob(path);
  if (blob.size() != m.at("byte_length").get<std::size_t>()) {
    throw InvalidInput(path.string() + " has " + std::to_string(blob.size()) + " bytes, manifest says " +
                       std::to_string(m.at("byte_length").get<std::size_t>()));
  }
  if (crc32_of(blob) != m.at("crc32").get<std::uint32_t>()) throw InvalidInput(path.string() + ": CRC32 mismatch");
  return blob;
}

Matrix matrix_from_blob(std::span<const std::uint8_t> blob, std::size_t offset, std::size_t rows, std::size_t cols) {
  if (offset + rows * cols * 4 > blob.size()) throw InvalidInput("container entry runs past the end of the blob");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) m.data()[i] = read_f32(blob, offset + 4 * i);
  return m;
}

}  // namespace

json to_json(const ModelConfig& cfg) {
  return json{{"n_vision_layers", cfg.n_vision_layers},
              {"n_text_layers", cfg.n_text_layers},
              {"hidden_dim", cfg.hidden_dim},
              {"feature_dim", cfg.feature_dim},
              {"n_patches", cfg.n_patches},
              {"ffn_dim", cfg.ffn_dim},
              {"n_classes", cfg.n_classes},
              {"unimodal", cfg.unimodal}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_vision_layers = j.value("n_vision_layers", c.n_vision_layers);
  c.n_text_layers = j.value("n_text_layers", c.n_text_layers);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.n_patches = j.value("n_patches", c.n_patches);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.unimodal = j.value("unimodal", c.unimodal);
  c.validate();
  return c;
}

void save_weights(const WeightStore& store, const std::filesystem::path& dir, const std::string& name) {
  std::vector<std::uint8_t> blob;
  json entries = json::array();
  for (const WeightKey& key : store.keys()) {
    const Matrix& m = store.get(key);
    entries.push_back({{"key", to_string(key)},
                       {"tower", to_string(key.tower)},
                       {"layer", key.layer},
                       {"weight_type", to_string(key.type)},
                       {"rows", m.rows()},
                       {"cols", m.cols()},
                       {"offset", blob.size()}});
    for (double x : m.data()) append_f32(blob, x);
  }
  const std::string blob_name = name + ".weights.bin";
  json manifest{{"format", "setar-weights"},
                {"version", 1},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"config", to_json(store.config())},
                {"blob", blob_name},
                {"byte_length", blob.size()},
                {"crc32", crc32_of(blob)},
                {"entries", entries}};
  std::filesystem::create_directories(dir);
  write_blob(dir / blob_name, blob);
  write_text(dir / (name + ".manifest.json"), manifest.dump(2) + "\n");
}

WeightStore load_weights(const std::filesystem::path& dir, const std::string& name) {
  const json m = read_manifest(dir, name, "setar-weights");
  const auto blob = checked_blob(dir, m);
  const ModelConfig cfg = model_config_from_json(m.at("config"));
  std::map<WeightKey, Matrix> entries;
  for (const auto& e : m.at("entries")) {
    const WeightKey key = weight_key_from_string(e.at("key").get<std::string>());
    entries.emplace(key, matrix_from_blob(blob, e.at("offset").get<std::size_t>(), e.at("rows").get<std::size_t>(),
                                          e.at("cols").get<std::size_t>()));
  }
  return WeightStore(cfg, std::move(entries));
}

void save_samples(std::span<const LabeledImage> samples, const std::filesystem::path& dir, const std::string& name) {
  std::vector<std::uint8_t> blob;
  json entries = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    entries.push_back({{"id", name + "-" + std::to_string(i)},
                       {"label", s.label},
                       {"rows", s.patches.rows()},
                       {"cols", s.patches.cols()},
                       {"offset", blob.size()}});
    for (double x : s.patches.data()) append_f32(blob, x);
  }
  const std::string blob_name = name + ".samples.bin";
  json manifest{{"format", "setar-samples"},
                {"version", 1},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"blob", blob_name},
                {"byte_length", blob.size()},
                {"crc32", crc32_of(blob)},
                {"entries", entries}};
  std::filesystem::create_directories(dir);
  write_blob(dir / blob_name, blob);
  write_text(dir / (name + ".manifest.json"), manifest.dump(2) + "\n");
}

std::vector<LabeledImage> load_samples(const std::filesystem::path& dir, const std::string& name) {
  const json m = read_manifest(dir, name, "setar-samples");
  const auto blob = checked_blob(dir, m);
  std::vector<LabeledImage> out;
  for (const auto& e : m.at("entries")) {
    LabeledImage s;
    s.label = e.at("label").get<std::size_t>();
    s.patches = matrix_from_blob(blob, e.at("offset").get<std::size_t>(), e.at("rows").get<std::size_t>(),
                                 e.at("cols").get<std::size_t>());
    out.push_back(std::move(s));
  }
  return out;
}

json to_json(const RankPlan& plan) {
  json entries = json::array();
  for (const auto& e : plan.entries) {
    entries.push_back({{"tower", to_string(e.key.tower)},
                       {"layer", e.key.layer},
                       {"weight_type", to_string(e.key.type)},
                       {"ratio", e.ratio}});
  }
  return json{{"weight_type", to_string(plan.weight_type)},
              {"strategy", {{"kind", to_string(plan.strategy.kind)}, {"seed", plan.strategy.seed}}},
              {"entries", entries}};
}

RankPlan rank_plan_from_json(const json& j) {
  RankPlan plan;
  plan.weight_type = weight_type_from_string(j.at("weight_type").get<std::string>());
  plan.strategy.kind = prune_kind_from_string(j.at("strategy").at("kind").get<std::string>());
  plan.strategy.seed = j.at("strategy").value("seed", std::uint64_t{0});
  for (const auto& e : j.at("entries")) {
    PlanEntry pe;
    pe.key.tower = tower_from_string(e.at("tower").get<std::string>());
    pe.key.type = weight_type_from_string(e.at("weight_type").get<std::string>());
    pe.key.layer = pe.key.tower_level() ? 0 : e.at("layer").get<std::size_t>();
    pe.ratio = e.at("ratio").get<double>();
    plan.entries.push_back(pe);
  }
  return plan;
}

std::string trace_csv(const SearchTrace& trace) {
  std::string out(kTraceHeader);
  out += '\n';
  for (const auto& r : trace.rows) {
    out += std::to_string(r.step) + ',' + (r.key.tower == Tower::vision ? "visual" : "text") + ',' +
           to_string(r.key.type) + ',' + std::to_string(r.key.layer) + ',' + format_double(r.best_ratio) + ',' +
           format_double(r.total_loss) + ',' + format_double(r.id_loss) + ',' + format_double(r.ood_loss) + ',' +
           format_double(r.val_acc) + ',' + format_double(r.ood_patch_percent) + '\n';
  }
  return out;
}

std::string scores_csv(const ScoreSet& scores, const std::string& id_prefix, const std::string& ood_prefix) {
  std::string out(kScoresHeader);
  out += '\n';
  for (std::size_t i = 0; i < scores.id_scores.size(); ++i)
    out += id_prefix + "-" + std::to_string(i) + ",id," + format_double(scores.id_scores[i]) + '\n';
  for (std::size_t i = 0; i < scores.ood_scores.size(); ++i)
    out += ood_prefix + "-" + std::to_string(i) + ",ood," + format_double(scores.ood_scores[i]) + '\n';
  return out;
}

ScoreSet parse_scores_csv(const std::string& text, const std::string& score_name) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kScoresHeader) throw InvalidInput("score CSV has an unexpected header");
  ScoreSet s;
  s.score_name = score_name;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw InvalidInput("score CSV line " + std::to_string(lineno) + " is malformed");
    }
    const std::string label = line.substr(c1 + 1, c2 - c1 - 1);
    double value = 0.0;
    const char* first = line.data() + c2 + 1;
    const char* last = line.data() + line.size();
    if (std::from_chars(first, last, value).ec != std::errc{}) {
      throw InvalidInput("score CSV line " + std::to_string(lineno) + " has a bad score");
    }
    if (label == "id") {
      s.id_scores.push_back(value);
    } else if (label == "ood") {
      s.ood_scores.push_back(value);
    } else {
      throw InvalidInput("score CSV line " + std::to_string(lineno) + " has label '" + label + "'");
    }
  }
  return s;
}

std::string loss_curve_csv(std::span<const LossBreakdown> curve) {
  std::string out(kLossCurveHeader);
  out += '\n';
  for (std::size_t e = 0; e < curve.size(); ++e) {
    out += std::to_string(e) + ',' + format_double(curve[e].total) + ',' + format_double(curve[e].id_loss) + ',' +
           format_double(curve[e].ood_loss) + '\n';
  }
  return out;
}

json to_json(const EvalReport& r) {
  return json{{"score", r.score_name}, {"fpr95", r.fpr95}, {"auroc", r.auroc}, {"n_id", r.n_id}, {"n_ood", r.n_ood}};
}

}  // namespace setar
