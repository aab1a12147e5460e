#include "setar/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "setar/backprop.hpp"
#include "setar/errors.hpp"
#include "setar/rng.hpp"

namespace setar {

std::string to_string(Tower tower) { return tower == Tower::vision ? "vision" : "text"; }

std::string to_string(WeightType type) {
  switch (type) {
    case WeightType::q:
      return "W_q";
    case WeightType::k:
      return "W_k";
    case WeightType::v:
      return "W_v";
    case WeightType::o:
      return "W_o";
    case WeightType::up:
      return "W_up";
    case WeightType::down:
      return "W_down";
    case WeightType::proj:
      return "W_p";
    case WeightType::head:
      return "head";
  }
  return "?";
}

Tower tower_from_string(const std::string& s) {
  if (s == "vision" || s == "visual") return Tower::vision;
  if (s == "text") return Tower::text;
  throw InvalidInput("unknown tower '" + s + "'");
}

WeightType weight_type_from_string(const std::string& s) {
  for (auto t : {WeightType::q, WeightType::k, WeightType::v, WeightType::o, WeightType::up,
                 WeightType::down, WeightType::proj, WeightType::head}) {
    if (to_string(t) == s) return t;
  }
  throw InvalidInput("unknown weight type '" + s + "'");
}

WeightKey layer_key(Tower tower, std::size_t layer, WeightType type) { return {tower, layer, type}; }
WeightKey tower_key(Tower tower, WeightType type) { return {tower, 0, type}; }

std::string to_string(const WeightKey& key) {
  if (key.tower_level()) return to_string(key.tower) + "." + to_string(key.type);
  return to_string(key.tower) + "." + std::to_string(key.layer) + "." + to_string(key.type);
}

WeightKey weight_key_from_string(const std::string& s) {
  const auto first = s.find('.');
  if (first == std::string::npos) throw InvalidInput("malformed weight key '" + s + "'");
  const Tower tower = tower_from_string(s.substr(0, first));
  const auto second = s.find('.', first + 1);
  if (second == std::string::npos) {
    const WeightType type = weight_type_from_string(s.substr(first + 1));
    if (type != WeightType::proj && type != WeightType::head) {
      throw InvalidInput("weight key '" + s + "' is missing a layer index");
    }
    return tower_key(tower, type);
  }
  const std::string layer_text = s.substr(first + 1, second - first - 1);
  if (layer_text.empty() || !std::all_of(layer_text.begin(), layer_text.end(), ::isdigit)) {
    throw InvalidInput("malformed layer index in weight key '" + s + "'");
  }
  const WeightType type = weight_type_from_string(s.substr(second + 1));
  if (type == WeightType::proj || type == WeightType::head) {
    throw InvalidInput("weight key '" + s + "': tower-level weights take no layer index");
  }
  return layer_key(tower, std::stoul(layer_text), type);
}

void ModelConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw InvalidInput(std::string("model config: ") + name + " must be >= 1");
  };
  positive(n_vision_layers, "n_vision_layers");
  positive(n_text_layers, "n_text_layers");
  positive(hidden_dim, "hidden_dim");
  positive(feature_dim, "feature_dim");
  positive(n_patches, "n_patches");
  positive(ffn_dim, "ffn_dim");
  positive(n_classes, "n_classes");
  if (ffn_dim < hidden_dim) throw InvalidInput("model config: ffn_dim must be >= hidden_dim");
}

std::size_t ModelConfig::n_layers(Tower tower) const {
  return tower == Tower::vision ? n_vision_layers : n_text_layers;
}

bool ModelConfig::valid_key(const WeightKey& key) const {
  if (!has_tower(key.tower)) return false;
  if (key.type == WeightType::head) return unimodal && key.tower == Tower::vision && key.layer == 0;
  if (key.type == WeightType::proj) return key.layer == 0;
  return key.layer < n_layers(key.tower);
}

std::pair<std::size_t, std::size_t> ModelConfig::shape(const WeightKey& key) const {
  if (!valid_key(key)) throw InvalidInput("weight key " + to_string(key) + " is not valid for this model");
  switch (key.type) {
    case WeightType::q:
    case WeightType::k:
    case WeightType::v:
    case WeightType::o:
      return {hidden_dim, hidden_dim};
    case WeightType::up:
      return {hidden_dim, ffn_dim};
    case WeightType::down:
      return {ffn_dim, hidden_dim};
    case WeightType::proj:
      return {hidden_dim, feature_dim};
    case WeightType::head:
      return {feature_dim, n_classes};
  }
  return {0, 0};
}

std::vector<WeightKey> ModelConfig::keys() const {
  std::vector<WeightKey> out;
  constexpr WeightType kLayerTypes[] = {WeightType::q,  WeightType::k,  WeightType::v,
                                        WeightType::o,  WeightType::up, WeightType::down};
  for (Tower tower : {Tower::vision, Tower::text}) {
    if (!has_tower(tower)) continue;
    for (std::size_t l = 0; l < n_layers(tower); ++l)
      for (WeightType t : kLayerTypes) out.push_back(layer_key(tower, l, t));
    out.push_back(tower_key(tower, WeightType::proj));
  }
  if (unimodal) out.push_back(tower_key(Tower::vision, WeightType::head));
  return out;
}

WeightStore::WeightStore(ModelConfig config, std::map<WeightKey, Matrix> entries)
    : config_(std::move(config)) {
  config_.validate();
  for (const WeightKey& key : config_.keys()) {
    auto it = entries.find(key);
    if (it == entries.end()) throw InvalidInput("weight store is missing " + to_string(key));
    const auto [r, c] = config_.shape(key);
    if (it->second.rows() != r || it->second.cols() != c) {
      throw InvalidInput("weight " + to_string(key) + " has shape " + std::to_string(it->second.rows()) +
                         "x" + std::to_string(it->second.cols()) + ", expected " + std::to_string(r) +
                         "x" + std::to_string(c));
    }
    if (!it->second.all_finite()) throw InvalidInput("weight " + to_string(key) + " has non-finite entries");
    entries_.emplace(key, std::make_shared<const Matrix>(std::move(it->second)));
    entries.erase(it);
  }
  if (!entries.empty()) {
    throw InvalidInput("weight store has unexpected entry " + to_string(entries.begin()->first));
  }
}

const Matrix& WeightStore::get(const WeightKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvalidInput("no weight " + to_string(key) + " in store");
  return *it->second;
}

WeightStore WeightStore::with(const WeightKey& key, Matrix m) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw InvalidInput("no weight " + to_string(key) + " in store");
  if (m.rows() != it->second->rows() || m.cols() != it->second->cols()) {
    throw InvalidInput("replacement for " + to_string(key) + " has shape " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(it->second->rows()) + "x" +
                       std::to_string(it->second->cols()));
  }
  if (!m.all_finite()) throw InvalidInput("replacement for " + to_string(key) + " has non-finite entries");
  WeightStore out = *this;
  out.entries_[key] = std::make_shared<const Matrix>(std::move(m));
  return out;
}

std::vector<WeightKey> WeightStore::keys() const { return config_.keys(); }

bool operator==(const WeightStore& a, const WeightStore& b) {
  if (!(a.config_ == b.config_) || a.entries_.size() != b.entries_.size()) return false;
  for (const auto& [key, m] : a.entries_) {
    auto it = b.entries_.find(key);
    if (it == b.entries_.end()) return false;
    if (it->second != m && !(*it->second == *m)) return false;
  }
  return true;
}

WeightStore init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::map<WeightKey, Matrix> entries;
  std::uint64_t index = 0;
  for (const WeightKey& key : config.keys()) {
    const auto [r, c] = config.shape(key);
    Rng rng(mix_seed(seed, index++));
    const double scale = 1.0 / std::sqrt(static_cast<double>(r));
    Matrix m(r, c);
    for (double& x : m.data()) x = rng.uniform(-scale, scale);
    entries.emplace(key, std::move(m));
  }
  return WeightStore(config, std::move(entries));
}

TokenSeq tokenize_prompt(const std::string& class_name) {
  // 0 = pad, 1 = eos, 2..5 = "a photo of a", 6 + byte for the name.
  TokenSeq seq = {2, 3, 4, 5};
  for (unsigned char ch : class_name) seq.push_back(6 + static_cast<int>(ch));
  seq.push_back(kEosToken);
  return seq;
}

ClassPrompts ClassPrompts::from_names(std::vector<std::string> names) {
  ClassPrompts p;
  for (const auto& n : names) p.tokens.push_back(tokenize_prompt(n));
  p.names = std::move(names);
  return p;
}

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

std::size_t eos_position(const TokenSeq& tokens) {
  auto it = std::find(tokens.begin(), tokens.end(), kEosToken);
  if (it == tokens.end()) throw InvalidInput("prompt has no [eos] token");
  return static_cast<std::size_t>(it - tokens.begin());
}

Matrix vision_tokens(const Matrix& patches) {
  Matrix x(patches.rows() + 1, patches.cols());
  for (std::size_t i = 0; i < patches.rows(); ++i) {
    for (std::size_t j = 0; j < patches.cols(); ++j) {
      x(i + 1, j) = patches(i, j);
      x(0, j) += patches(i, j);
    }
  }
  for (std::size_t j = 0; j < patches.cols(); ++j) x(0, j) /= static_cast<double>(patches.rows());
  return x;
}

Matrix text_tokens(const TokenSeq& tokens, std::size_t hidden_dim) {
  Matrix x(tokens.size(), hidden_dim);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    for (std::size_t j = 0; j < hidden_dim; ++j) {
      const std::uint64_t h = mix_seed(static_cast<std::uint64_t>(tokens[p]) + 0x7e57ULL, j);
      const double emb = (static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0) * std::sqrt(3.0);
      const double freq = std::pow(10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(hidden_dim));
      const double pos = (j % 2 == 0) ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
      x(p, j) = emb + 0.5 * pos;
    }
  }
  return x;
}

namespace {

constexpr double kLayerNormEps = 1e-5;

Matrix layer_norm(const Matrix& x, std::vector<double>& inv_std) {
  Matrix y(x.rows(), x.cols());
  inv_std.resize(x.rows());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = (row[j] - mean) * is;
  }
  return y;
}

void softmax_rows_inplace(Matrix& s, bool causal) {
  for (std::size_t i = 0; i < s.rows(); ++i) {
    const std::size_t limit = causal ? i + 1 : s.cols();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, s(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (j < limit) {
        s(i, j) = std::exp(s(i, j) - mx);
        sum += s(i, j);
      } else {
        s(i, j) = 0.0;
      }
    }
    for (std::size_t j = 0; j < limit; ++j) s(i, j) /= sum;
  }
}

}  // namespace

TowerTrace run_tower(const WeightStore& store, Tower tower, Matrix x0, bool keep_cache) {
  const ModelConfig& cfg = store.config();
  if (!cfg.has_tower(tower)) throw Unsupported("model has no " + to_string(tower) + " tower");
  if (x0.cols() != cfg.hidden_dim) throw InvalidInput("token width does not match hidden_dim");
  const bool causal = tower == Tower::text;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));

  TowerTrace trace;
  trace.tower = tower;
  Matrix x = std::move(x0);
  for (std::size_t l = 0; l < cfg.n_layers(tower); ++l) {
    LayerCache c;
    std::vector<double> is1;
    Matrix n1 = layer_norm(x, is1);
    Matrix q = matmul(n1, store.get(layer_key(tower, l, WeightType::q)));
    Matrix k = matmul(n1, store.get(layer_key(tower, l, WeightType::k)));
    Matrix v = matmul(n1, store.get(layer_key(tower, l, WeightType::v)));
    Matrix attn = scale * matmul_nt(q, k);
    softmax_rows_inplace(attn, causal);
    Matrix h = matmul(attn, v);
    Matrix x1 = x + matmul(h, store.get(layer_key(tower, l, WeightType::o)));
    std::vector<double> is2;
    Matrix n2 = layer_norm(x1, is2);
    Matrix u = matmul(n2, store.get(layer_key(tower, l, WeightType::up)));
    Matrix g = u;
    for (double& e : g.data()) e = gelu(e);
    Matrix x2 = x1 + matmul(g, store.get(layer_key(tower, l, WeightType::down)));
    if (!x2.all_finite()) {
      throw NumericError("non-finite activation in " + to_string(tower) + " layer " + std::to_string(l));
    }
    if (keep_cache) {
      c.x_in = std::move(x);
      c.n1 = std::move(n1);
      c.inv_std1 = std::move(is1);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.attn = std::move(attn);
      c.h = std::move(h);
      c.x1 = std::move(x1);
      c.n2 = std::move(n2);
      c.inv_std2 = std::move(is2);
      c.u = std::move(u);
      c.g = std::move(g);
      trace.layers.push_back(std::move(c));
    }
    x = std::move(x2);
  }
  trace.output = std::move(x);
  return trace;
}

EncodedImage encode_image(const WeightStore& store, const Matrix& patches) {
  const ModelConfig& cfg = store.config();
  if (patches.rows() != cfg.n_patches || patches.cols() != cfg.hidden_dim) {
    throw InvalidInput("image has shape " + std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()) +
                       ", expected " + std::to_string(cfg.n_patches) + "x" + std::to_string(cfg.hidden_dim));
  }
  if (!patches.all_finite()) throw InvalidInput("image has non-finite entries");
  const TowerTrace trace = run_tower(store, Tower::vision, vision_tokens(patches), false);
  const Matrix feats = matmul(trace.output, store.get(tower_key(Tower::vision, WeightType::proj)));
  EncodedImage out;
  out.global.assign(feats.row(0).begin(), feats.row(0).end());
  out.local = Matrix(cfg.n_patches, cfg.feature_dim);
  for (std::size_t i = 0; i < cfg.n_patches; ++i)
    std::copy(feats.row(i + 1).begin(), feats.row(i + 1).end(), out.local.row(i).begin());
  return out;
}

ConceptBank encode_concepts(const WeightStore& store, const ClassPrompts& prompts) {
  const ModelConfig& cfg = store.config();
  if (cfg.unimodal) throw Unsupported("encode_concepts: unimodal model has no text tower");
  if (prompts.tokens.size() != prompts.names.size()) throw InvalidInput("prompt/name count mismatch");
  const Matrix& proj = store.get(tower_key(Tower::text, WeightType::proj));
  ConceptBank bank;
  bank.class_names = prompts.names;
  bank.features = Matrix(prompts.size(), cfg.feature_dim);
  for (std::size_t c = 0; c < prompts.size(); ++c) {
    const TokenSeq& seq = prompts.tokens[c];
    const TowerTrace trace = run_tower(store, Tower::text, text_tokens(seq, cfg.hidden_dim), false);
    const auto last = trace.output.row(eos_position(seq));
    for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < cfg.hidden_dim; ++i) s += last[i] * proj(i, j);
      bank.features(c, j) = s;
    }
  }
  return bank;
}

std::vector<double> classify_logits(const WeightStore& store, const Matrix& patches) {
  if (!store.config().unimodal) throw Unsupported("classify_logits requires a unimodal model");
  const EncodedImage img = encode_image(store, patches);
  const Matrix& head = store.get(tower_key(Tower::vision, WeightType::head));
  std::vector<double> logits(head.cols(), 0.0);
  for (std::size_t i = 0; i < head.rows(); ++i)
    for (std::size_t j = 0; j < head.cols(); ++j) logits[j] += img.global[i] * head(i, j);
  return logits;
}

}  // namespace setar
