#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "setar/linalg.hpp"

namespace setar {

enum class Tower { vision, text };

/// W_p is the tower projector; head is the unimodal classifier.
enum class WeightType { q, k, v, o, up, down, proj, head };

std::string to_string(Tower tower);
std::string to_string(WeightType type);
Tower tower_from_string(const std::string& s);
WeightType weight_type_from_string(const std::string& s);

struct WeightKey {
  Tower tower = Tower::vision;
  std::size_t layer = 0;
  WeightType type = WeightType::up;

  /// W_p and head live on the tower, not on a layer; their layer is always 0.
  bool tower_level() const { return type == WeightType::proj || type == WeightType::head; }

  auto operator<=>(const WeightKey&) const = default;
};

WeightKey layer_key(Tower tower, std::size_t layer, WeightType type);
WeightKey tower_key(Tower tower, WeightType type);

/// "vision.3.W_up", "text.W_p", "vision.head"
std::string to_string(const WeightKey& key);
WeightKey weight_key_from_string(const std::string& s);

struct ModelConfig {
  std::size_t n_vision_layers = 4;
  std::size_t n_text_layers = 4;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 16;
  std::size_t n_patches = 9;
  std::size_t ffn_dim = 64;
  std::size_t n_classes = 5;
  bool unimodal = false;

  void validate() const;
  std::size_t n_layers(Tower tower) const;
  bool has_tower(Tower tower) const { return tower == Tower::vision || !unimodal; }
  bool valid_key(const WeightKey& key) const;
  /// (rows, cols) with activations multiplied on the left: y = x·W.
  std::pair<std::size_t, std::size_t> shape(const WeightKey& key) const;
  /// Every key implied by the config, in canonical (manifest) order.
  std::vector<WeightKey> keys() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Immutable set of named weight matrices. Copies share matrix storage;
/// with() produces a new store that differs at one key.
class WeightStore {
 public:
  WeightStore() = default;
  WeightStore(ModelConfig config, std::map<WeightKey, Matrix> entries);

  const ModelConfig& config() const { return config_; }
  const Matrix& get(const WeightKey& key) const;
  WeightStore with(const WeightKey& key, Matrix m) const;
  std::vector<WeightKey> keys() const;

  friend bool operator==(const WeightStore& a, const WeightStore& b);

 private:
  ModelConfig config_;
  std::map<WeightKey, std::shared_ptr<const Matrix>> entries_;
};

WeightStore init_weights(const ModelConfig& config, std::uint64_t seed);

inline const Matrix& get_weight(const WeightStore& store, const WeightKey& key) { return store.get(key); }
inline WeightStore set_weight(const WeightStore& store, const WeightKey& key, Matrix m) {
  return store.with(key, std::move(m));
}

struct EncodedImage {
  std::vector<double> global;  // projected [cls] output
  Matrix local;                // n_patches × feature_dim
};

struct ConceptBank {
  Matrix features;  // n_classes × feature_dim
  std::vector<std::string> class_names;
};

using TokenSeq = std::vector<int>;

inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;

/// "a photo of a <name>" as template tokens, one token per byte of the
/// name, then [eos]. Injective over names.
TokenSeq tokenize_prompt(const std::string& class_name);

struct ClassPrompts {
  std::vector<std::string> names;
  std::vector<TokenSeq> tokens;

  static ClassPrompts from_names(std::vector<std::string> names);
  std::size_t size() const { return names.size(); }
};

struct LabeledImage {
  Matrix patches;  // n_patches × hidden_dim
  std::size_t label = 0;
};

EncodedImage encode_image(const WeightStore& store, const Matrix& patches);
ConceptBank encode_concepts(const WeightStore& store, const ClassPrompts& prompts);
std::vector<double> classify_logits(const WeightStore& store, const Matrix& patches);

}  // namespace setar
