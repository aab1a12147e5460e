#pragma once

// Traced forward pass and reverse-mode gradients for the toy encoder towers.
// Used by fine-tuning; inference goes through model.hpp.

#include <map>
#include <vector>

#include "setar/linalg.hpp"
#include "setar/model.hpp"

namespace setar {

struct LayerCache {
  Matrix x_in;
  Matrix n1;
  std::vector<double> inv_std1;
  Matrix q, k, v;
  Matrix attn;  // softmax probabilities
  Matrix h;
  Matrix x1;
  Matrix n2;
  std::vector<double> inv_std2;
  Matrix u;  // pre-activation of the wide FFN layer
  Matrix g;
};

struct TowerTrace {
  Tower tower = Tower::vision;
  std::vector<LayerCache> layers;
  Matrix output;  // final hidden states, before the projector
};

/// Token matrix fed to the vision tower: [cls] (mean of patches) then patches.
Matrix vision_tokens(const Matrix& patches);
/// Index of the first [eos]; trailing padding is ignored by the causal mask.
std::size_t eos_position(const TokenSeq& tokens);
/// Fixed token + sinusoidal position embeddings for a prompt.
Matrix text_tokens(const TokenSeq& tokens, std::size_t hidden_dim);

/// Runs every encoder layer of `tower`; keeps activations when `keep_cache`.
TowerTrace run_tower(const WeightStore& store, Tower tower, Matrix x0, bool keep_cache);

using WeightGrads = std::map<WeightKey, Matrix>;

/// Accumulates dL/dW for every layer weight of the traced tower given
/// dL/d(output). Projector and head gradients are handled by the caller.
void backward_tower(const WeightStore& store, const TowerTrace& trace, Matrix d_output,
                    WeightGrads& grads);

/// Adds g into grads[key], creating a zero entry of matching shape if absent.
void accumulate(WeightGrads& grads, const WeightKey& key, const Matrix& g);

double gelu(double x);
double gelu_derivative(double x);

}  // namespace setar
