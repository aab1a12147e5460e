#pragma once

#include <cmath>
#include <vector>

#include "setar/linalg.hpp"
#include "setar/model.hpp"
#include "setar/rng.hpp"
#include "setar/task.hpp"

namespace testing {

using namespace setar;

inline Matrix random_matrix(Rng& rng, std::size_t m, std::size_t n, double scale = 1.0) {
  Matrix a(m, n);
  for (double& x : a.data()) x = scale * rng.uniform(-1.0, 1.0);
  return a;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-300); }

inline ModelConfig tiny_config(bool unimodal = false) {
  ModelConfig c;
  c.n_vision_layers = 2;
  c.n_text_layers = 2;
  c.hidden_dim = 8;
  c.feature_dim = 4;
  c.n_patches = 4;
  c.ffn_dim = 16;
  c.n_classes = 3;
  c.unimodal = unimodal;
  return c;
}

inline TaskSpec tiny_task_spec(std::uint64_t seed, bool unimodal = false) {
  TaskSpec s;
  s.model = tiny_config(unimodal);
  s.model_seed = 1000 + seed;
  s.seed = seed;
  s.n_train_per_class = 3;
  s.n_val_per_class = 3;
  s.n_test_per_class = 4;
  s.ood_sets = {{"near", 0.5, 8}, {"far", 1.0, 8}};
  s.noise.r_true = 6;
  return s;
}

inline LabeledImage random_image(Rng& rng, const ModelConfig& c, std::size_t label = 0) {
  return {random_matrix(rng, c.n_patches, c.hidden_dim), label};
}

}  // namespace testing
