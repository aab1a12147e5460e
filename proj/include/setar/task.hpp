#pragma once

// Synthetic ID/OOD tasks on the toy encoder, with an optional clean/noisy
// weight pair whose difference lives only in minor singular directions.

#include <cstdint>
#include <string>
#include <vector>

#include "setar/model.hpp"

namespace setar {

struct NoiseSpec {
  std::vector<WeightKey> layers;  // matrices that receive minor-subspace noise
  std::size_t r_true = 24;        // components 1..r_true are left untouched
  double scale = 0.0;             // spectral norm of the noise, as a fraction of σ_{r_true}
  double minor_shrink = 0.1;      // clean minor singular values are scaled by this
  double layer_gain = 1.0;        // clean noised matrices are multiplied by this
};

struct OodSetSpec {
  std::string name;
  double displacement = 1.0;  // 0 = same clusters as ID, 1 = fresh clusters
  std::size_t n_samples = 60;
};

struct TaskSpec {
  ModelConfig model;
  std::uint64_t model_seed = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;  // generated when empty
  double cluster_spread = 0.5;
  double object_fraction = 0.6;
  double background_scale = 1.0;
  std::size_t n_train_per_class = 8;
  std::size_t n_val_per_class = 8;
  std::size_t n_test_per_class = 12;
  std::vector<OodSetSpec> ood_sets = {{"ood_near", 0.6, 60}, {"ood_far", 1.0, 60}};
  NoiseSpec noise;
  double ridge = 1e-2;  // relative ridge strength when calibrating projectors

  void validate() const;
};

struct NamedSet {
  std::string name;
  std::vector<LabeledImage> samples;
};

struct SyntheticTask {
  ClassPrompts prompts;
  std::vector<LabeledImage> id_train;
  std::vector<LabeledImage> id_val;
  std::vector<LabeledImage> id_test;
  std::vector<NamedSet> ood_test;
  WeightStore clean_store;
  WeightStore noisy_store;
  NoiseSpec noise;
};

SyntheticTask generate_task(const TaskSpec& spec);

/// Largest Frobenius norm of (noisy − clean) projected onto the clean
/// leading-r_true left or right singular subspace.
double principal_projection_norm(const Matrix& clean, const Matrix& noisy, std::size_t r_true);

/// Ridge least squares: argmin ‖X·W − Y‖² + alpha·‖W − W0‖².
Matrix ridge_solve(const Matrix& x, const Matrix& y, const Matrix& w0, double alpha);

}  // namespace setar
