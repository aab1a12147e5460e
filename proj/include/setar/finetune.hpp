#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "setar/backprop.hpp"
#include "setar/loss.hpp"
#include "setar/model.hpp"
#include "setar/search.hpp"

namespace setar {

enum class FtMode { setar_ft, lora_baseline };

std::string to_string(FtMode mode);
FtMode ft_mode_from_string(const std::string& s);

struct FtConfig {
  double learning_rate = 1e-2;
  std::size_t epochs = 5;
  LossParams loss_params;
  std::size_t baseline_rank = 4;  // LoRA baseline rank, same for every layer
  FtMode mode = FtMode::setar_ft;
  std::size_t batch_size = 0;     // 0 = full batch
  std::uint64_t seed = 0;         // mini-batch order and LoRA init
  double lora_init_scale = 0.1;   // A ~ U(-s, s)/sqrt(cols)

  void validate() const;
};

/// One trainable layer: W = w_hat + b·a with w_hat frozen.
struct FtLayerState {
  WeightKey key;
  Matrix w_hat;
  Matrix a;  // k_minor × n
  Matrix b;  // m × k_minor
};

struct FtGrad {
  Matrix d_a;
  Matrix d_b;
};

std::vector<FtLayerState> ft_init(const WeightStore& store, const RankPlan& plan, const FtConfig& cfg);

/// Store with every state's w_hat + b·a written back.
WeightStore reassemble(const WeightStore& store, std::span<const FtLayerState> states);

/// Gradients of the mean batch loss with respect to every encoder weight.
WeightGrads loss_weight_grads(const WeightStore& store, std::span<const LabeledImage> batch,
                              const ClassPrompts& prompts, const LossParams& params,
                              LossBreakdown* mean_loss = nullptr);

/// dA = Bᵀ·dW and dB = dW·Aᵀ for each state, evaluated at the reassembled store.
std::vector<FtGrad> ft_grads(const WeightStore& store, std::span<const FtLayerState> states,
                             std::span<const LabeledImage> batch, const ClassPrompts& prompts,
                             const LossParams& params);

struct FtResult {
  WeightStore store;
  std::vector<LossBreakdown> loss_curve;  // index 0 = before training, then one per epoch
  std::vector<FtLayerState> states;
};

FtResult ft_train(const WeightStore& store, const RankPlan& plan, std::span<const LabeledImage> train_set,
                  const ClassPrompts& prompts, const FtConfig& cfg);

}  // namespace setar
