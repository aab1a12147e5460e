#include "setar/finetune.hpp"

#include <cmath>

#include "setar/errors.hpp"
#include "setar/parallel.hpp"
#include "setar/rng.hpp"
#include "setar/scoring.hpp"

namespace setar {

std::string to_string(FtMode mode) { return mode == FtMode::setar_ft ? "setar_ft" : "lora_baseline"; }

FtMode ft_mode_from_string(const std::string& s) {
  if (s == "setar_ft") return FtMode::setar_ft;
  if (s == "lora_baseline") return FtMode::lora_baseline;
  throw InvalidInput("unknown fine-tuning mode '" + s + "'");
}

void FtConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidInput("learning_rate must be > 0");
  if (epochs < 1) throw InvalidInput("epochs must be >= 1");
}

std::vector<FtLayerState> ft_init(const WeightStore& store, const RankPlan& plan, const FtConfig& cfg) {
  cfg.validate();
  std::vector<FtLayerState> states;
  std::uint64_t index = 0;
  for (const PlanEntry& e : plan.entries) {
    if (!store.config().valid_key(e.key)) {
      throw InvalidInput("plan entry " + to_string(e.key) + " does not exist in this model");
    }
    const Matrix& w = store.get(e.key);
    FtLayerState s;
    s.key = e.key;
    if (cfg.mode == FtMode::lora_baseline) {
      const std::size_t cap = std::min(w.rows(), w.cols());
      if (cfg.baseline_rank > cap) {
        throw InvalidInput("baseline rank " + std::to_string(cfg.baseline_rank) + " exceeds rank " +
                           std::to_string(cap) + " of " + to_string(e.key));
      }
      s.w_hat = w;
      s.b = Matrix(w.rows(), cfg.baseline_rank);
      s.a = Matrix(cfg.baseline_rank, w.cols());
      Rng rng(mix_seed(cfg.seed, index));
      const double scale = cfg.lora_init_scale / std::sqrt(static_cast<double>(w.cols()));
      for (double& x : s.a.data()) x = rng.uniform(-scale, scale);
    } else if (e.ratio == 0.0) {
      s.w_hat = w;
      s.b = Matrix(w.rows(), 0);
      s.a = Matrix(0, w.cols());
    } else {
      const SvdTriple t = svd(w, to_string(e.key));
      FtSplit split = ft_split(t, reduced_rank(t.rank_capacity(), e.ratio));
      s.w_hat = std::move(split.w_hat);
      s.a = std::move(split.a);
      s.b = std::move(split.b);
    }
    states.push_back(std::move(s));
    ++index;
  }
  return states;
}

WeightStore reassemble(const WeightStore& store, std::span<const FtLayerState> states) {
  WeightStore out = store;
  for (const FtLayerState& s : states) {
    Matrix w = s.w_hat;
    if (s.b.cols() > 0) w += matmul(s.b, s.a);
    out = out.with(s.key, std::move(w));
  }
  return out;
}

namespace {

struct SampleGrads {
  WeightGrads weights;
  Matrix d_concepts;
  LossBreakdown loss;
};

// Projects hidden states and returns dL/d(hidden) for the vision tower.
Matrix vision_output_grad(const WeightStore& store, const TowerTrace& trace, const std::vector<double>& d_global,
                          const Matrix& d_local, WeightGrads& grads) {
  const Matrix& proj = store.get(tower_key(Tower::vision, WeightType::proj));
  Matrix d_feats(trace.output.rows(), proj.cols());
  std::copy(d_global.begin(), d_global.end(), d_feats.row(0).begin());
  for (std::size_t i = 0; i < d_local.rows(); ++i)
    std::copy(d_local.row(i).begin(), d_local.row(i).end(), d_feats.row(i + 1).begin());
  accumulate(grads, tower_key(Tower::vision, WeightType::proj), matmul_tn(trace.output, d_feats));
  return matmul_nt(d_feats, proj);
}

EncodedImage features_from_trace(const WeightStore& store, const TowerTrace& trace) {
  const Matrix feats = matmul(trace.output, store.get(tower_key(Tower::vision, WeightType::proj)));
  EncodedImage img;
  img.global.assign(feats.row(0).begin(), feats.row(0).end());
  img.local = Matrix(feats.rows() - 1, feats.cols());
  for (std::size_t i = 1; i < feats.rows(); ++i)
    std::copy(feats.row(i).begin(), feats.row(i).end(), img.local.row(i - 1).begin());
  return img;
}

SampleGrads sample_grads(const WeightStore& store, const LabeledImage& sample, const ConceptBank& bank,
                         const LossParams& params) {
  const ModelConfig& cfg = store.config();
  if (sample.patches.rows() != cfg.n_patches || sample.patches.cols() != cfg.hidden_dim) {
    throw InvalidInput("training image has the wrong shape");
  }
  SampleGrads out;
  const TowerTrace trace = run_tower(store, Tower::vision, vision_tokens(sample.patches), true);
  const EncodedImage img = features_from_trace(store, trace);
  std::vector<double> d_global;
  Matrix d_local(img.local.rows(), img.local.cols());
  if (cfg.unimodal) {
    const Matrix& head = store.get(tower_key(Tower::vision, WeightType::head));
    std::vector<double> logits(head.cols(), 0.0);
    for (std::size_t i = 0; i < head.rows(); ++i)
      for (std::size_t j = 0; j < head.cols(); ++j) logits[j] += img.global[i] * head(i, j);
    out.loss.id_loss = cross_entropy(logits, sample.label);
    out.loss.total = out.loss.id_loss;
    auto dlogits = softmax(logits);
    dlogits[sample.label] -= 1.0;
    Matrix g_head(head.rows(), head.cols());
    d_global.assign(head.rows(), 0.0);
    for (std::size_t i = 0; i < head.rows(); ++i) {
      for (std::size_t j = 0; j < head.cols(); ++j) {
        g_head(i, j) = img.global[i] * dlogits[j];
        d_global[i] += dlogits[j] * head(i, j);
      }
    }
    accumulate(out.weights, tower_key(Tower::vision, WeightType::head), g_head);
  } else {
    FeatureGrads fg;
    out.loss = locoop_loss_grad(img, bank, sample.label, params, fg);
    d_global = std::move(fg.d_global);
    d_local = std::move(fg.d_local);
    out.d_concepts = std::move(fg.d_concepts);
  }
  Matrix d_hidden = vision_output_grad(store, trace, d_global, d_local, out.weights);
  backward_tower(store, trace, std::move(d_hidden), out.weights);
  return out;
}

}  // namespace

WeightGrads loss_weight_grads(const WeightStore& store, std::span<const LabeledImage> batch,
                              const ClassPrompts& prompts, const LossParams& params, LossBreakdown* mean_loss) {
  if (batch.empty()) throw InvalidInput("gradient over an empty batch");
  const ModelConfig& cfg = store.config();
  params.validate(cfg.n_classes);

  std::vector<TowerTrace> text_traces;
  std::vector<std::size_t> eos;
  ConceptBank bank;
  if (!cfg.unimodal) {
    const Matrix& proj = store.get(tower_key(Tower::text, WeightType::proj));
    bank.class_names = prompts.names;
    bank.features = Matrix(prompts.size(), cfg.feature_dim);
    for (std::size_t c = 0; c < prompts.size(); ++c) {
      eos.push_back(eos_position(prompts.tokens[c]));
      text_traces.push_back(run_tower(store, Tower::text, text_tokens(prompts.tokens[c], cfg.hidden_dim), true));
      const auto last = text_traces.back().output.row(eos.back());
      for (std::size_t j = 0; j < cfg.feature_dim; ++j)
        for (std::size_t i = 0; i < cfg.hidden_dim; ++i) bank.features(c, j) += last[i] * proj(i, j);
    }
  }

  std::vector<SampleGrads> per_sample(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { per_sample[i] = sample_grads(store, batch[i], bank, params); });

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  WeightGrads grads;
  Matrix d_concepts(cfg.unimodal ? 0 : prompts.size(), cfg.feature_dim);
  std::vector<double> tot, id, ood, frac;
  for (const SampleGrads& s : per_sample) {
    for (const auto& [key, g] : s.weights) accumulate(grads, key, g);
    if (!cfg.unimodal) d_concepts += s.d_concepts;
    tot.push_back(s.loss.total);
    id.push_back(s.loss.id_loss);
    ood.push_back(s.loss.ood_loss);
    frac.push_back(s.loss.ood_patch_fraction);
  }
  for (auto& [key, g] : grads) g = inv_n * g;

  if (!cfg.unimodal) {
    d_concepts = inv_n * d_concepts;
    const Matrix& proj = store.get(tower_key(Tower::text, WeightType::proj));
    for (std::size_t c = 0; c < prompts.size(); ++c) {
      const TowerTrace& trace = text_traces[c];
      Matrix g_proj(cfg.hidden_dim, cfg.feature_dim);
      Matrix d_hidden(trace.output.rows(), cfg.hidden_dim);
      const auto last = trace.output.row(eos[c]);
      for (std::size_t i = 0; i < cfg.hidden_dim; ++i) {
        for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
          g_proj(i, j) = last[i] * d_concepts(c, j);
          d_hidden(eos[c], i) += d_concepts(c, j) * proj(i, j);
        }
      }
      accumulate(grads, tower_key(Tower::text, WeightType::proj), g_proj);
      backward_tower(store, trace, std::move(d_hidden), grads);
    }
  }

  if (mean_loss) {
    mean_loss->total = pairwise_sum(tot) * inv_n;
    mean_loss->id_loss = pairwise_sum(id) * inv_n;
    mean_loss->ood_loss = pairwise_sum(ood) * inv_n;
    mean_loss->ood_patch_fraction = pairwise_sum(frac) * inv_n;
  }
  return grads;
}

std::vector<FtGrad> ft_grads(const WeightStore& store, std::span<const FtLayerState> states,
                             std::span<const LabeledImage> batch, const ClassPrompts& prompts,
                             const LossParams& params) {
  const WeightStore current = reassemble(store, states);
  const WeightGrads grads = loss_weight_grads(current, batch, prompts, params);
  std::vector<FtGrad> out;
  for (const FtLayerState& s : states) {
    FtGrad g;
    if (s.b.cols() == 0) {
      g.d_a = Matrix(0, s.a.cols());
      g.d_b = Matrix(s.b.rows(), 0);
    } else {
      const Matrix& dw = grads.at(s.key);
      g.d_a = matmul_tn(s.b, dw);
      g.d_b = matmul_nt(dw, s.a);
      if (!g.d_a.all_finite() || !g.d_b.all_finite()) {
        throw NumericError("non-finite fine-tuning gradient at " + to_string(s.key));
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

FtResult ft_train(const WeightStore& store, const RankPlan& plan, std::span<const LabeledImage> train_set,
                  const ClassPrompts& prompts, const FtConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw InvalidInput("fine-tuning needs a non-empty training set");
  FtResult result;
  result.states = ft_init(store, plan, cfg);
  result.loss_curve.push_back(dataset_loss(reassemble(store, result.states), train_set, prompts, cfg.loss_params));

  const std::size_t n = train_set.size();
  const std::size_t batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  std::vector<LabeledImage> shuffled(train_set.begin(), train_set.end());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (batch < n) {
      Rng rng(mix_seed(cfg.seed, epoch));
      for (std::size_t i = n; i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.uniform_int(i)]);
    }
    for (std::size_t start = 0; start < n; start += batch) {
      const std::span<const LabeledImage> mb(shuffled.data() + start, std::min(batch, n - start));
      std::vector<FtGrad> grads;
      try {
        grads = ft_grads(store, result.states, mb, prompts, cfg.loss_params);
      } catch (const NumericError& e) {
        throw NumericError("fine-tuning diverged in epoch " + std::to_string(epoch) + ": " + e.what());
      }
      for (std::size_t s = 0; s < result.states.size(); ++s) {
        FtLayerState& st = result.states[s];
        if (st.b.cols() == 0) continue;
        st.a = st.a - cfg.learning_rate * grads[s].d_a;
        st.b = st.b - cfg.learning_rate * grads[s].d_b;
      }
    }
    LossBreakdown lb;
    try {
      lb = dataset_loss(reassemble(store, result.states), train_set, prompts, cfg.loss_params);
    } catch (const Error& e) {
      throw NumericError("fine-tuning diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    if (!std::isfinite(lb.total)) {
      throw NumericError("fine-tuning diverged in epoch " + std::to_string(epoch) + ": non-finite loss");
    }
    result.loss_curve.push_back(lb);
  }
  result.store = reassemble(store, result.states);
  return result;
}

}  // namespace setar
