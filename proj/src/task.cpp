#include "setar/task.hpp"

#include <algorithm>
#include <cmath>

#include "setar/backprop.hpp"
#include "setar/errors.hpp"
#include "setar/rng.hpp"

namespace setar {

void TaskSpec::validate() const {
  model.validate();
  if (!class_names.empty() && class_names.size() != model.n_classes) {
    throw InvalidInput("task: " + std::to_string(class_names.size()) + " class names for " +
                       std::to_string(model.n_classes) + " classes");
  }
  if (model.n_classes > model.hidden_dim) {
    throw InvalidInput("task: more classes than the hidden width can separate");
  }
  if (!(cluster_spread >= 0.0) || !(background_scale >= 0.0)) throw InvalidInput("task: negative spread");
  if (!(object_fraction > 0.0 && object_fraction <= 1.0)) throw InvalidInput("task: object_fraction in (0, 1]");
  if (n_train_per_class == 0 || n_val_per_class == 0 || n_test_per_class == 0) {
    throw InvalidInput("task: every ID split needs at least one sample per class");
  }
  for (const auto& o : ood_sets) {
    if (o.name.empty() || o.n_samples == 0) throw InvalidInput("task: OOD sets need a name and samples");
    if (!(o.displacement >= 0.0 && o.displacement <= 1.0)) throw InvalidInput("task: displacement in [0, 1]");
  }
  if (!(noise.scale >= 0.0) || !(noise.minor_shrink >= 0.0) || !(noise.layer_gain > 0.0)) throw InvalidInput("task: negative noise parameter");
  for (const auto& key : noise.layers) {
    if (!model.valid_key(key) || key.tower_level()) {
      throw InvalidInput("task: cannot inject noise into " + to_string(key));
    }
    const auto [r, c] = model.shape(key);
    if (noise.r_true >= std::min(r, c)) {
      throw InvalidInput("task: r_true leaves no minor components in " + to_string(key));
    }
  }
  if (!(ridge > 0.0)) throw InvalidInput("task: ridge must be positive");
}

Matrix ridge_solve(const Matrix& x, const Matrix& y, const Matrix& w0, double alpha) {
  Matrix a = matmul_tn(x, x);
  for (std::size_t i = 0; i < a.rows(); ++i) a(i, i) += alpha;
  Matrix b = matmul_tn(x, y);
  b += alpha * w0;
  const SvdTriple t = svd(a, "ridge system");
  // a is symmetric positive definite: a⁻¹ = V Σ⁻¹ Uᵀ.
  Matrix ut_b = matmul_tn(t.u, b);
  for (std::size_t i = 0; i < ut_b.rows(); ++i)
    for (std::size_t j = 0; j < ut_b.cols(); ++j) ut_b(i, j) /= t.sigma[i];
  return matmul(t.v, ut_b);
}

double principal_projection_norm(const Matrix& clean, const Matrix& noisy, std::size_t r_true) {
  const SvdTriple t = svd(clean, "clean weight");
  const Matrix delta = noisy - clean;
  const std::size_t r = std::min(r_true, t.rank_capacity());
  Matrix up(t.u.rows(), r);
  Matrix vp(t.v.rows(), r);
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t i = 0; i < t.u.rows(); ++i) up(i, k) = t.u(i, k);
    for (std::size_t i = 0; i < t.v.rows(); ++i) vp(i, k) = t.v(i, k);
  }
  return std::max(frobenius_norm(matmul_tn(up, delta)), frobenius_norm(matmul(delta, vp)));
}

namespace {

std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

struct ImageSampler {
  const TaskSpec& spec;
  std::size_t n_object;

  LabeledImage sample(Rng& rng, std::span<const double> center, std::size_t label) const {
    const std::size_t l = spec.model.n_patches;
    const std::size_t d = spec.model.hidden_dim;
    std::vector<std::size_t> slots(l);
    for (std::size_t i = 0; i < l; ++i) slots[i] = i;
    for (std::size_t i = l; i > 1; --i) std::swap(slots[i - 1], slots[rng.uniform_int(i)]);
    LabeledImage img;
    img.label = label;
    img.patches = Matrix(l, d);
    for (std::size_t s = 0; s < l; ++s) {
      const std::size_t row = slots[s];
      const bool object = s < n_object;
      for (std::size_t j = 0; j < d; ++j) {
        img.patches(row, j) = object ? center[j] + spec.cluster_spread * rng.normal()
                                     : spec.background_scale * rng.normal();
      }
    }
    return img;
  }
};

// Flattens the leading r_true singular values to gain times their RMS and
// scales the rest by gain·shrink.
Matrix shape_spectrum(const Matrix& w, std::size_t r_true, double shrink, double gain, const std::string& name) {
  SvdTriple t = svd(w, name);
  double rms = 0.0;
  for (std::size_t i = 0; i < r_true; ++i) rms += t.sigma[i] * t.sigma[i];
  rms = std::sqrt(rms / static_cast<double>(r_true));
  for (std::size_t i = 0; i < t.sigma.size(); ++i) t.sigma[i] = i < r_true ? gain * rms : gain * shrink * t.sigma[i];
  return reconstruct(t);
}

Matrix minor_noise(const Matrix& clean, const NoiseSpec& noise, Rng& rng, const std::string& name) {
  const SvdTriple t = svd(clean, name);
  const std::size_t k = t.rank_capacity();
  const std::size_t minor = k - noise.r_true;
  Matrix g(minor, minor);
  for (double& x : g.data()) x = rng.normal();
  const double g_norm = svd(g, "noise core").sigma.front();
  const double target = noise.scale * t.sigma[noise.r_true - 1];
  g = (target / g_norm) * g;

  // Minor block of the noisy matrix is diag(σ_minor) + g; it must stay below
  // σ_{r_true} so the leading r_true components keep their identity.
  Matrix block = g;
  for (std::size_t i = 0; i < minor; ++i) block(i, i) += t.sigma[noise.r_true + i];
  if (svd(block, "noisy minor block").sigma.front() >= t.sigma[noise.r_true - 1]) {
    throw InvalidInput("task: noise on " + name + " would overtake the leading " + std::to_string(noise.r_true) +
                       " singular components; lower noise.scale or minor_shrink");
  }

  Matrix um(t.u.rows(), minor);
  Matrix vm(t.v.rows(), minor);
  for (std::size_t c = 0; c < minor; ++c) {
    for (std::size_t i = 0; i < t.u.rows(); ++i) um(i, c) = t.u(i, noise.r_true + c);
    for (std::size_t i = 0; i < t.v.rows(); ++i) vm(i, c) = t.v(i, noise.r_true + c);
  }
  return matmul_nt(matmul(um, g), vm);
}

// Hidden states (before the projector) for a set of images.
Matrix vision_hidden(const WeightStore& store, std::span<const LabeledImage> images, bool cls_only) {
  const ModelConfig& cfg = store.config();
  const std::size_t per = cls_only ? 1 : cfg.n_patches + 1;
  Matrix out(images.size() * per, cfg.hidden_dim);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const TowerTrace tr = run_tower(store, Tower::vision, vision_tokens(images[i].patches), false);
    for (std::size_t r = 0; r < per; ++r)
      std::copy(tr.output.row(r).begin(), tr.output.row(r).end(), out.row(i * per + r).begin());
  }
  return out;
}

double mean_diag(const Matrix& gram) {
  double s = 0.0;
  for (std::size_t i = 0; i < gram.rows(); ++i) s += gram(i, i);
  return s / static_cast<double>(std::max<std::size_t>(gram.rows(), 1));
}

}  // namespace

SyntheticTask generate_task(const TaskSpec& spec) {
  spec.validate();
  const ModelConfig& cfg = spec.model;
  const std::size_t k = cfg.n_classes;
  const std::size_t d = cfg.hidden_dim;

  SyntheticTask task;
  task.noise = spec.noise;
  std::vector<std::string> names = spec.class_names;
  if (names.empty())
    for (std::size_t c = 0; c < k; ++c) names.push_back("class" + std::to_string(c));
  task.prompts = ClassPrompts::from_names(names);

  // Data: class prototypes, per-split samples, displaced OOD clusters.
  Rng proto_rng(mix_seed(spec.seed, 1));
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < k; ++c) centers.push_back(gaussian_vector(proto_rng, d));
  const auto n_object = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(spec.object_fraction * static_cast<double>(cfg.n_patches))));
  const ImageSampler sampler{spec, n_object};
  const auto make_split = [&](std::uint64_t tag, std::size_t per_class) {
    Rng rng(mix_seed(spec.seed, tag));
    std::vector<LabeledImage> out;
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < k; ++c) out.push_back(sampler.sample(rng, centers[c], c));
    return out;
  };
  task.id_train = make_split(2, spec.n_train_per_class);
  task.id_val = make_split(3, spec.n_val_per_class);
  task.id_test = make_split(4, spec.n_test_per_class);
  for (std::size_t o = 0; o < spec.ood_sets.size(); ++o) {
    const auto& os = spec.ood_sets[o];
    Rng rng(mix_seed(spec.seed, 100 + o));
    std::vector<std::vector<double>> ood_centers;
    for (std::size_t c = 0; c < k; ++c) {
      auto fresh = gaussian_vector(rng, d);
      for (std::size_t j = 0; j < d; ++j) fresh[j] = (1.0 - os.displacement) * centers[c][j] + os.displacement * fresh[j];
      ood_centers.push_back(std::move(fresh));
    }
    NamedSet set{os.name, {}};
    for (std::size_t i = 0; i < os.n_samples; ++i) set.samples.push_back(sampler.sample(rng, ood_centers[i % k], i % k));
    task.ood_test.push_back(std::move(set));
  }

  // Model: random init, shaped spectrum on the layers that will get noise.
  WeightStore store = init_weights(cfg, spec.model_seed);
  for (const auto& key : spec.noise.layers) {
    store = store.with(key, shape_spectrum(store.get(key), spec.noise.r_true, spec.noise.minor_shrink,
                                                  spec.noise.layer_gain, to_string(key)));
  }

  // Calibrate the projectors so ID clusters line up with their concepts.
  Rng target_rng(mix_seed(spec.seed, 5));
  Matrix targets(k, cfg.unimodal ? k : cfg.feature_dim);
  if (cfg.unimodal) {
    for (std::size_t c = 0; c < k; ++c) targets(c, c) = 4.0;
  } else {
    for (std::size_t c = 0; c < k; ++c) {
      auto v = gaussian_vector(target_rng, cfg.feature_dim);
      const double n = norm2(v);
      for (std::size_t j = 0; j < cfg.feature_dim; ++j) targets(c, j) = v[j] / n;
    }
    Matrix eos_hidden(k, d);
    for (std::size_t c = 0; c < k; ++c) {
      const auto& seq = task.prompts.tokens[c];
      const TowerTrace tr = run_tower(store, Tower::text, text_tokens(seq, d), false);
      const auto row = tr.output.row(eos_position(seq));
      std::copy(row.begin(), row.end(), eos_hidden.row(c).begin());
    }
    const WeightKey tp = tower_key(Tower::text, WeightType::proj);
    const double alpha = 1e-6 * mean_diag(matmul_tn(eos_hidden, eos_hidden));
    store = store.with(tp, ridge_solve(eos_hidden, targets, store.get(tp), alpha));
  }

  const WeightKey vp = tower_key(Tower::vision, WeightType::proj);
  if (cfg.unimodal) {
    const Matrix hidden = vision_hidden(store, task.id_train, true);
    const Matrix feats = matmul(hidden, store.get(vp));
    Matrix y(task.id_train.size(), k);
    for (std::size_t i = 0; i < task.id_train.size(); ++i)
      for (std::size_t c = 0; c < k; ++c) y(i, c) = targets(task.id_train[i].label, c);
    const WeightKey hk = tower_key(Tower::vision, WeightType::head);
    const double alpha = spec.ridge * mean_diag(matmul_tn(feats, feats));
    store = store.with(hk, ridge_solve(feats, y, store.get(hk), alpha));
  } else {
    // Regress [cls] and object-patch states of the training images onto
    // their class concept; background patches are left unconstrained.
    const Matrix hidden = vision_hidden(store, task.id_train, false);
    const std::size_t per = cfg.n_patches + 1;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < task.id_train.size(); ++i) {
      const auto& img = task.id_train[i];
      const auto& center = centers[img.label];
      for (std::size_t r = 0; r < per; ++r) {
        bool keep = r == 0;
        if (!keep) {
          double dist = 0.0;
          for (std::size_t j = 0; j < d; ++j) dist += (img.patches(r - 1, j) - center[j]) * (img.patches(r - 1, j) - center[j]);
          keep = dist < 9.0 * static_cast<double>(d) * spec.cluster_spread * spec.cluster_spread + 1e-12;
        }
        if (keep) {
          rows.push_back(i * per + r);
          labels.push_back(img.label);
        }
      }
    }
    Matrix x(rows.size(), d);
    Matrix y(rows.size(), cfg.feature_dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(hidden.row(rows[i]).begin(), hidden.row(rows[i]).end(), x.row(i).begin());
      std::copy(targets.row(labels[i]).begin(), targets.row(labels[i]).end(), y.row(i).begin());
    }
    const double alpha = spec.ridge * mean_diag(matmul_tn(x, x));
    store = store.with(vp, ridge_solve(x, y, store.get(vp), alpha));
  }
  task.clean_store = store;

  task.noisy_store = store;
  if (spec.noise.scale > 0.0) {
    for (std::size_t i = 0; i < spec.noise.layers.size(); ++i) {
      const auto& key = spec.noise.layers[i];
      Rng rng(mix_seed(spec.seed, 200 + i));
      const Matrix& clean = store.get(key);
      task.noisy_store = task.noisy_store.with(key, clean + minor_noise(clean, spec.noise, rng, to_string(key)));
    }
  }
  return task;
}

}  // namespace setar
