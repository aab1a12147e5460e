#include "setar/backprop.hpp"

#include <cmath>

#include "setar/errors.hpp"

namespace setar {

void accumulate(WeightGrads& grads, const WeightKey& key, const Matrix& g) {
  auto it = grads.find(key);
  if (it == grads.end()) {
    grads.emplace(key, g);
  } else {
    it->second += g;
  }
}

namespace {

// Backward of a parameter-free layer norm, row by row.
Matrix layer_norm_backward(const Matrix& y, const std::vector<double>& inv_std, const Matrix& dy) {
  Matrix dx(y.rows(), y.cols());
  const double n = static_cast<double>(y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double mean_dy = 0.0;
    double mean_dy_y = 0.0;
    for (std::size_t j = 0; j < y.cols(); ++j) {
      mean_dy += dy(i, j);
      mean_dy_y += dy(i, j) * y(i, j);
    }
    mean_dy /= n;
    mean_dy_y /= n;
    for (std::size_t j = 0; j < y.cols(); ++j) {
      dx(i, j) = inv_std[i] * (dy(i, j) - mean_dy - y(i, j) * mean_dy_y);
    }
  }
  return dx;
}

}  // namespace

void backward_tower(const WeightStore& store, const TowerTrace& trace, Matrix d_output, WeightGrads& grads) {
  const ModelConfig& cfg = store.config();
  const Tower tower = trace.tower;
  if (trace.layers.size() != cfg.n_layers(tower)) {
    throw InvalidInput("backward_tower: trace was recorded without activations");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));

  Matrix dx = std::move(d_output);
  for (std::size_t li = trace.layers.size(); li-- > 0;) {
    const LayerCache& c = trace.layers[li];
    const auto key = [&](WeightType t) { return layer_key(tower, li, t); };

    // FFN: x2 = x1 + gelu(n2 W_up) W_down
    Matrix dx1 = dx;
    accumulate(grads, key(WeightType::down), matmul_tn(c.g, dx));
    Matrix du = matmul_nt(dx, store.get(key(WeightType::down)));
    for (std::size_t i = 0; i < du.size(); ++i) du.data()[i] *= gelu_derivative(c.u.data()[i]);
    accumulate(grads, key(WeightType::up), matmul_tn(c.n2, du));
    const Matrix dn2 = matmul_nt(du, store.get(key(WeightType::up)));
    dx1 += layer_norm_backward(c.n2, c.inv_std2, dn2);

    // Attention: x1 = x + softmax(q kᵀ·scale) v W_o
    Matrix dxin = dx1;
    accumulate(grads, key(WeightType::o), matmul_tn(c.h, dx1));
    const Matrix dh = matmul_nt(dx1, store.get(key(WeightType::o)));
    const Matrix dattn = matmul_nt(dh, c.v);
    const Matrix dv = matmul_tn(c.attn, dh);
    Matrix dscores(c.attn.rows(), c.attn.cols());
    for (std::size_t i = 0; i < c.attn.rows(); ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < c.attn.cols(); ++j) inner += dattn(i, j) * c.attn(i, j);
      for (std::size_t j = 0; j < c.attn.cols(); ++j) {
        dscores(i, j) = scale * c.attn(i, j) * (dattn(i, j) - inner);
      }
    }
    const Matrix dq = matmul(dscores, c.k);
    const Matrix dk = matmul_tn(dscores, c.q);
    accumulate(grads, key(WeightType::q), matmul_tn(c.n1, dq));
    accumulate(grads, key(WeightType::k), matmul_tn(c.n1, dk));
    accumulate(grads, key(WeightType::v), matmul_tn(c.n1, dv));
    Matrix dn1 = matmul_nt(dq, store.get(key(WeightType::q)));
    dn1 += matmul_nt(dk, store.get(key(WeightType::k)));
    dn1 += matmul_nt(dv, store.get(key(WeightType::v)));
    dxin += layer_norm_backward(c.n1, c.inv_std1, dn1);
    if (!dxin.all_finite()) {
      throw NumericError("non-finite gradient in " + to_string(tower) + " layer " + std::to_string(li));
    }
    dx = std::move(dxin);
  }
}

}  // namespace setar
