#pragma once

// Scalar-loop reference for masked multi-head attention and the pre-norm FFT
// block, written straight from the definitions with nested loops over one
// sequence. Shares no code with the library beyond reading weight buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "spattn/model.hpp"

namespace spattn::reference {

using Matrix = std::vector<std::vector<double>>;

enum class Mask { kNone, kVanilla, kHard, kSoft };

inline Matrix to_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<double>(cols));
  auto v = t.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = v[i * cols + j];
  }
  return m;
}

inline Matrix product(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.front().size();
  Matrix out(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i][t] * b[t][j];
      out[i][j] = s;
    }
  }
  return out;
}

/// probs[h][i][j] for one sequence; keys at or beyond `len` get probability 0.
inline std::vector<Matrix> probabilities(const Matrix& x, const AttentionParams& p, std::size_t len) {
  const std::size_t n = x.size(), dim = x.front().size(), heads = p.heads, d = p.head_dim;
  const Matrix q = product(x, to_matrix(p.w_q, dim, heads * d));
  const Matrix k = product(x, to_matrix(p.w_k, dim, heads * d));
  std::vector<Matrix> out(heads, Matrix(n, std::vector<double>(n, 0.0)));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logit(len);
      for (std::size_t j = 0; j < len; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += q[i][h * d + c] * k[j][h * d + c];
        logit[j] = s / std::sqrt(static_cast<double>(d));
      }
      const double top = *std::max_element(logit.begin(), logit.end());
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) z += std::exp(logit[j] - top);
      for (std::size_t j = 0; j < len; ++j) out[h][i][j] = std::exp(logit[j] - top) / z;
    }
  }
  return out;
}

inline double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Mask over valid query rows and keys; padded rows stay 0.
inline std::vector<Matrix> mask_of(const std::vector<Matrix>& probs, std::size_t len, Mask kind, double theta,
                                   double temperature) {
  const std::size_t heads = probs.size(), n = probs.front().size();
  std::vector<Matrix> m(heads, Matrix(n, std::vector<double>(n, 0.0)));
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      bool any = false;
      for (std::size_t h = 0; h < heads; ++h) {
        double mean = 0.0;
        for (std::size_t t = 0; t < len; ++t) mean += probs[h][i][t];
        mean /= static_cast<double>(len);
        any = any || probs[h][i][j] >= mean;
      }
      for (std::size_t h = 0; h < heads; ++h) {
        const double a = probs[h][i][j];
        const double cut = theta / static_cast<double>(len);
        switch (kind) {
          case Mask::kNone:
            m[h][i][j] = 1.0;
            break;
          case Mask::kVanilla:
            m[h][i][j] = any ? 1.0 : 0.0;
            break;
          case Mask::kHard:
            m[h][i][j] = a >= cut ? 1.0 : 0.0;
            break;
          case Mask::kSoft:
            m[h][i][j] = logistic((a - cut) / temperature);
            break;
        }
      }
    }
  }
  return m;
}

/// Masked self-attention output [n, dim]; rows at or beyond `len` are left 0.
inline Matrix attention(const Matrix& x, const AttentionParams& p, std::size_t len, Mask kind, double theta,
                        double temperature) {
  const std::size_t n = x.size(), dim = x.front().size(), heads = p.heads, d = p.head_dim;
  const auto probs = probabilities(x, p, len);
  const auto mask = mask_of(probs, len, kind, theta, temperature);
  const Matrix v = product(x, to_matrix(p.w_v, dim, heads * d));
  const Matrix w_o = to_matrix(p.w_o, heads * d, dim);
  Matrix concat(n, std::vector<double>(heads * d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) s += mask[h][i][j] * probs[h][i][j] * v[j][h * d + c];
        concat[i][h * d + c] = s;
      }
    }
  }
  Matrix out = product(concat, w_o);
  for (std::size_t i = len; i < n; ++i) std::fill(out[i].begin(), out[i].end(), 0.0);
  return out;
}

inline Matrix layer_norm(const Matrix& x, const Tensor& gain, const Tensor& bias) {
  Matrix out = x;
  auto g = gain.data();
  auto b = bias.data();
  for (auto& row : out) {
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return out;
}

/// y = x + attention(LN1(x)); out = y + W2 relu(W1 LN2(y) + b1) + b2.
inline Matrix fft_block(const Matrix& x, const FFTBlockParams& p, std::size_t len, Mask kind, double theta,
                        double temperature) {
  const std::size_t n = x.size(), dim = x.front().size(), hidden = p.ffn.b1.numel();
  const Matrix att = attention(layer_norm(x, p.norm1.gain, p.norm1.bias), p.attention, len, kind, theta, temperature);
  Matrix y = x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) y[i][j] += att[i][j];
  }
  const Matrix h = layer_norm(y, p.norm2.gain, p.norm2.bias);
  const Matrix w1 = to_matrix(p.ffn.w1, dim, hidden);
  const Matrix w2 = to_matrix(p.ffn.w2, hidden, dim);
  auto b1 = p.ffn.b1.data();
  auto b2 = p.ffn.b2.data();
  Matrix out = y;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> act(hidden);
    for (std::size_t u = 0; u < hidden; ++u) {
      double s = b1[u];
      for (std::size_t j = 0; j < dim; ++j) s += h[i][j] * w1[j][u];
      act[u] = std::max(s, 0.0);
    }
    for (std::size_t j = 0; j < dim; ++j) {
      double s = b2[j];
      for (std::size_t u = 0; u < hidden; ++u) s += act[u] * w2[u][j];
      out[i][j] += s;
    }
  }
  return out;
}

}  // namespace spattn::reference
