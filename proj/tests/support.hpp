#pragma once

// Shared test fixtures and independent long-double reference implementations
// (kept deliberately Eigen-free so they can arbitrate the library code).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "unimod/model.hpp"
#include "unimod/random.hpp"
#include "unimod/tensor.hpp"

namespace testutil {

using LD = long double;
using Grid = std::vector<std::vector<LD>>;
using unimod::Index;
using unimod::MaskMat;
using unimod::Tensor;

inline Grid to_grid(const Tensor<double>& t) {
  Grid g(static_cast<std::size_t>(t.rows()),
         std::vector<LD>(static_cast<std::size_t>(t.cols())));
  for (Index r = 0; r < t.rows(); ++r)
    for (Index c = 0; c < t.cols(); ++c)
      g[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = t(r, c);
  return g;
}

inline Grid grid_transpose(const Grid& a) {
  Grid out(a[0].size(), std::vector<LD>(a.size()));
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[0].size(); ++c) out[c][r] = a[r][c];
  return out;
}

// Plain triple loop, long double accumulation.
inline Grid grid_matmul(const Grid& a, const Grid& b) {
  Grid out(a.size(), std::vector<LD>(b[0].size(), 0.0L));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j)
        out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Grid grid_layer_norm(const Grid& x, LD eps) {
  Grid out(x.size(), std::vector<LD>(x[0].size()));
  for (std::size_t r = 0; r < x.size(); ++r) {
    LD mu = 0.0L;
    for (LD v : x[r]) mu += v;
    mu /= static_cast<LD>(x[r].size());
    LD var = 0.0L;
    for (LD v : x[r]) var += (v - mu) * (v - mu);
    var /= static_cast<LD>(x[r].size());
    const LD inv = 1.0L / sqrtl(var + eps);
    for (std::size_t c = 0; c < x[r].size(); ++c)
      out[r][c] = (x[r][c] - mu) * inv;
  }
  return out;
}

// Naive softmax; long double range covers logits up to ~1.1e4.
inline std::vector<LD> naive_softmax(const std::vector<LD>& row) {
  std::vector<LD> out(row.size());
  LD denom = 0.0L;
  for (std::size_t i = 0; i < row.size(); ++i) denom += expl(row[i]);
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = expl(row[i]) / denom;
  return out;
}

// Singular values via one-sided Jacobi rotations on columns. Deliberately
// avoids Eigen so it can stand as an independent reference for
// numerical_rank.
inline std::vector<LD> jacobi_singular_values(Grid a) {
  if (a.empty() || a[0].empty()) return {};
  if (a.size() < a[0].size()) a = grid_transpose(a);
  const std::size_t m = a.size(), n = a[0].size();
  for (int sweep = 0; sweep < 60; ++sweep) {
    LD off = 0.0L;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        LD alpha = 0.0L, beta = 0.0L, gamma = 0.0L;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a[i][p] * a[i][p];
          beta += a[i][q] * a[i][q];
          gamma += a[i][p] * a[i][q];
        }
        if (alpha == 0.0L || beta == 0.0L) continue;
        off = std::max(off, fabsl(gamma) / sqrtl(alpha * beta));
        if (gamma == 0.0L) continue;
        const LD zeta = (beta - alpha) / (2.0L * gamma);
        const LD t = (zeta >= 0.0L ? 1.0L : -1.0L) /
                     (fabsl(zeta) + sqrtl(1.0L + zeta * zeta));
        const LD c = 1.0L / sqrtl(1.0L + t * t);
        const LD s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const LD up = a[i][p], uq = a[i][q];
          a[i][p] = c * up - s * uq;
          a[i][q] = s * up + c * uq;
        }
      }
    }
    if (off < 1e-28L) break;
  }
  std::vector<LD> sv(n, 0.0L);
  for (std::size_t j = 0; j < n; ++j) {
    LD sq = 0.0L;
    for (std::size_t i = 0; i < m; ++i) sq += a[i][j] * a[i][j];
    sv[j] = sqrtl(sq);
  }
  std::sort(sv.begin(), sv.end(), std::greater<LD>());
  return sv;
}

inline int jacobi_rank(const Grid& a, double rel_tol) {
  auto sv = jacobi_singular_values(a);
  if (sv.empty() || sv[0] <= 0.0L) return 0;
  int r = 0;
  for (LD s : sv)
    if (s > static_cast<LD>(rel_tol) * sv[0]) ++r;
  return r;
}

// Per-head post-softmax probability matrices (masked entries exactly zero).
inline std::vector<Grid> oracle_attention_probs(const Grid& hidden,
                                                const Grid& wq, const Grid& wk,
                                                int n_heads,
                                                const MaskMat& mask, LD eps) {
  const std::size_t n = hidden.size(), d = hidden[0].size();
  const std::size_t dh = d / static_cast<std::size_t>(n_heads);
  Grid x = grid_layer_norm(hidden, eps);
  Grid q = grid_matmul(x, wq), k = grid_matmul(x, wk);
  const LD scale = 1.0L / sqrtl(static_cast<LD>(dh));
  std::vector<Grid> probs(static_cast<std::size_t>(n_heads),
                          Grid(n, std::vector<LD>(n, 0.0L)));
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<LD> sc(n, 0.0L);
      LD mx = -1e30L;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask(static_cast<Index>(i), static_cast<Index>(j))) continue;
        for (std::size_t c = 0; c < dh; ++c)
          sc[j] += q[i][off + c] * k[j][off + c];
        sc[j] *= scale;
        mx = std::max(mx, sc[j]);
      }
      LD denom = 0.0L;
      std::vector<LD> p(n, 0.0L);
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask(static_cast<Index>(i), static_cast<Index>(j))) continue;
        p[j] = expl(sc[j] - mx);
        denom += p[j];
      }
      for (std::size_t j = 0; j < n; ++j)
        probs[static_cast<std::size_t>(h)][i][j] = p[j] / denom;
    }
  }
  return probs;
}

// Naive per-head attention with residual, all in long double.
inline Grid oracle_attention(const Grid& hidden, const Grid& wq, const Grid& wk,
                             const Grid& wv, const Grid& wo, int n_heads,
                             const MaskMat& mask, LD eps) {
  const std::size_t n = hidden.size(), d = hidden[0].size();
  const std::size_t dh = d / static_cast<std::size_t>(n_heads);
  Grid x = grid_layer_norm(hidden, eps);
  Grid v = grid_matmul(x, wv);
  std::vector<Grid> probs = oracle_attention_probs(hidden, wq, wk, n_heads, mask, eps);
  Grid ctx(n, std::vector<LD>(d, 0.0L));
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const LD w = probs[static_cast<std::size_t>(h)][i][j];
        if (w == 0.0L) continue;
        for (std::size_t c = 0; c < dh; ++c) ctx[i][off + c] += w * v[j][off + c];
      }
  }
  Grid proj = grid_matmul(ctx, wo);
  Grid out = hidden;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i][c] += proj[i][c];
  return out;
}

inline double max_abs_diff(const Tensor<double>& t, const Grid& g) {
  double worst = 0.0;
  for (Index r = 0; r < t.rows(); ++r)
    for (Index c = 0; c < t.cols(); ++c)
      worst = std::max(worst,
                       std::abs(t(r, c) - static_cast<double>(
                                              g[static_cast<std::size_t>(r)]
                                               [static_cast<std::size_t>(c)])));
  return worst;
}

inline unimod::model::ModelConfig tiny_config() {
  unimod::model::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ffn = 32;
  cfg.text_vocab = 5;
  cfg.image_vocab = 7;
  cfg.max_seq = 12;
  return cfg;
}

// [image x m][text x n], causal, text positions supervised.
inline unimod::model::TaskBatch mmu_batch(const unimod::model::ModelConfig& cfg,
                                          Index m, Index n,
                                          unimod::RandomStream& rs) {
  using namespace unimod::model;
  TaskBatch b;
  b.task = TaskType::MMU;
  b.mask_mode = MaskMode::CAUSAL;
  b.modality.assign(static_cast<std::size_t>(m), Modality::IMAGE);
  b.modality.insert(b.modality.end(), static_cast<std::size_t>(n),
                    Modality::TEXT);
  std::vector<int> toks;
  std::vector<std::uint8_t> lm;
  for (Index i = 0; i < m; ++i) {
    toks.push_back(static_cast<int>(cfg.text_vocab +
                                    static_cast<Index>(rs.uniform_int(
                                        static_cast<std::uint64_t>(cfg.image_vocab)))));
    lm.push_back(0);
  }
  for (Index i = 0; i < n; ++i) {
    toks.push_back(static_cast<int>(rs.uniform_int(
        static_cast<std::uint64_t>(cfg.text_vocab))));
    lm.push_back(1);
  }
  b.tokens.push_back(toks);
  b.loss_mask.push_back(lm);
  b.mtp_targets.push_back(std::vector<int>(toks.size(), 0));
  return b;
}

}  // namespace testutil
