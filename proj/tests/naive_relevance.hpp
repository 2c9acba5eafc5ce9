// SPDX-License-Identifier: Apache-2.0
// Straight-line relevance oracle: recomputes the forward pass with loops and
// applies each redistribution rule entry by entry. Independent of the graph
// implementation under test.
#pragma once

#include <cmath>
#include <vector>

#include "lime/model.hpp"
#include "naive_model.hpp"

namespace lime::testing {

struct NaiveRelevance {
  std::vector<double> token_relevance;
  std::vector<double> boundary_totals;  // layer inputs, then final hidden
  double target_logit = 0.0;
};

inline double stab(double z, double eps) { return z + eps * (z >= 0.0 ? 1.0 : -1.0); }

inline NaiveRelevance naive_relevance(const model::ModelWeights& w, const Tensor& embeddings, int target, double eps,
                                      const model::DeltaKV* delta = nullptr) {
  const auto& cfg = w.config;
  const std::size_t n = embeddings.rows(), d = cfg.model_dim, dh = cfg.head_dim(), H = cfg.num_heads;
  const std::size_t f = cfg.ffn_dim;
  struct Layer {
    Mat in, h1, q, klin, vlin, k, v, cat, attn, mid, h2, pre, act, ffn, out;
    std::vector<Mat> s, a, o;
  };
  std::vector<Layer> layers(cfg.num_layers);
  Mat x = to_mat(embeddings);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto& L = layers[l];
    const auto& lw = w.layers[l];
    L.in = x;
    L.h1 = naive_norm(x, lw.norm1_gain, cfg.normalization);
    L.q = mat_mul(L.h1, to_mat(lw.wq));
    L.klin = mat_mul(L.h1, to_mat(lw.wk));
    L.vlin = mat_mul(L.h1, to_mat(lw.wv));
    L.k = L.klin;
    L.v = L.vlin;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        if (delta && !delta->keys[l].empty()) L.k[i][c] += delta->keys[l](i, c % dh);
        if (delta && !delta->values[l].empty()) L.v[i][c] += delta->values[l](i, c % dh);
      }
    L.cat.assign(n, std::vector<double>(d, 0.0));
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < H; ++h) {
      Mat s(n, std::vector<double>(n, 0.0)), a = s, o(n, std::vector<double>(dh, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t p = 0; p < dh; ++p) acc += L.q[i][h * dh + p] * sc * L.k[j][h * dh + p];
          s[i][j] = acc;
          if (j <= i) mx = std::max(mx, acc);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[i][j] - mx);
        for (std::size_t j = 0; j <= i; ++j) a[i][j] = std::exp(s[i][j] - mx) / z;
        for (std::size_t p = 0; p < dh; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += a[i][j] * L.v[j][h * dh + p];
          o[i][p] = acc;
          L.cat[i][h * dh + p] = acc;
        }
      }
      L.s.push_back(s);
      L.a.push_back(a);
      L.o.push_back(o);
    }
    L.attn = mat_mul(L.cat, to_mat(lw.wo));
    L.mid = L.in;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) L.mid[i][c] += L.attn[i][c];
    L.h2 = naive_norm(L.mid, lw.norm2_gain, cfg.normalization);
    L.pre = mat_mul(L.h2, to_mat(lw.w1));
    L.act = L.pre;
    for (auto& r : L.act)
      for (auto& e : r) e = e > 0.0 ? e : 0.0;
    L.ffn = mat_mul(L.act, to_mat(lw.w2));
    L.out = L.mid;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) L.out[i][c] += L.ffn[i][c];
    x = L.out;
  }
  const Mat hf = naive_norm(x, w.final_gain, cfg.normalization);
  const auto y = static_cast<std::size_t>(target);
  double z = 0.0;
  for (std::size_t c = 0; c < d; ++c) z += hf[n - 1][c] * w.unembedding(c, y);

  NaiveRelevance out;
  out.target_logit = z;
  Mat R(n, std::vector<double>(d, 0.0));
  for (std::size_t c = 0; c < d; ++c) R[n - 1][c] = hf[n - 1][c] * w.unembedding(c, y) / stab(z, eps) * z;
  auto total = [](const Mat& m) {
    double s = 0.0;
    for (const auto& r : m)
      for (double e : r) s += e;
    return s;
  };
  std::vector<double> totals(cfg.num_layers + 1);
  totals[cfg.num_layers] = total(R);

  // Generic z-rule: rin[i][a] = sum_b xin[i][a] W[a][b] rout[i][b] / stab(zout[i][b]).
  auto linear = [&](const Mat& xin, const Tensor& W, const Mat& zout, const Mat& rout) {
    Mat rin(xin.size(), std::vector<double>(xin.front().size(), 0.0));
    for (std::size_t i = 0; i < xin.size(); ++i)
      for (std::size_t a = 0; a < xin[i].size(); ++a)
        for (std::size_t b = 0; b < zout[i].size(); ++b) rin[i][a] += xin[i][a] * W(a, b) * rout[i][b] / stab(zout[i][b], eps);
    return rin;
  };

  for (std::size_t l = cfg.num_layers; l-- > 0;) {
    const auto& L = layers[l];
    const auto& lw = w.layers[l];
    Mat r_mid(n, std::vector<double>(d)), r_ffn = r_mid;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        r_mid[i][c] = L.mid[i][c] * R[i][c] / stab(L.out[i][c], eps);
        r_ffn[i][c] = L.ffn[i][c] * R[i][c] / stab(L.out[i][c], eps);
      }
    const Mat r_act = linear(L.act, lw.w2, L.ffn, r_ffn);
    const Mat r_h2 = linear(L.h2, lw.w1, L.pre, r_act);
    (void)f;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) r_mid[i][c] += r_h2[i][c];

    Mat r_in(n, std::vector<double>(d)), r_attn = r_in;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        r_in[i][c] = L.in[i][c] * r_mid[i][c] / stab(L.mid[i][c], eps);
        r_attn[i][c] = L.attn[i][c] * r_mid[i][c] / stab(L.mid[i][c], eps);
      }
    const Mat r_cat = linear(L.cat, lw.wo, L.attn, r_attn);
    Mat rq(n, std::vector<double>(d, 0.0)), rk = rq, rv = rq;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < H; ++h) {
      const auto &A = L.a[h], &S = L.s[h], &O = L.o[h];
      Mat ra(n, std::vector<double>(n, 0.0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t p = 0; p < dh; ++p) {
            const double share = A[i][j] * L.v[j][h * dh + p] * r_cat[i][h * dh + p] / stab(2.0 * O[i][p], eps);
            ra[i][j] += share;
            rv[j][h * dh + p] += share;
          }
      for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j <= i; ++j) row += ra[i][j];
        for (std::size_t j = 0; j <= i; ++j) {
          const double rs = S[i][j] * (ra[i][j] - A[i][j] * row);
          for (std::size_t p = 0; p < dh; ++p) {
            const double share = L.q[i][h * dh + p] * sc * L.k[j][h * dh + p] * rs / stab(2.0 * S[i][j], eps);
            rq[i][h * dh + p] += share;
            rk[j][h * dh + p] += share;
          }
        }
      }
    }
    const Mat a1 = linear(L.h1, lw.wq, L.q, rq);
    const Mat a2 = linear(L.h1, lw.wk, L.klin, rk);
    const Mat a3 = linear(L.h1, lw.wv, L.vlin, rv);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) r_in[i][c] += a1[i][c] + a2[i][c] + a3[i][c];
    R = r_in;
    totals[l] = total(R);
  }
  out.boundary_totals = totals;
  for (const auto& r : R) {
    double s = 0.0;
    for (double e : r) s += e;
    out.token_relevance.push_back(s);
  }
  return out;
}

}  // namespace lime::testing
