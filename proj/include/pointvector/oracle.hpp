#pragma once

// Brute-force references for tests. Nothing here calls geometry, nnops,
// vecenc or setabs; every loop is written out in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "pointvector/errors.hpp"

namespace pointvector::oracle {

using Vec = std::vector<double>;

/// Central differences of a scalar function, one coordinate at a time.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-6) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw OracleError("fd_gradient: non-finite evaluation at coordinate " + std::to_string(i));
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

inline double dist2(const double* a, const double* b) {
  double s = 0;
  for (int d = 0; d < 3; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
  return s;
}

/// k nearest of each query among `points` (single cloud), nearest first,
/// ties broken by lower index. Selection by repeated linear scans.
inline std::vector<int> naive_knn(const Vec& queries, std::size_t nq, const Vec& points, std::size_t n, std::size_t k) {
  if (k > n) throw OracleError("naive_knn: k exceeds point count");
  std::vector<int> out(nq * k);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<bool> used(n, false);
    for (std::size_t j = 0; j < k; ++j) {
      std::size_t best = n;
      double best_d = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (used[i]) continue;
        const double d = dist2(&queries[q * 3], &points[i * 3]);
        if (best == n || d < best_d) {
          best = i;
          best_d = d;
        }
      }
      used[best] = true;
      out[q * k + j] = static_cast<int>(best);
    }
  }
  return out;
}

/// Radius neighbors in index order, capped at k, padded by repeating the first.
/// Returns (indices, pad flags).
inline std::pair<std::vector<int>, std::vector<std::uint8_t>> naive_ball(const Vec& queries, std::size_t nq,
                                                                        const Vec& points, std::size_t n,
                                                                        double radius, std::size_t k) {
  std::vector<int> idx(nq * k);
  std::vector<std::uint8_t> pad(nq * k, 0);
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<int> hits;
    for (std::size_t i = 0; i < n && hits.size() < k; ++i)
      if (dist2(&queries[q * 3], &points[i * 3]) <= radius * radius) hits.push_back(static_cast<int>(i));
    if (hits.empty()) throw OracleError("naive_ball: empty neighborhood");
    for (std::size_t j = 0; j < k; ++j) {
      idx[q * k + j] = j < hits.size() ? hits[j] : hits[0];
      pad[q * k + j] = j < hits.size() ? 0 : 1;
    }
  }
  return {idx, pad};
}

/// Farthest point sampling from index 0, ties to the lower index.
inline std::vector<int> naive_fps(const Vec& points, std::size_t n, std::size_t m) {
  std::vector<int> chosen{0};
  while (chosen.size() < m) {
    int best = -1;
    double best_d = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(chosen.begin(), chosen.end(), static_cast<int>(i)) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (int c : chosen) d = std::min(d, dist2(&points[i * 3], &points[static_cast<std::size_t>(c) * 3]));
      if (d > best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

/// Inverse squared-distance interpolation from the min(3, nc) nearest coarse
/// points. Features are [n][c].
inline Vec naive_interpolate(const Vec& fine, std::size_t nf, const Vec& coarse, std::size_t nc,
                             const Vec& coarse_feat, std::size_t c, double eps = 1e-8) {
  if (nc == 0) throw OracleError("naive_interpolate: empty coarse set");
  const std::size_t k = std::min<std::size_t>(3, nc);
  const auto nn = naive_knn(fine, nf, coarse, nc, k);
  Vec out(nf * c, 0.0);
  for (std::size_t i = 0; i < nf; ++i) {
    double w[3], total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      w[j] = 1.0 / (dist2(&fine[i * 3], &coarse[static_cast<std::size_t>(nn[i * k + j]) * 3]) + eps);
      total += w[j];
    }
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[i * c + ch] += w[j] / total * coarse_feat[static_cast<std::size_t>(nn[i * k + j]) * c + ch];
  }
  return out;
}

// ---------------------------------------------------------------- layers

struct Dense {
  std::size_t in = 0, out = 0;
  Vec w;  // [in][out]
  Vec b;  // [out], empty for none
};

struct Norm {
  Vec gamma, beta, mean, var;  // running stats used when not training
  double eps = 1e-5;
};

inline Vec apply_dense(const Dense& l, const Vec& x, std::size_t rows) {
  Vec y(rows * l.out, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < l.out; ++o) {
      double s = l.b.empty() ? 0.0 : l.b[o];
      for (std::size_t i = 0; i < l.in; ++i) s += x[r * l.in + i] * l.w[i * l.out + o];
      y[r * l.out + o] = s;
    }
  return y;
}

/// Batch statistics (biased variance) over all rows when `train`.
inline Vec apply_norm(const Norm& n, const Vec& x, std::size_t rows, bool train) {
  const std::size_t c = n.gamma.size();
  Vec y(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = n.mean.empty() ? 0.0 : n.mean[ch], var = n.var.empty() ? 1.0 : n.var[ch];
    if (train) {
      mean = 0;
      for (std::size_t r = 0; r < rows; ++r) mean += x[r * c + ch];
      mean /= static_cast<double>(rows);
      var = 0;
      for (std::size_t r = 0; r < rows; ++r) var += (x[r * c + ch] - mean) * (x[r * c + ch] - mean);
      var /= static_cast<double>(rows);
    }
    for (std::size_t r = 0; r < rows; ++r)
      y[r * c + ch] = n.gamma[ch] * (x[r * c + ch] - mean) / std::sqrt(var + n.eps) + n.beta[ch];
  }
  return y;
}

inline double relu(double v) { return v > 0 ? v : 0.0; }

struct Unit {
  Dense lin;
  Norm norm;
};

inline Vec apply_unit(const Unit& u, const Vec& x, std::size_t rows, bool train) {
  Vec y = apply_norm(u.norm, apply_dense(u.lin, x, rows), rows, train);
  for (double& v : y) v = relu(v);
  return y;
}

/// Cloud of B batches, N points, C channels.
struct Cloud {
  std::size_t batch = 1, points = 0, channels = 0;
  Vec pos;   // [B][N][3]
  Vec feat;  // [B][N][C]
};

struct Grouped {
  std::size_t centers = 0, k = 0;
  std::vector<int> center;       // [B][M]
  std::vector<int> nb;           // [B][M][K]
  std::vector<std::uint8_t> pad; // [B][M][K]
};

inline Grouped naive_group(const Cloud& in, std::size_t stride, std::size_t k, std::optional<double> radius,
                           bool sort_ball) {
  Grouped g;
  g.centers = (in.points + stride - 1) / stride;
  g.k = k;
  for (std::size_t b = 0; b < in.batch; ++b) {
    Vec p(in.pos.begin() + static_cast<std::ptrdiff_t>(b * in.points * 3),
          in.pos.begin() + static_cast<std::ptrdiff_t>((b + 1) * in.points * 3));
    std::vector<int> ctr;
    if (stride == 1)
      for (std::size_t i = 0; i < in.points; ++i) ctr.push_back(static_cast<int>(i));
    else
      ctr = naive_fps(p, in.points, g.centers);
    Vec q;
    for (int c : ctr)
      for (int d = 0; d < 3; ++d) q.push_back(p[static_cast<std::size_t>(c) * 3 + d]);
    std::vector<int> idx;
    std::vector<std::uint8_t> pad;
    if (radius) {
      std::tie(idx, pad) = naive_ball(q, ctr.size(), p, in.points, *radius, k);
      if (sort_ball)
        for (std::size_t i = 0; i < ctr.size(); ++i) {
          std::vector<std::pair<double, int>> real;
          for (std::size_t j = 0; j < k; ++j)
            if (!pad[i * k + j]) real.push_back({dist2(&q[i * 3], &p[static_cast<std::size_t>(idx[i * k + j]) * 3]), idx[i * k + j]});
          std::stable_sort(real.begin(), real.end(), [](auto& a, auto& b) { return a.first < b.first; });
          for (std::size_t j = 0; j < k; ++j) idx[i * k + j] = j < real.size() ? real[j].second : real[0].second;
        }
    } else {
      idx = naive_knn(q, ctr.size(), p, in.points, k);
      pad.assign(idx.size(), 0);
    }
    g.center.insert(g.center.end(), ctr.begin(), ctr.end());
    g.nb.insert(g.nb.end(), idx.begin(), idx.end());
    g.pad.insert(g.pad.end(), pad.begin(), pad.end());
  }
  return g;
}

struct SaWeights {
  std::vector<Unit> mlp;
};

/// max_j MLP([f_j, p_j - p_i]) over real neighbors. Output [B][M][C'].
inline Vec naive_sa(const Cloud& in, const SaWeights& w, std::size_t stride, std::size_t k,
                    std::optional<double> radius, bool train) {
  const Grouped g = naive_group(in, stride, k, radius, false);
  const std::size_t rows = in.batch * g.centers * k, c = in.channels, width = c + 3;
  Vec x(rows * width);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < g.centers; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t r = (b * g.centers + i) * k + j;
        const auto s = static_cast<std::size_t>(g.nb[r]);
        const auto ci = static_cast<std::size_t>(g.center[b * g.centers + i]);
        for (std::size_t ch = 0; ch < c; ++ch) x[r * width + ch] = in.feat[(b * in.points + s) * c + ch];
        for (int d = 0; d < 3; ++d)
          x[r * width + c + d] = in.pos[(b * in.points + s) * 3 + d] - in.pos[(b * in.points + ci) * 3 + d];
      }
  for (const auto& u : w.mlp) x = apply_unit(u, x, rows, train);
  const std::size_t co = w.mlp.back().lin.out;
  Vec out(in.batch * g.centers * co, -std::numeric_limits<double>::infinity());
  for (std::size_t q = 0; q < in.batch * g.centers; ++q)
    for (std::size_t j = 0; j < k; ++j) {
      if (g.pad[q * k + j]) continue;
      for (std::size_t ch = 0; ch < co; ++ch) out[q * co + ch] = std::max(out[q * co + ch], x[(q * k + j) * co + ch]);
    }
  return out;
}

/// Decoder step: MLP([skip, interpolate(coarse)]) at every fine point.
inline Vec naive_fp(const Cloud& coarse, const Cloud& fine, const std::vector<Unit>& mlp, bool train) {
  const std::size_t c = fine.channels + coarse.channels;
  Vec x(fine.batch * fine.points * c);
  for (std::size_t b = 0; b < fine.batch; ++b) {
    auto slice = [b](const Vec& v, std::size_t n, std::size_t w) {
      return Vec(v.begin() + static_cast<std::ptrdiff_t>(b * n * w), v.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * w));
    };
    const Vec interp = naive_interpolate(slice(fine.pos, fine.points, 3), fine.points, slice(coarse.pos, coarse.points, 3),
                                         coarse.points, slice(coarse.feat, coarse.points, coarse.channels), coarse.channels);
    for (std::size_t i = 0; i < fine.points; ++i) {
      double* row = &x[(b * fine.points + i) * c];
      for (std::size_t ch = 0; ch < fine.channels; ++ch) row[ch] = fine.feat[(b * fine.points + i) * fine.channels + ch];
      for (std::size_t ch = 0; ch < coarse.channels; ++ch) row[fine.channels + ch] = interp[i * coarse.channels + ch];
    }
  }
  const std::size_t rows = fine.batch * fine.points;
  for (const auto& u : mlp) x = apply_unit(u, x, rows, train);
  return x;
}

/// Rotation encoder + reduction + per-channel projection + mix + residual.
struct VpsaWeights {
  std::size_t in = 0, out = 0, dim = 3;
  bool max_reduce = false;
  Dense pos;           // 3 -> C
  Dense zx;            // C -> C
  Dense angle;         // C -> (m-1)C, alpha block then beta block
  Norm angle_norm;
  Vec proj_w, proj_b;  // [C][m], [C] (empty: no bias)
  Dense mix;           // C -> C'
  Norm norm;
  Dense residual;      // C -> C'
};

/// f_i' = relu(res(f_i) + BN(mix(P(R_j rot(fp_ij))))), fp_ij = relu((f_j - f_i) + pos(p_j - p_i)).
inline Vec brute_force_vpsa(const Cloud& in, const VpsaWeights& w, std::size_t stride, std::size_t k,
                            std::optional<double> radius, bool train) {
  if (in.batch * in.points * in.channels * k > 10000) throw OracleError("brute_force_vpsa: instance too large");
  const Grouped g = naive_group(in, stride, k, radius, false);
  const std::size_t c = in.channels, m = w.dim, q_rows = in.batch * g.centers, rows = q_rows * k;

  // fp for every (center, slot)
  Vec fp(rows * c);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < g.centers; ++i) {
      const auto ci = static_cast<std::size_t>(g.center[b * g.centers + i]);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t r = (b * g.centers + i) * k + j;
        const auto s = static_cast<std::size_t>(g.nb[r]);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double v = w.pos.b.empty() ? 0.0 : w.pos.b[ch];
          for (int d = 0; d < 3; ++d)
            v += (in.pos[(b * in.points + s) * 3 + d] - in.pos[(b * in.points + ci) * 3 + d]) * w.pos.w[d * c + ch];
          v += in.feat[(b * in.points + s) * c + ch] - in.feat[(b * in.points + ci) * c + ch];
          fp[r * c + ch] = relu(v);
        }
      }
    }

  // vectors [rows][C][m]
  const Vec zx = apply_dense(w.zx, fp, rows);
  Vec ang;
  if (m > 1) {
    ang = apply_norm(w.angle_norm, apply_dense(w.angle, fp, rows), rows, train);
    for (double& v : ang) v = relu(v);
  }
  Vec vec(rows * c * m);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double z = zx[r * c + ch];
      double* o = &vec[(r * c + ch) * m];
      if (m == 1) {
        o[0] = z;
      } else if (m == 2) {
        const double a = ang[r * c + ch];
        o[0] = -z * std::sin(a);
        o[1] = z * std::cos(a);
      } else {
        const double a = ang[r * 2 * c + ch], be = ang[r * 2 * c + c + ch];
        o[0] = -z * std::sin(a) * std::sin(be);
        o[1] = z * std::cos(a) * std::sin(be);
        o[2] = z * std::cos(be);
      }
    }

  // reduce over real neighbors, then project each channel
  Vec proj(q_rows * c);
  for (std::size_t q = 0; q < q_rows; ++q)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = w.proj_b.empty() ? 0.0 : w.proj_b[ch];
      for (std::size_t e = 0; e < m; ++e) {
        double red = w.max_reduce ? -std::numeric_limits<double>::infinity() : 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          if (g.pad[q * k + j]) continue;
          const double v = vec[((q * k + j) * c + ch) * m + e];
          red = w.max_reduce ? std::max(red, v) : red + v;
        }
        s += red * w.proj_w[ch * m + e];
      }
      proj[q * c + ch] = s;
    }
  const Vec main = apply_norm(w.norm, apply_dense(w.mix, proj, q_rows), q_rows, train);

  Vec centers(q_rows * c);
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < g.centers; ++i) {
      const auto ci = static_cast<std::size_t>(g.center[b * g.centers + i]);
      for (std::size_t ch = 0; ch < c; ++ch)
        centers[(b * g.centers + i) * c + ch] = in.feat[(b * in.points + ci) * c + ch];
    }
  const Vec skip = apply_dense(w.residual, centers, q_rows);
  Vec out(q_rows * w.out);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = relu(main[i] + skip[i]);
  return out;
}

// ------------------------------------------- GroupConv coefficient constraint

/// Weighted sum of two neighbor vectors (w1, w2) followed by a projection
/// (w3, w4) gives coefficients a1 = w3 w1, a2 = w3 w2, a3 = w4 w1, a4 = w4 w2.
/// Returns a1 a4 - a2 a3, which vanishes identically.
inline double coeff_constraint_residual(double w1, double w2, double w3, double w4) {
  const double a1 = w3 * w1, a2 = w3 * w2, a3 = w4 * w1, a4 = w4 * w2;
  return a1 * a4 - a2 * a3;
}

/// Residual of independently drawn general GroupConv coefficients.
inline double general_groupconv_residual(double a1, double a2, double a3, double a4) { return a1 * a4 - a2 * a3; }

/// Fraction of `draws` uniform(-1, 1) coefficient sets with |residual| > tol.
inline double general_groupconv_violation_rate(std::size_t draws, double tol, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double a1 = u(rng), a2 = u(rng), a3 = u(rng), a4 = u(rng);
    if (std::abs(general_groupconv_residual(a1, a2, a3, a4)) > tol) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(draws);
}

/// General GroupConv over k neighbor slots with one m x 1 kernel per slot:
/// out[c] = sum_j sum_e v[j][c][e] * w[c][j][e]. v is [k][C][m], w is [C][k][m].
inline Vec naive_slot_groupconv(const Vec& v, const Vec& w, std::size_t k, std::size_t c, std::size_t m) {
  Vec out(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t e = 0; e < m; ++e) out[ch] += v[(j * c + ch) * m + e] * w[(ch * k + j) * m + e];
  return out;
}

}  // namespace pointvector::oracle
