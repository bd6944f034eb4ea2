#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pointvector/errors.hpp"

namespace pointvector {

/// A batch of B clouds with N points each: positions, per-point features and
/// optional per-point labels. All arrays are row-major.
struct PointSetBatch {
  std::size_t batch = 0;
  std::size_t points = 0;
  std::size_t channels = 0;
  std::vector<double> positions;  // [B][N][3]
  std::vector<double> features;   // [B][N][C]
  std::optional<std::vector<int>> labels;  // [B][N]

  const double* position(std::size_t b, std::size_t i) const { return &positions[(b * points + i) * 3]; }
  const double* feature(std::size_t b, std::size_t i) const { return &features[(b * points + i) * channels]; }

  void validate(std::optional<int> num_classes = std::nullopt) const {
    if (points == 0 || batch == 0) throw SizeError("point set must contain at least one point");
    if (channels == 0) throw SizeError("point set must carry at least one feature channel");
    if (positions.size() != batch * points * 3) throw SizeError("positions length does not match B*N*3");
    if (features.size() != batch * points * channels) throw SizeError("features length does not match B*N*C");
    for (double v : positions)
      if (!std::isfinite(v)) throw DataError("non-finite point position");
    if (labels) {
      if (labels->size() != batch * points) throw SizeError("labels length does not match B*N");
      if (num_classes)
        for (int l : *labels)
          if (l < 0 || l >= *num_classes) throw DataError("label " + std::to_string(l) + " out of range");
    }
  }
};

/// Per-center neighbor table. `pad` marks entries that duplicate an earlier
/// neighbor only to fill the fixed width K.
struct NeighborIndex {
  std::size_t batch = 0;
  std::size_t centers = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> indices;  // [B][M][K]
  std::vector<std::uint8_t> pad;      // [B][M][K]
  std::vector<std::int32_t> center;   // [B][M]

  std::int32_t at(std::size_t b, std::size_t i, std::size_t j) const { return indices[(b * centers + i) * k + j]; }
  bool padded(std::size_t b, std::size_t i, std::size_t j) const { return pad[(b * centers + i) * k + j] != 0; }
};

namespace geometry {

inline double squared_distance(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Farthest point sampling on positions [B][N][3]. Row b of the result holds
/// m distinct indices, the first being `start`. Ties go to the lower index.
inline std::vector<std::int32_t> farthest_point_sample(std::span<const double> positions, std::size_t batch,
                                                       std::size_t n, std::size_t m, std::size_t start = 0) {
  if (n == 0) throw SizeError("farthest_point_sample: empty cloud");
  if (m == 0 || m > n)
    throw SizeError("farthest_point_sample: m=" + std::to_string(m) + " must be in [1, " + std::to_string(n) + "]");
  if (start >= n) throw SizeError("farthest_point_sample: start index out of range");
  if (positions.size() != batch * n * 3) throw SizeError("farthest_point_sample: positions length mismatch");

  std::vector<std::int32_t> out(batch * m);
  std::vector<double> min_d(n);
  std::vector<std::uint8_t> taken(n);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* p = positions.data() + b * n * 3;
    std::fill(min_d.begin(), min_d.end(), std::numeric_limits<double>::infinity());
    std::fill(taken.begin(), taken.end(), 0);
    taken[start] = 1;
    std::size_t last = start;
    out[b * m] = static_cast<std::int32_t>(start);
    for (std::size_t s = 1; s < m; ++s) {
      std::size_t best = 0;
      double best_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = squared_distance(p + i * 3, p + last * 3);
        if (d < min_d[i]) min_d[i] = d;
        if (!taken[i] && min_d[i] > best_d) {
          best_d = min_d[i];
          best = i;
        }
      }
      out[b * m + s] = static_cast<std::int32_t>(best);
      taken[best] = 1;
      last = best;
    }
  }
  return out;
}

inline std::vector<std::int32_t> farthest_point_sample(const PointSetBatch& cloud, std::size_t m,
                                                       std::size_t start = 0) {
  return farthest_point_sample(cloud.positions, cloud.batch, cloud.points, m, start);
}

/// Centers 0..N-1 for every batch row.
inline std::vector<std::int32_t> all_centers(std::size_t batch, std::size_t n) {
  std::vector<std::int32_t> c(batch * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) c[b * n + i] = static_cast<std::int32_t>(i);
  return c;
}

/// Ball query around arbitrary query positions [B][M][3]. Up to k points
/// within `radius` in scan order; short rows repeat the first hit with the
/// pad flag set. Throws EmptyNeighborhood when nothing lies within radius.
inline NeighborIndex ball_query_points(std::span<const double> queries, std::size_t m,
                                       std::span<const double> positions, std::size_t batch, std::size_t n,
                                       double radius, std::size_t k) {
  if (!(radius > 0.0)) throw ConfigError("ball_query: radius must be positive");
  if (k == 0) throw SizeError("ball_query: k must be at least 1");
  if (positions.size() != batch * n * 3 || queries.size() != batch * m * 3)
    throw SizeError("ball_query: positions length mismatch");
  NeighborIndex nb;
  nb.batch = batch;
  nb.centers = m;
  nb.k = k;
  nb.indices.assign(batch * m * k, 0);
  nb.pad.assign(batch * m * k, 0);
  nb.center.assign(batch * m, -1);
  const double r2 = radius * radius;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* p = positions.data() + b * n * 3;
    for (std::size_t i = 0; i < m; ++i) {
      const double* q = queries.data() + (b * m + i) * 3;
      std::int32_t* row = &nb.indices[(b * m + i) * k];
      std::uint8_t* prow = &nb.pad[(b * m + i) * k];
      std::size_t found = 0;
      for (std::size_t j = 0; j < n && found < k; ++j)
        if (squared_distance(q, p + j * 3) <= r2) row[found++] = static_cast<std::int32_t>(j);
      if (found == 0)
        throw EmptyNeighborhood("ball_query: no point within radius of query " + std::to_string(i) + " in batch " +
                                std::to_string(b));
      for (std::size_t j = found; j < k; ++j) {
        row[j] = row[0];
        prow[j] = 1;
      }
    }
  }
  return nb;
}

inline std::vector<double> gather_positions(std::span<const double> positions, std::size_t batch, std::size_t n,
                                            std::span<const std::int32_t> centers, std::size_t m) {
  std::vector<double> out(batch * m * 3);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      const auto c = static_cast<std::size_t>(centers[b * m + i]);
      if (c >= n) throw SizeError("center index out of range");
      std::copy_n(positions.data() + (b * n + c) * 3, 3, out.data() + (b * m + i) * 3);
    }
  return out;
}

/// Ball query around points of the cloud itself; the center is always a
/// candidate at distance 0.
inline NeighborIndex ball_query(std::span<const std::int32_t> centers, std::size_t m,
                                std::span<const double> positions, std::size_t batch, std::size_t n, double radius,
                                std::size_t k) {
  auto q = gather_positions(positions, batch, n, centers, m);
  NeighborIndex nb = ball_query_points(q, m, positions, batch, n, radius, k);
  nb.center.assign(centers.begin(), centers.end());
  return nb;
}

inline NeighborIndex ball_query(std::span<const std::int32_t> centers, const PointSetBatch& cloud, double radius,
                                std::size_t k) {
  return ball_query(centers, centers.size() / cloud.batch, cloud.positions, cloud.batch, cloud.points, radius, k);
}

/// k nearest points to each query, sorted by distance, ties by lower index.
inline NeighborIndex knn_points(std::span<const double> queries, std::size_t m, std::span<const double> positions,
                                std::size_t batch, std::size_t n, std::size_t k) {
  if (k == 0) throw SizeError("knn: k must be at least 1");
  if (k > n) throw SizeError("knn: k=" + std::to_string(k) + " exceeds point count " + std::to_string(n));
  if (positions.size() != batch * n * 3 || queries.size() != batch * m * 3)
    throw SizeError("knn: positions length mismatch");
  NeighborIndex nb;
  nb.batch = batch;
  nb.centers = m;
  nb.k = k;
  nb.indices.assign(batch * m * k, 0);
  nb.pad.assign(batch * m * k, 0);
  nb.center.assign(batch * m, -1);
  std::vector<double> d(n);
  std::vector<std::int32_t> order(n);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* p = positions.data() + b * n * 3;
    for (std::size_t i = 0; i < m; ++i) {
      const double* q = queries.data() + (b * m + i) * 3;
      for (std::size_t j = 0; j < n; ++j) d[j] = squared_distance(q, p + j * 3);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::int32_t a, std::int32_t c) { return d[a] < d[c] || (d[a] == d[c] && a < c); });
      std::copy_n(order.begin(), k, nb.indices.begin() + static_cast<std::ptrdiff_t>((b * m + i) * k));
    }
  }
  return nb;
}

inline NeighborIndex knn(std::span<const std::int32_t> centers, std::size_t m, std::span<const double> positions,
                         std::size_t batch, std::size_t n, std::size_t k) {
  auto q = gather_positions(positions, batch, n, centers, m);
  NeighborIndex nb = knn_points(q, m, positions, batch, n, k);
  nb.center.assign(centers.begin(), centers.end());
  return nb;
}

inline NeighborIndex knn(std::span<const std::int32_t> centers, const PointSetBatch& cloud, std::size_t k) {
  return knn(centers, centers.size() / cloud.batch, cloud.positions, cloud.batch, cloud.points, k);
}

/// Reorders each row by distance to its center (stable, so ties keep scan
/// order). Padded entries stay at the end.
inline void sort_by_distance(NeighborIndex& nb, std::span<const double> positions, std::size_t n) {
  std::vector<std::pair<double, std::int32_t>> row;
  for (std::size_t b = 0; b < nb.batch; ++b)
    for (std::size_t i = 0; i < nb.centers; ++i) {
      const double* c = positions.data() + (b * n + static_cast<std::size_t>(nb.center[b * nb.centers + i])) * 3;
      row.clear();
      for (std::size_t j = 0; j < nb.k; ++j)
        if (!nb.padded(b, i, j)) {
          const auto idx = nb.at(b, i, j);
          row.emplace_back(squared_distance(c, positions.data() + (b * n + static_cast<std::size_t>(idx)) * 3), idx);
        }
      std::stable_sort(row.begin(), row.end(), [](const auto& a, const auto& c) { return a.first < c.first; });
      std::int32_t* out = &nb.indices[(b * nb.centers + i) * nb.k];
      for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j].second;
      for (std::size_t j = row.size(); j < nb.k; ++j) out[j] = row[0].second;
    }
}

/// Relative features and offsets of every neighbor w.r.t. its center.
struct RelativeGroup {
  std::vector<double> features;   // [B][M][K][C]
  std::vector<double> positions;  // [B][M][K][3]
};

inline RelativeGroup group_relative(const PointSetBatch& cloud, const NeighborIndex& nb) {
  if (nb.batch != cloud.batch || nb.center.size() != nb.batch * nb.centers)
    throw SizeError("group_relative: neighbor table does not match cloud");
  const std::size_t c = cloud.channels;
  RelativeGroup g;
  g.features.resize(nb.batch * nb.centers * nb.k * c);
  g.positions.resize(nb.batch * nb.centers * nb.k * 3);
  for (std::size_t b = 0; b < nb.batch; ++b)
    for (std::size_t i = 0; i < nb.centers; ++i) {
      const auto ci = static_cast<std::size_t>(nb.center[b * nb.centers + i]);
      if (ci >= cloud.points) throw SizeError("group_relative: center index out of range");
      for (std::size_t j = 0; j < nb.k; ++j) {
        const auto ni = static_cast<std::size_t>(nb.at(b, i, j));
        if (ni >= cloud.points) throw SizeError("group_relative: neighbor index out of range");
        const std::size_t row = (b * nb.centers + i) * nb.k + j;
        for (std::size_t ch = 0; ch < c; ++ch)
          g.features[row * c + ch] = cloud.feature(b, ni)[ch] - cloud.feature(b, ci)[ch];
        for (std::size_t d = 0; d < 3; ++d) g.positions[row * 3 + d] = cloud.position(b, ni)[d] - cloud.position(b, ci)[d];
      }
    }
  return g;
}

/// Offsets p_neighbor - p_center for a neighbor table, divided by `scale`.
inline std::vector<double> relative_positions(const NeighborIndex& nb, std::span<const double> positions,
                                              std::size_t n, double scale = 1.0) {
  std::vector<double> out(nb.batch * nb.centers * nb.k * 3);
  for (std::size_t b = 0; b < nb.batch; ++b)
    for (std::size_t i = 0; i < nb.centers; ++i) {
      const double* c = positions.data() + (b * n + static_cast<std::size_t>(nb.center[b * nb.centers + i])) * 3;
      for (std::size_t j = 0; j < nb.k; ++j) {
        const double* p = positions.data() + (b * n + static_cast<std::size_t>(nb.at(b, i, j))) * 3;
        double* o = &out[((b * nb.centers + i) * nb.k + j) * 3];
        for (std::size_t d = 0; d < 3; ++d) o[d] = (p[d] - c[d]) / scale;
      }
    }
  return out;
}

/// Inverse squared-distance weights over the (up to) three nearest coarse
/// points of every fine point. Weights per row sum to one.
struct InterpolationWeights {
  std::size_t batch = 0;
  std::size_t fine = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> indices;  // [B][N][k]
  std::vector<double> weights;        // [B][N][k]
};

inline InterpolationWeights three_nn_weights(std::span<const double> fine_positions, std::size_t n_fine,
                                             std::span<const double> coarse_positions, std::size_t n_coarse,
                                             std::size_t batch, double eps = 1e-8) {
  if (n_coarse == 0) throw SizeError("feature propagation: empty coarse set");
  const std::size_t k = std::min<std::size_t>(3, n_coarse);
  NeighborIndex nb = knn_points(fine_positions, n_fine, coarse_positions, batch, n_coarse, k);
  InterpolationWeights w;
  w.batch = batch;
  w.fine = n_fine;
  w.k = k;
  w.indices = std::move(nb.indices);
  w.weights.resize(w.indices.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n_fine; ++i) {
      const double* f = fine_positions.data() + (b * n_fine + i) * 3;
      double total = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const auto idx = static_cast<std::size_t>(w.indices[(b * n_fine + i) * k + j]);
        const double d2 = squared_distance(f, coarse_positions.data() + (b * n_coarse + idx) * 3);
        const double r = 1.0 / (d2 + eps);
        w.weights[(b * n_fine + i) * k + j] = r;
        total += r;
      }
      for (std::size_t j = 0; j < k; ++j) w.weights[(b * n_fine + i) * k + j] /= total;
    }
  return w;
}

}  // namespace geometry
}  // namespace pointvector
