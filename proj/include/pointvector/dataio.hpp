#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pointvector/geometry.hpp"
#include "pointvector/model.hpp"

namespace pointvector {

enum class Primitive { plane = 0, sphere = 1, cylinder = 2 };
inline constexpr std::size_t kPrimitiveKinds = 3;

inline const char* to_string(Primitive p) {
  switch (p) {
    case Primitive::plane: return "plane";
    case Primitive::sphere: return "sphere";
    case Primitive::cylinder: return "cylinder";
  }
  return "?";
}

inline Primitive parse_primitive(const std::string& s) {
  if (s == "plane") return Primitive::plane;
  if (s == "sphere") return Primitive::sphere;
  if (s == "cylinder") return Primitive::cylinder;
  throw ConfigError("unknown primitive '" + s + "' (expected plane|sphere|cylinder)");
}

struct SceneSpec {
  std::size_t num_points = 512;
  std::size_t num_primitives = 3;
  std::vector<Primitive> kinds{Primitive::plane, Primitive::sphere, Primitive::cylinder};
  double noise = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (kinds.empty()) throw ConfigError("scene spec: primitive kind set is empty");
    if (num_primitives == 0) throw ConfigError("scene spec: need at least one primitive");
    if (num_points < num_primitives) throw ConfigError("scene spec: fewer points than primitives");
    if (!(noise >= 0) || !std::isfinite(noise)) throw ConfigError("scene spec: noise must be finite and >= 0");
  }
};

/// Shape and pose of one sampled primitive.
struct PrimitivePose {
  Primitive kind = Primitive::plane;
  std::array<double, 3> center{};
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, local -> world
  double size_a = 1;  // plane side, sphere/cylinder radius
  double size_b = 1;  // cylinder height
};

/// Fills features with the 4 derived channels (centered xyz and height).
inline void attach_derived_features(PointSetBatch& cloud) {
  cloud.features = derived_features(cloud);
  cloud.channels = 4;
}

namespace dataio_detail {

inline std::array<double, 9> random_rotation(std::mt19937_64& rng) {
  // Uniform via normalized quaternion.
  std::normal_distribution<double> n(0.0, 1.0);
  double q[4];
  double norm = 0;
  do {
    norm = 0;
    for (double& v : q) {
      v = n(rng);
      norm += v * v;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (double& v : q) v /= norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

inline std::array<double, 3> local_sample(const PrimitivePose& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  switch (p.kind) {
    case Primitive::plane:
      return {(u(rng) - 0.5) * p.size_a, (u(rng) - 0.5) * p.size_a, 0.0};
    case Primitive::sphere: {
      const double z = 2 * u(rng) - 1, phi = 2 * std::numbers::pi * u(rng), s = std::sqrt(std::max(0.0, 1 - z * z));
      return {p.size_a * s * std::cos(phi), p.size_a * s * std::sin(phi), p.size_a * z};
    }
    case Primitive::cylinder: {
      const double phi = 2 * std::numbers::pi * u(rng);
      return {p.size_a * std::cos(phi), p.size_a * std::sin(phi), (u(rng) - 0.5) * p.size_b};
    }
  }
  return {0, 0, 0};
}

inline PrimitivePose random_pose(Primitive kind, std::array<double, 3> center, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PrimitivePose p;
  p.kind = kind;
  p.center = center;
  p.rotation = random_rotation(rng);
  switch (kind) {
    case Primitive::plane: p.size_a = 0.9 + 0.3 * u(rng); break;
    case Primitive::sphere: p.size_a = 0.3 + 0.2 * u(rng); break;
    case Primitive::cylinder:
      p.size_a = 0.2 + 0.15 * u(rng);
      p.size_b = 0.7 + 0.3 * u(rng);
      break;
  }
  return p;
}

/// Samples `count` noisy points of `pose` into `cloud` starting at row `first`.
inline void emit(PointSetBatch& cloud, std::size_t first, std::size_t count, const PrimitivePose& pose, double noise,
                 std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto l = local_sample(pose, rng);
    double* out = &cloud.positions[(first + i) * 3];
    for (int r = 0; r < 3; ++r) {
      out[r] = pose.center[r];
      for (int c = 0; c < 3; ++c) out[r] += pose.rotation[r * 3 + c] * l[c];
    }
    if (noise > 0)
      for (int r = 0; r < 3; ++r) out[r] += noise * n(rng);
    (*cloud.labels)[first + i] = static_cast<int>(pose.kind);
  }
}

inline std::size_t share(std::size_t total, std::size_t parts, std::size_t i) {
  return total / parts + (i < total % parts ? 1 : 0);
}

}  // namespace dataio_detail

/// Seed of item `index` of a dataset generated from `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Primitives placed on a shuffled grid with 2.5 spacing, so they never touch.
/// Label of a point = kind id of its primitive (plane 0, sphere 1, cylinder 2).
inline std::vector<PrimitivePose> scene_layout(const SceneSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const std::size_t n = spec.num_primitives;
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<std::size_t> cells(side * side);
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  const std::size_t offset = std::uniform_int_distribution<std::size_t>(0, spec.kinds.size() - 1)(rng);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2), lift(0.0, 0.5);
  std::vector<PrimitivePose> poses;
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = 2.5 * static_cast<double>(cells[i] % side) + jitter(rng);
    const double cy = 2.5 * static_cast<double>(cells[i] / side) + jitter(rng);
    const double cz = lift(rng);
    poses.push_back(dataio_detail::random_pose(spec.kinds[(i + offset) % spec.kinds.size()], {cx, cy, cz}, rng));
  }
  return poses;
}

inline PointSetBatch gen_segmentation_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const auto poses = scene_layout(spec, rng);
  PointSetBatch cloud;
  cloud.batch = 1;
  cloud.points = spec.num_points;
  cloud.positions.assign(spec.num_points * 3, 0.0);
  cloud.labels = std::vector<int>(spec.num_points, 0);
  std::size_t first = 0;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const std::size_t count = dataio_detail::share(spec.num_points, poses.size(), i);
    dataio_detail::emit(cloud, first, count, poses[i], spec.noise, rng);
    first += count;
  }
  attach_derived_features(cloud);
  return cloud;
}

struct LabeledCloud {
  PointSetBatch cloud;
  int label = 0;
};

/// `count` single-primitive clouds centered at the origin; cloud i uses
/// kinds[i % kinds.size()] and carries that kind id as its label.
inline std::vector<LabeledCloud> gen_classification_set(const SceneSpec& spec, std::size_t count) {
  spec.validate();
  std::vector<LabeledCloud> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, i));
    const Primitive kind = spec.kinds[i % spec.kinds.size()];
    const auto pose = dataio_detail::random_pose(kind, {0, 0, 0}, rng);
    LabeledCloud lc;
    lc.label = static_cast<int>(kind);
    lc.cloud.batch = 1;
    lc.cloud.points = spec.num_points;
    lc.cloud.positions.assign(spec.num_points * 3, 0.0);
    lc.cloud.labels = std::vector<int>(spec.num_points, lc.label);
    dataio_detail::emit(lc.cloud, 0, spec.num_points, pose, spec.noise, rng);
    attach_derived_features(lc.cloud);
    out.push_back(std::move(lc));
  }
  return out;
}

/// `count` scenes, scene i seeded with derive_seed(spec.seed, i).
inline std::vector<PointSetBatch> gen_segmentation_set(const SceneSpec& spec, std::size_t count) {
  std::vector<PointSetBatch> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    out.push_back(gen_segmentation_scene(s));
  }
  return out;
}

// --- text point files: `x y z [label]` per line, '#' starts a comment ---

namespace dataio_detail {

inline bool parse_double(std::string_view tok, double& v) {
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  return ec == std::errc{} && ptr == tok.data() + tok.size();
}

inline bool parse_int(std::string_view tok, int& v) {
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  return ec == std::errc{} && ptr == tok.data() + tok.size();
}

inline std::vector<std::string_view> tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace dataio_detail

inline PointSetBatch parse_points(std::istream& in, const std::string& source = "<stream>") {
  PointSetBatch cloud;
  cloud.batch = 1;
  std::vector<int> labels;
  std::size_t columns = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    const auto toks = dataio_detail::tokens(view);
    if (toks.empty()) continue;
    if (toks.size() != 3 && toks.size() != 4)
      throw ParseError(source + ": expected 'x y z [label]', got " + std::to_string(toks.size()) + " fields", line_no);
    if (columns == 0) columns = toks.size();
    if (toks.size() != columns)
      throw FormatError(source + ": line " + std::to_string(line_no) + " has " + std::to_string(toks.size()) +
                        " columns, earlier lines have " + std::to_string(columns));
    for (int d = 0; d < 3; ++d) {
      double v;
      if (!dataio_detail::parse_double(toks[d], v) || !std::isfinite(v))
        throw ParseError(source + ": bad coordinate '" + std::string(toks[d]) + "'", line_no);
      cloud.positions.push_back(v);
    }
    if (columns == 4) {
      int l;
      if (!dataio_detail::parse_int(toks[3], l) || l < 0)
        throw ParseError(source + ": bad label '" + std::string(toks[3]) + "'", line_no);
      labels.push_back(l);
    }
  }
  cloud.points = cloud.positions.size() / 3;
  if (cloud.points == 0) throw DataError(source + ": point file contains no points");
  if (columns == 4) cloud.labels = std::move(labels);
  attach_derived_features(cloud);
  return cloud;
}

inline PointSetBatch read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open point file " + path);
  return parse_points(in, path);
}

/// Writes batch entry `b` with 17 significant digits (exact round trip).
inline void write_points(const std::string& path, const PointSetBatch& cloud, std::size_t b = 0) {
  if (b >= cloud.batch) throw SizeError("write_points: batch index out of range");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  char buf[128];
  for (std::size_t i = 0; i < cloud.points; ++i) {
    const double* p = cloud.position(b, i);
    int len = std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g", p[0], p[1], p[2]);
    out.write(buf, len);
    if (cloud.labels) out << ' ' << (*cloud.labels)[b * cloud.points + i];
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

// --- manifest: one `train|val|test <path>` entry per line ---

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct ManifestEntry {
  Split split = Split::train;
  std::string path;
};

/// Relative paths are resolved against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    const auto toks = dataio_detail::tokens(view);
    if (toks.empty()) continue;
    if (toks.size() != 2) throw ParseError(path + ": expected '<split> <path>'", line_no);
    ManifestEntry e;
    if (toks[0] == "train") e.split = Split::train;
    else if (toks[0] == "val") e.split = Split::val;
    else if (toks[0] == "test") e.split = Split::test;
    else throw ParseError(path + ": unknown split '" + std::string(toks[0]) + "'", line_no);
    std::filesystem::path p(toks[1]);
    e.path = (p.is_absolute() ? p : base / p).string();
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  for (const auto& e : entries) out << to_string(e.split) << ' ' << e.path << '\n';
}

}  // namespace pointvector
