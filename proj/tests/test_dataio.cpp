#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "test_support.hpp"

using namespace pointvector;

namespace {

SceneSpec noiseless(std::size_t primitives, std::vector<Primitive> kinds, std::uint64_t seed = 1) {
  SceneSpec s;
  s.num_points = 300;
  s.num_primitives = primitives;
  s.kinds = std::move(kinds);
  s.noise = 0;
  s.seed = seed;
  return s;
}

PointSetBatch parse(const std::string& text) {
  std::istringstream in(text);
  return parse_points(in, "test");
}

}  // namespace

TEST(SegmentationScene, PlaneOnlyIsCoplanar) {
  auto c = gen_segmentation_scene(noiseless(1, {Primitive::plane}));
  for (int l : *c.labels) EXPECT_EQ(l, static_cast<int>(Primitive::plane));
  const double* a = c.position(0, 0);
  const double* b = c.position(0, 1);
  const double* d = c.position(0, 2);
  double u[3], v[3], n[3];
  for (int i = 0; i < 3; ++i) u[i] = b[i] - a[i], v[i] = d[i] - a[i];
  n[0] = u[1] * v[2] - u[2] * v[1];
  n[1] = u[2] * v[0] - u[0] * v[2];
  n[2] = u[0] * v[1] - u[1] * v[0];
  const double len = std::hypot(n[0], n[1], n[2]);
  ASSERT_GT(len, 1e-6);
  for (std::size_t i = 0; i < c.points; ++i) {
    const double* p = c.position(0, i);
    double dist = 0;
    for (int k = 0; k < 3; ++k) dist += (p[k] - a[k]) * n[k] / len;
    EXPECT_LT(std::abs(dist), 1e-9);
  }
}

TEST(SegmentationScene, DeterministicPerSeed) {
  SceneSpec s;
  s.seed = 77;
  auto a = gen_segmentation_scene(s);
  auto b = gen_segmentation_scene(s);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(*a.labels, *b.labels);
  s.seed = 78;
  EXPECT_NE(gen_segmentation_scene(s).positions, a.positions);
}

TEST(SegmentationScene, HistogramMatchesAllocation) {
  auto spec = noiseless(3, {Primitive::plane, Primitive::sphere, Primitive::cylinder});
  spec.num_points = 512;
  auto c = gen_segmentation_scene(spec);
  std::map<int, std::size_t> hist;
  for (int l : *c.labels) ++hist[l];
  ASSERT_EQ(hist.size(), 3u);
  std::vector<std::size_t> counts, shares;
  for (auto [k, n] : hist) counts.push_back(n);
  for (std::size_t i = 0; i < 3; ++i) shares.push_back(dataio_detail::share(512, 3, i));
  std::sort(counts.begin(), counts.end());
  std::sort(shares.begin(), shares.end());
  EXPECT_EQ(counts, shares);
}

TEST(SegmentationScene, LabelsRecoverableByNearestPrimitive) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = noiseless(4, {Primitive::plane, Primitive::sphere, Primitive::cylinder}, seed);
    auto c = gen_segmentation_scene(spec);
    std::mt19937_64 rng(spec.seed);
    const auto poses = scene_layout(spec, rng);
    for (std::size_t i = 0; i < c.points; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < poses.size(); ++k) {
        const double d = geometry::squared_distance(c.position(0, i), poses[k].center.data());
        if (d < best_d) best_d = d, best = k;
      }
      EXPECT_EQ((*c.labels)[i], static_cast<int>(poses[best].kind));
    }
  }
}

TEST(SegmentationScene, EmptyKindSetIsConfigError) {
  SceneSpec s;
  s.kinds.clear();
  EXPECT_THROW(gen_segmentation_scene(s), ConfigError);
  EXPECT_THROW(gen_classification_set(s, 2), ConfigError);
}

TEST(ClassificationSet, SphereRadiusAndLabels) {
  auto spec = noiseless(1, {Primitive::sphere});
  for (const auto& lc : gen_classification_set(spec, 4)) {
    EXPECT_EQ(lc.label, static_cast<int>(Primitive::sphere));
    const double r0 = std::hypot(lc.cloud.positions[0], lc.cloud.positions[1], lc.cloud.positions[2]);
    for (std::size_t i = 0; i < lc.cloud.points; ++i) {
      const double* p = lc.cloud.position(0, i);
      EXPECT_NEAR(std::hypot(p[0], p[1], p[2]), r0, 1e-12);
    }
  }
  spec.noise = 0.01;
  for (const auto& lc : gen_classification_set(spec, 2)) {
    double mean = 0;
    for (std::size_t i = 0; i < lc.cloud.points; ++i) mean += std::hypot(lc.cloud.position(0, i)[0], lc.cloud.position(0, i)[1], lc.cloud.position(0, i)[2]);
    mean /= static_cast<double>(lc.cloud.points);
    std::size_t outside = 0;
    for (std::size_t i = 0; i < lc.cloud.points; ++i) {
      const double* p = lc.cloud.position(0, i);
      if (std::abs(std::hypot(p[0], p[1], p[2]) - mean) > 3 * spec.noise) ++outside;
    }
    EXPECT_LE(outside, lc.cloud.points / 50);  // 3 sigma, radial component is 1-D Gaussian
  }
}

TEST(ClassificationSet, DeterministicAndCoversRequestedKinds) {
  SceneSpec spec;
  spec.num_points = 64;
  spec.kinds = {Primitive::sphere, Primitive::cylinder};
  auto a = gen_classification_set(spec, 6);
  auto b = gen_classification_set(spec, 6);
  std::set<int> labels;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a[i].cloud.positions, b[i].cloud.positions);
    labels.insert(a[i].label);
  }
  EXPECT_EQ(labels, (std::set<int>{1, 2}));
}

TEST(PointFile, RoundTripIsBitExact) {
  auto dir = pvtest::temp_dir("points");
  std::mt19937_64 rng(6);
  auto c = pvtest::random_cloud(1, 50, 1, rng, 1e3);
  c.labels = std::vector<int>(50);
  for (std::size_t i = 0; i < 50; ++i) (*c.labels)[i] = static_cast<int>(i % 3);
  const auto path = (dir / "c.xyz").string();
  write_points(path, c);
  auto r = read_points(path);
  EXPECT_EQ(r.positions, c.positions);
  EXPECT_EQ(*r.labels, *c.labels);
  EXPECT_EQ(r.channels, 4u);
}

TEST(PointFile, ParseErrors) {
  try {
    parse("0 0 0\n1 2\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 2u);
  }
  EXPECT_THROW(parse("1 2 x\n"), ParseError);
  EXPECT_THROW(parse("1 2 3 -1\n"), ParseError);
  EXPECT_THROW(parse("1 2 3\n1 2 3 0\n"), FormatError);
  EXPECT_THROW(parse("# nothing here\n\n"), DataError);
  EXPECT_THROW(read_points("/nonexistent/file.xyz"), DataError);
}

TEST(PointFile, CommentsAndBlankLines) {
  auto c = parse("# header\n1 2 3 # trailing\n\n4 5 6\n");
  EXPECT_EQ(c.points, 2u);
  EXPECT_FALSE(c.labels.has_value());
  EXPECT_EQ(c.positions, (std::vector<double>{1, 2, 3, 4, 5, 6}));
}

TEST(Manifest, RoundTripAndRelativePaths) {
  auto dir = pvtest::temp_dir("manifest");
  write_manifest((dir / "m.txt").string(), {{Split::train, "a.xyz"}, {Split::test, "/abs/b.xyz"}});
  auto m = read_manifest((dir / "m.txt").string());
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].split, Split::train);
  EXPECT_EQ(m[0].path, (dir / "a.xyz").string());
  EXPECT_EQ(m[1].path, "/abs/b.xyz");
  std::ofstream(dir / "bad.txt") << "holdout x.xyz\n";
  EXPECT_THROW(read_manifest((dir / "bad.txt").string()), ParseError);
}

TEST(Manifest, DatasetFromDisk) {
  auto dir = pvtest::temp_dir("manifest_ds");
  SceneSpec spec;
  spec.num_points = 32;
  std::vector<ManifestEntry> entries;
  auto scenes = gen_segmentation_set(spec, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string name = "s" + std::to_string(i) + ".xyz";
    write_points((dir / name).string(), scenes[i]);
    entries.push_back({i < 2 ? Split::train : Split::val, name});
  }
  write_manifest((dir / "manifest.txt").string(), entries);
  DataConfig dc;
  dc.manifest = (dir / "manifest.txt").string();
  auto ds = make_dataset(dc);
  ASSERT_EQ(ds.train.size(), 2u);
  ASSERT_EQ(ds.val.size(), 1u);
  EXPECT_EQ(ds.val[0].cloud.positions, scenes[2].positions);
}
