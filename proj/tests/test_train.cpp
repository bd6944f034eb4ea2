#include <gtest/gtest.h>

#include <fstream>
#include <numbers>

#include "test_support.hpp"

using namespace pointvector;

namespace {

/// 8 single-primitive clouds, planes (0) and spheres (1).
Dataset overfit_set() {
  SceneSpec spec;
  spec.num_points = 64;
  spec.num_primitives = 1;
  spec.kinds = {Primitive::plane, Primitive::sphere};
  spec.seed = 42;
  Dataset d;
  d.task = Task::classification;
  d.num_classes = 2;
  for (auto& lc : gen_classification_set(spec, 8)) d.train.push_back(Sample{lc.cloud, lc.label});
  return d;
}

Dataset small_seg_set(std::size_t train, std::size_t val, std::size_t points) {
  DataConfig dc;
  dc.train_scenes = train;
  dc.val_scenes = val;
  dc.scene.num_points = points;
  return make_dataset(dc);
}

}  // namespace

TEST(AdamW, PureDecay) {
  ParamStore<double> s;
  const ParamId p = s.add("p", Tensor<double>({1}, 1.0));
  AdamWState<double> st;
  AdamWHyper h;
  h.lr = 0.01;
  h.weight_decay = 0.1;
  adamw_step(s, Gradients<double>{}, st, h);
  EXPECT_NEAR(s.value(p)[0], 0.999, 1e-15);
}

TEST(AdamW, FirstStepMovesByLrTimesSign) {
  ParamStore<double> s;
  const ParamId p = s.add("p", Tensor<double>({2}, std::vector<double>{1.0, 1.0}));
  Tape<double> t;
  Var x = t.param(s, p);
  // loss = 3*x0 - 0.5*x1
  Var w = t.leaf(Tensor<double>({2}, std::vector<double>{3.0, -0.5}));
  auto g = t.backward(ops::sum(t, ops::mul(t, x, w)));
  AdamWState<double> st;
  AdamWHyper h;
  h.lr = 0.01;
  h.weight_decay = 0;
  adamw_step(s, g, st, h);
  EXPECT_NEAR(s.value(p)[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(s.value(p)[1], 1.0 + 0.01, 1e-9);
}

TEST(AdamW, NanGradientIsNumericFault) {
  ParamStore<double> s;
  const ParamId p = s.add("p", Tensor<double>({1}, 1.0));
  Tape<double> t;
  Var x = t.param(s, p);
  Var w = t.leaf(Tensor<double>({1}, std::numeric_limits<double>::quiet_NaN()));
  auto g = t.backward(ops::sum(t, ops::mul(t, x, w)));
  AdamWState<double> st;
  EXPECT_THROW(adamw_step(s, g, st, AdamWHyper{}), NumericFault);
}

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 100, 0.002), 0.002);
  EXPECT_NEAR(cosine_lr(100, 100, 0.002), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(50, 100, 0.002), 0.001, 1e-15);
  EXPECT_THROW(cosine_lr(101, 100, 0.002), ContractError);
}

TEST(Metrics, Examples) {
  Confusion perfect(3);
  for (int i = 0; i < 3; ++i) perfect.at(i, i) = 5;
  auto p = metrics(perfect);
  EXPECT_EQ(p.oa, 1.0);
  EXPECT_EQ(p.macc, 1.0);
  EXPECT_EQ(p.miou, 1.0);

  Confusion c(2);
  c.counts = {1, 1, 0, 2};
  auto m = metrics(c);
  EXPECT_DOUBLE_EQ(m.oa, 0.75);
  EXPECT_DOUBLE_EQ(m.macc, 0.75);
  EXPECT_DOUBLE_EQ(m.miou, 7.0 / 12.0);

  Confusion e(3);
  e.counts = {1, 1, 0, 0, 2, 0, 0, 0, 0};  // class 2 absent everywhere
  EXPECT_DOUBLE_EQ(metrics(e).miou, 7.0 / 12.0);

  EXPECT_THROW(metrics(Confusion(2)), DataError);
}

TEST(Metrics, MatchesPerClassLoop) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> u(0, 9);
  for (int trial = 0; trial < 50; ++trial) {
    Confusion c(4);
    for (auto& v : c.counts) v = static_cast<std::uint64_t>(u(rng));
    if (c.total() == 0) continue;
    double tp = 0, acc = 0, iou = 0;
    int na = 0, ni = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      double gt = 0, pr = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        gt += static_cast<double>(c.at(k, j));
        pr += static_cast<double>(c.at(j, k));
      }
      const double d = static_cast<double>(c.at(k, k));
      tp += d;
      if (gt + pr == 0) continue;
      if (gt > 0) acc += d / gt, ++na;
      iou += d / (gt + pr - d), ++ni;
    }
    auto m = metrics(c);
    EXPECT_NEAR(m.oa, tp / static_cast<double>(c.total()), 1e-15);
    EXPECT_NEAR(m.macc, acc / na, 1e-15);
    EXPECT_NEAR(m.miou, iou / ni, 1e-15);
  }
}

TEST(Augment, RotationIsIsometry) {
  std::mt19937_64 rng(2);
  auto p = pvtest::random_cloud(1, 30, 4, rng);
  AugmentSpec a;
  a.rotate_z = 1.234;
  auto q = augment(p, a, rng);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = i + 1; j < 30; ++j)
      EXPECT_NEAR(geometry::squared_distance(p.position(0, i), p.position(0, j)),
                  geometry::squared_distance(q.position(0, i), q.position(0, j)), 1e-9);
}

TEST(Augment, UnitScaleIsIdentityAndShiftMovesCentroid) {
  std::mt19937_64 rng(3);
  auto p = pvtest::random_cloud(1, 30, 2, rng);
  AugmentSpec id;
  EXPECT_EQ(augment(p, id, rng).positions, p.positions);
  AugmentSpec s;
  s.shift = 0.2;
  auto q = augment(p, s, rng);
  for (int d = 0; d < 3; ++d) {
    double a = 0, b = 0;
    for (std::size_t i = 0; i < 30; ++i) a += p.position(0, i)[d], b += q.position(0, i)[d];
    EXPECT_NEAR((b - a) / 30, 0.2, 1e-12);
  }
}

TEST(Augment, JitterIsClipped) {
  std::mt19937_64 rng(4);
  auto p = pvtest::random_cloud(1, 500, 2, rng);
  AugmentSpec j;
  j.jitter = true;
  j.jitter_sigma = 0.05;
  j.jitter_clip = 0.05;
  auto q = augment(p, j, rng);
  for (std::size_t i = 0; i < p.positions.size(); ++i) EXPECT_LE(std::abs(q.positions[i] - p.positions[i]), 0.05 + 1e-15);
}

TEST(TrainLoop, OverfitsEightClouds) {
  auto data = overfit_set();
  auto mc = presets::toy_classification(2);
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 8;
  tc.label_smoothing = 0;
  tc.augment_rotate = tc.augment_jitter = false;
  tc.lr0 = 0.01;
  std::vector<double> train_loss;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    if (r.split == "train") train_loss.push_back(r.loss);
  };
  auto report = train_loop<double>(mc, tc, data, hooks);
  ASSERT_EQ(train_loss.size(), 200u);
  EXPECT_LT(train_loss.back(), 0.05);
  EXPECT_EQ(report.best.oa, 1.0);
  // epoch losses after epoch 3 never rise by more than 5% above the running minimum
  double best = train_loss[2];
  for (std::size_t e = 3; e < train_loss.size(); ++e) {
    EXPECT_LE(train_loss[e], best * 1.05 + 1e-3) << "epoch " << e + 1;
    best = std::min(best, train_loss[e]);
  }
}

TEST(TrainLoop, ZeroLearningRateLeavesParametersUnchanged) {
  auto data = small_seg_set(4, 2, 64);
  auto mc = presets::toy_segmentation();
  TrainConfig tc;
  tc.epochs = 2;
  tc.lr0 = 0;
  tc.weight_decay = 0;
  auto report = train_loop<double>(mc, tc, data);
  auto fresh = build_model<double>(mc, tc.seed);
  for (ParamId id = 0; id < fresh.params.size(); ++id)
    if (fresh.params.entry(id).trainable)
      EXPECT_EQ(report.best_params.value(id).data, fresh.params.value(id).data) << fresh.params.name(id);
}

TEST(TrainLoop, DeterministicReportsAndCsv) {
  auto data = small_seg_set(6, 2, 64);
  auto mc = presets::toy_segmentation();
  TrainConfig tc;
  tc.epochs = 2;
  auto dir = pvtest::temp_dir("train_det");
  auto run = [&](const std::string& name) {
    TrainHooks hooks;
    hooks.csv_path = (dir / name).string();
    return train_loop<float>(mc, tc, data, hooks);
  };
  auto a = run("a.csv");
  auto b = run("b.csv");
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(csv_row(a.rows[i]), csv_row(b.rows[i]));
  auto slurp = [&](const std::string& n) {
    std::ifstream in(dir / n, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string csv = slurp("a.csv");
  EXPECT_EQ(csv, slurp("b.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), csv_header());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2);
  EXPECT_EQ(csv.find('\r'), std::string::npos);
}

TEST(TrainLoop, InvalidConfigAndEmptyData) {
  auto data = small_seg_set(2, 0, 32);
  TrainConfig tc;
  tc.lr0 = -1;
  EXPECT_THROW(train_loop<float>(presets::toy_segmentation(), tc, data), ConfigError);
  tc = TrainConfig{};
  tc.label_smoothing = 1.0;
  EXPECT_THROW(train_loop<float>(presets::toy_segmentation(), tc, data), ConfigError);
  Dataset empty;
  EXPECT_THROW(train_loop<float>(presets::toy_segmentation(), TrainConfig{}, empty), DataError);
}

TEST(PerturbationEval, IdentityEqualsCleanAndTableHasNineColumns) {
  auto data = small_seg_set(2, 3, 64);
  auto model = build_model<double>(presets::toy_segmentation(), 1);
  auto list = standard_perturbations();
  ASSERT_EQ(list.size(), 9u);
  auto res = perturbation_eval(model, data.val, list, 2);
  auto clean = evaluate(model, data.val, 2, 0.0);
  EXPECT_EQ(res[0].m.miou, clean.m.miou);
  EXPECT_EQ(res[0].m.oa, clean.m.oa);
  EXPECT_EQ(res[0].delta_miou, 0.0);
  for (const auto& r : res) EXPECT_TRUE(std::isfinite(r.delta_miou)) << r.perturbation.name;
}

TEST(PerturbationEval, JointScalingOfBallModelIsExact) {
  auto cfg = presets::toy_segmentation();
  cfg.radius = 0.3;
  cfg.vpsa_grouper = Grouper::ball;
  auto model = build_model<double>(cfg, 2);
  auto data = small_seg_set(2, 2, 64);
  Perturbation s{"scale_2", PerturbationKind::scale, 2.0, true};  // exact in binary floating point
  auto res = perturbation_eval(model, data.val, {s}, 2);
  auto clean = evaluate(model, data.val, 2, 0.0);
  EXPECT_EQ(res[0].m.miou, clean.m.miou);
  EXPECT_EQ(res[0].m.oa, clean.m.oa);
}
