#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pointvector/checkpoint.hpp"
#include "pointvector/dataio.hpp"
#include "pointvector/model.hpp"

namespace pointvector {

// ---------------------------------------------------------------- optimizer

struct AdamWHyper {
  double lr = 0.002;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamWState {
  std::vector<std::vector<double>> m, v;  // indexed by ParamId, empty for buffers
  std::uint64_t step = 0;
};

/// One decoupled-decay Adam update of every trainable tensor:
///   p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps)
/// Parameters without a gradient entry are treated as having zero gradient.
template <class T>
void adamw_step(ParamStore<T>& store, const Gradients<T>& grads, AdamWState<T>& state, const AdamWHyper& h) {
  if (state.m.size() != store.size()) {
    if (state.step != 0) throw ContractError("adamw_step: optimizer state does not match parameter store");
    state.m.assign(store.size(), {});
    state.v.assign(store.size(), {});
  }
  for (ParamId id = 0; id < store.size(); ++id) {
    const auto& e = store.entry(id);
    if (!e.trainable) continue;
    if (const Tensor<T>* g = grads.param(id)) {
      for (T x : g->data)
        if (!std::isfinite(x)) throw NumericFault("non-finite gradient for parameter " + e.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t), c2 = 1.0 - std::pow(h.beta2, t);
  for (ParamId id = 0; id < store.size(); ++id) {
    auto& e = store.entry(id);
    if (!e.trainable) continue;
    auto& m = state.m[id];
    auto& v = state.v[id];
    const std::size_t n = e.value.numel();
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    const Tensor<T>* g = grads.param(id);
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g ? static_cast<double>(g->data[i]) : 0.0;
      m[i] = h.beta1 * m[i] + (1 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1 - h.beta2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      const double p = static_cast<double>(e.value.data[i]);
      e.value.data[i] = static_cast<T>(p - h.lr * h.weight_decay * p - h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (step > total) throw ContractError("cosine_lr: step beyond schedule");
  if (total == 0) return lr0;
  return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total))) / 2.0;
}

// ------------------------------------------------------------------ metrics

/// Rows are ground truth, columns predictions.
struct Confusion {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  Confusion() = default;
  explicit Confusion(std::size_t k) : classes(k), counts(k * k, 0) {}
  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * classes + pred]; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }
  void add(int gt, int pred) { ++at(static_cast<std::size_t>(gt), static_cast<std::size_t>(pred)); }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

struct Metrics {
  double oa = 0, macc = 0, miou = 0;
};

/// Classes absent from both ground truth and predictions are left out of the
/// means. A class present only in predictions counts with recall excluded and
/// IoU 0.
inline Metrics metrics(const Confusion& c) {
  const std::size_t k = c.classes;
  const std::uint64_t total = c.total();
  if (total == 0) throw DataError("metrics: confusion matrix is empty");
  std::uint64_t tp_sum = 0;
  double acc_sum = 0, iou_sum = 0;
  std::size_t acc_n = 0, iou_n = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += c.at(i, j);
      col += c.at(j, i);
    }
    const std::uint64_t tp = c.at(i, i);
    tp_sum += tp;
    if (row == 0 && col == 0) continue;
    if (row > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(row);
      ++acc_n;
    }
    iou_sum += static_cast<double>(tp) / static_cast<double>(row + col - tp);
    ++iou_n;
  }
  Metrics m;
  m.oa = static_cast<double>(tp_sum) / static_cast<double>(total);
  m.macc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
  m.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
  return m;
}

// ------------------------------------------------------------- augmentation

struct AugmentSpec {
  double rotate_z = 0;  // radians
  double shift = 0;     // added to every coordinate
  double scale = 1;
  bool jitter = false;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
};

/// Applies rotation about z, then scale, then shift, then jitter, to every
/// batch entry, and recomputes derived features when the cloud carries them.
inline PointSetBatch augment(PointSetBatch cloud, const AugmentSpec& spec, std::mt19937_64& rng) {
  const double c = std::cos(spec.rotate_z), s = std::sin(spec.rotate_z);
  std::normal_distribution<double> noise(0.0, spec.jitter_sigma);
  for (std::size_t i = 0; i < cloud.batch * cloud.points; ++i) {
    double* p = &cloud.positions[i * 3];
    const double x = p[0], y = p[1];
    if (spec.rotate_z != 0) {
      p[0] = c * x - s * y;
      p[1] = s * x + c * y;
    }
    for (int d = 0; d < 3; ++d) {
      if (spec.scale != 1) p[d] *= spec.scale;
      p[d] += spec.shift;
      if (spec.jitter) p[d] += std::clamp(noise(rng), -spec.jitter_clip, spec.jitter_clip);
    }
  }
  if (cloud.channels == 4) attach_derived_features(cloud);
  return cloud;
}

// ------------------------------------------------------------------ dataset

struct Sample {
  PointSetBatch cloud;  // batch 1
  int label = 0;        // classification target; unused for segmentation
};

struct Dataset {
  Task task = Task::segmentation;
  std::size_t num_classes = 3;
  std::vector<Sample> train, val, test;
};

struct DataConfig {
  Task task = Task::segmentation;
  std::size_t train_scenes = 160;
  std::size_t val_scenes = 40;
  std::size_t test_scenes = 0;
  SceneSpec scene;
  std::optional<std::string> manifest;  // read clouds from disk instead of generating

  void validate() const {
    scene.validate();
    if (!manifest && train_scenes == 0) throw ConfigError("data: train_scenes must be > 0");
  }
};

inline std::vector<Sample> to_samples(std::vector<PointSetBatch> clouds) {
  std::vector<Sample> out;
  for (auto& c : clouds) out.push_back(Sample{std::move(c), 0});
  return out;
}

/// Synthetic dataset; each split uses an independent seed stream.
inline Dataset make_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.task = cfg.task;
  d.num_classes = kPrimitiveKinds;
  if (cfg.manifest) {
    for (const auto& e : read_manifest(*cfg.manifest)) {
      Sample s{read_points(e.path), 0};
      if (!s.cloud.labels) throw DataError(e.path + ": point file has no label column");
      if (cfg.task == Task::classification) s.label = s.cloud.labels->front();
      (e.split == Split::train ? d.train : e.split == Split::val ? d.val : d.test).push_back(std::move(s));
    }
    if (d.train.empty()) throw DataError(*cfg.manifest + ": manifest lists no train clouds");
    return d;
  }
  auto split = [&](std::size_t count, std::uint64_t stream) {
    SceneSpec s = cfg.scene;
    s.seed = derive_seed(cfg.scene.seed, stream);
    if (cfg.task == Task::segmentation) return to_samples(gen_segmentation_set(s, count));
    std::vector<Sample> out;
    for (auto& lc : gen_classification_set(s, count)) out.push_back(Sample{std::move(lc.cloud), lc.label});
    return out;
  };
  d.train = split(cfg.train_scenes, 1001);
  d.val = split(cfg.val_scenes, 1002);
  d.test = split(cfg.test_scenes, 1003);
  return d;
}

/// Stacks samples (same point count) into one batch.
inline PointSetBatch collate(const std::vector<Sample>& samples, std::span<const std::size_t> order) {
  if (order.empty()) throw SizeError("collate: empty batch");
  const auto& first = samples.at(order[0]).cloud;
  PointSetBatch b;
  b.batch = order.size();
  b.points = first.points;
  b.channels = first.channels;
  const bool labels = first.labels.has_value();
  if (labels) b.labels = std::vector<int>{};
  for (std::size_t i : order) {
    const auto& c = samples.at(i).cloud;
    if (c.points != b.points || c.channels != b.channels)
      throw SizeError("collate: clouds differ in point or channel count");
    b.positions.insert(b.positions.end(), c.positions.begin(), c.positions.end());
    b.features.insert(b.features.end(), c.features.begin(), c.features.end());
    if (labels) b.labels->insert(b.labels->end(), c.labels->begin(), c.labels->end());
  }
  return b;
}

// -------------------------------------------------------------------- loops

struct TrainConfig {
  double lr0 = 0.002;
  double weight_decay = 1e-4;
  std::size_t epochs = 20;   // toy budget; the synthetic task converges well inside it
  std::size_t batch_size = 4;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  bool augment_rotate = true;  // random z rotation per training sample
  bool augment_jitter = true;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
  bool timing_in_csv = false;  // wall_ms is written as 0 unless set, keeping CSVs reproducible

  void validate() const {
    if (!(lr0 >= 0) || !std::isfinite(lr0)) throw ConfigError("train: lr0 must be >= 0, got " + std::to_string(lr0));
    if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be >= 0");
    if (!(label_smoothing >= 0 && label_smoothing < 1))
      throw ConfigError("train: label_smoothing must lie in [0, 1)");
    if (epochs == 0) throw ConfigError("train: epochs must be > 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
    if (!(jitter_sigma >= 0) || !(jitter_clip >= 0)) throw ConfigError("train: jitter parameters must be >= 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0, lr = 0;
  Metrics m;
  double wall_ms = 0;
};

template <class T>
struct TrainReport {
  std::vector<EpochRecord> rows;
  Confusion final_confusion;  // validation confusion of the best epoch
  std::size_t best_epoch = 0;
  Metrics best;
  ParamStore<T> best_params;
};

struct EvalResult {
  double loss = 0;
  Confusion confusion;
  Metrics m;
};

namespace train_detail {

/// Targets and predictions of one forward pass, flattened.
template <class T>
std::pair<std::vector<int>, std::vector<int>> targets_and_predictions(Task task, const Tensor<T>& logits,
                                                                      const PointSetBatch& batch,
                                                                      const std::vector<Sample>& samples,
                                                                      std::span<const std::size_t> order) {
  std::vector<int> target;
  if (task == Task::segmentation) {
    if (!batch.labels) throw DataError("segmentation sample without labels");
    target = *batch.labels;
  } else {
    for (std::size_t i : order) target.push_back(samples[i].label);
  }
  const std::size_t k = logits.last();
  std::vector<int> pred(logits.rows());
  for (std::size_t r = 0; r < pred.size(); ++r) {
    const T* row = &logits.data[r * k];
    pred[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return {std::move(target), std::move(pred)};
}

}  // namespace train_detail

/// Eval-mode pass over `samples` in fixed order. `scale` is the joint
/// position scale passed to the model (1 for ordinary evaluation).
template <class T>
EvalResult evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t batch_size,
                    double label_smoothing, double scale = 1.0,
                    const std::function<PointSetBatch(PointSetBatch)>& transform = {}) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  EvalResult r;
  r.confusion = Confusion(model.cfg.num_classes);
  double loss_sum = 0;
  std::size_t rows = 0;
  auto& params = const_cast<ParamStore<T>&>(model.params);  // eval mode never writes
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::size_t> order;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) order.push_back(i);
    PointSetBatch batch = collate(samples, order);
    if (transform) batch = transform(std::move(batch));
    Tape<T> tape;
    Context<T> ctx{tape, params, Mode::eval};
    ctx.position_scale = scale;
    Var logits = forward(ctx, model, batch);
    const auto& lv = tape.value(logits);
    auto [target, pred] = train_detail::targets_and_predictions(model.cfg.task, lv, batch, samples, order);
    Var loss = ops::ce_label_smoothing(tape, logits, std::span<const int>(target), label_smoothing);
    loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(target.size());
    rows += target.size();
    for (std::size_t i = 0; i < target.size(); ++i) r.confusion.add(target[i], pred[i]);
  }
  r.loss = loss_sum / static_cast<double>(rows);
  r.m = metrics(r.confusion);
  return r;
}

inline std::string csv_header() { return "epoch,split,loss,lr,oa,macc,miou,wall_ms"; }

inline std::string csv_row(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.0f", r.epoch, r.split.c_str(), r.loss, r.lr,
                r.m.oa, r.m.macc, r.m.miou, r.wall_ms);
  return buf;
}

struct TrainHooks {
  std::optional<std::string> csv_path;
  std::optional<std::string> checkpoint_path;
  std::string checkpoint_meta;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const std::string&)> log;
};

/// Trains a fresh model built from `model_cfg` with seed `train_cfg.seed`.
/// Every epoch ends with an eval pass over the validation split (or the train
/// split when there is none); the best epoch by mIoU (segmentation) or OA
/// (classification) is kept and optionally checkpointed.
template <class T>
TrainReport<T> train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg, const Dataset& data,
                          const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.train.empty()) throw DataError("train_loop: training split is empty");
  if (model_cfg.task != data.task) throw ConfigError("train_loop: model task does not match dataset task");
  Model<T> model = build_model<T>(model_cfg, cfg.seed);
  const auto& val = data.val.empty() ? data.train : data.val;

  std::mt19937_64 rng(derive_seed(cfg.seed, 7));
  const std::size_t steps_per_epoch = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  AdamWState<T> opt;
  AdamWHyper hyper;
  hyper.weight_decay = cfg.weight_decay;

  std::ofstream csv;
  if (hooks.csv_path) {
    csv.open(*hooks.csv_path, std::ios::trunc | std::ios::binary);
    if (!csv) throw ConfigError("cannot open " + *hooks.csv_path + " for writing");
    csv << csv_header() << '\n';
  }

  TrainReport<T> report;
  report.best_params = model.params;
  bool have_best = false;
  std::size_t step = 0;
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Confusion conf(model_cfg.num_classes);
    double loss_sum = 0, lr = cfg.lr0;
    std::size_t loss_rows = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      PointSetBatch batch = collate(data.train, idx);
      if (cfg.augment_rotate || cfg.augment_jitter) {
        std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
        AugmentSpec a;
        a.rotate_z = cfg.augment_rotate ? angle(rng) : 0.0;
        a.jitter = cfg.augment_jitter;
        a.jitter_sigma = cfg.jitter_sigma;
        a.jitter_clip = cfg.jitter_clip;
        batch = augment(std::move(batch), a, rng);
      }
      Tape<T> tape;
      Context<T> ctx{tape, model.params, Mode::train};
      Var logits = forward(ctx, model, batch);
      auto [target, pred] =
          train_detail::targets_and_predictions(model_cfg.task, tape.value(logits), batch, data.train, idx);
      Var loss = ops::ce_label_smoothing(tape, logits, std::span<const int>(target), cfg.label_smoothing);
      const double lv = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(lv))
        throw NumericFault("training diverged: loss is " + std::to_string(lv) + " at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step));
      loss_sum += lv * static_cast<double>(target.size());
      loss_rows += target.size();
      for (std::size_t i = 0; i < target.size(); ++i) conf.add(target[i], pred[i]);
      Gradients<T> grads = tape.backward(loss);
      lr = cosine_lr(step, total_steps, cfg.lr0);
      hyper.lr = lr;
      adamw_step(model.params, grads, opt, hyper);
      ++step;
    }
    const double train_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    EpochRecord tr{epoch, "train", loss_sum / static_cast<double>(loss_rows), lr, metrics(conf),
                   cfg.timing_in_csv ? std::round(train_ms) : 0.0};

    const auto t1 = std::chrono::steady_clock::now();
    EvalResult ev = evaluate(model, val, cfg.batch_size, cfg.label_smoothing);
    const double val_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();
    EpochRecord vr{epoch, "val", ev.loss, lr, ev.m, cfg.timing_in_csv ? std::round(val_ms) : 0.0};

    for (const auto* r : {&tr, &vr}) {
      report.rows.push_back(*r);
      if (csv) csv << csv_row(*r) << '\n';
      if (hooks.on_epoch) hooks.on_epoch(*r);
    }
    if (csv) csv.flush();
    if (hooks.log) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "epoch %zu train loss %.4f oa %.4f | val loss %.4f oa %.4f miou %.4f (%.0f ms)",
                    epoch, tr.loss, tr.m.oa, vr.loss, vr.m.oa, vr.m.miou, train_ms + val_ms);
      hooks.log(buf);
    }
    const double score = model_cfg.task == Task::segmentation ? ev.m.miou : ev.m.oa;
    const double best = model_cfg.task == Task::segmentation ? report.best.miou : report.best.oa;
    if (!have_best || score > best) {
      have_best = true;
      report.best_epoch = epoch;
      report.best = ev.m;
      report.final_confusion = ev.confusion;
      report.best_params = model.params;
      if (hooks.checkpoint_path) save_checkpoint(*hooks.checkpoint_path, model.params, hooks.checkpoint_meta);
    }
  }
  return report;
}

// ------------------------------------------------------ perturbation harness

enum class PerturbationKind { none, rotate_z, shift, scale, jitter };

struct Perturbation {
  std::string name;
  PerturbationKind kind = PerturbationKind::none;
  double value = 0;
  bool rescale_radius = false;  // scale only: grow query radii with the cloud
};

/// None, z-rotations pi/2, pi, 3pi/2, shifts +-0.2, scales 0.8 and 1.2, jitter.
inline std::vector<Perturbation> standard_perturbations() {
  using K = PerturbationKind;
  const double pi = std::numbers::pi;
  return {{"none", K::none, 0},           {"rot_pi/2", K::rotate_z, pi / 2}, {"rot_pi", K::rotate_z, pi},
          {"rot_3pi/2", K::rotate_z, 3 * pi / 2}, {"shift_+0.2", K::shift, 0.2}, {"shift_-0.2", K::shift, -0.2},
          {"scale_0.8", K::scale, 0.8},   {"scale_1.2", K::scale, 1.2},      {"jitter", K::jitter, 0}};
}

struct PerturbationResult {
  Perturbation perturbation;
  Metrics m;
  double delta_miou = 0;  // relative to the unperturbed eval
  double delta_oa = 0;
};

template <class T>
std::vector<PerturbationResult> perturbation_eval(const Model<T>& model, const std::vector<Sample>& samples,
                                                  const std::vector<Perturbation>& list, std::size_t batch_size = 8,
                                                  std::uint64_t seed = 0, double jitter_sigma = 0.01,
                                                  double jitter_clip = 0.05) {
  const EvalResult clean = evaluate(model, samples, batch_size, 0.0);
  std::vector<PerturbationResult> out;
  for (const auto& p : list) {
    AugmentSpec a;
    double scale = 1.0;
    switch (p.kind) {
      case PerturbationKind::none: break;
      case PerturbationKind::rotate_z: a.rotate_z = p.value; break;
      case PerturbationKind::shift: a.shift = p.value; break;
      case PerturbationKind::scale:
        a.scale = p.value;
        if (p.rescale_radius) scale = p.value;
        break;
      case PerturbationKind::jitter:
        a.jitter = true;
        a.jitter_sigma = jitter_sigma;
        a.jitter_clip = jitter_clip;
        break;
    }
    Metrics m = clean.m;
    if (p.kind != PerturbationKind::none) {
      std::mt19937_64 rng(seed);
      m = evaluate(model, samples, batch_size, 0.0, scale,
                   [&](PointSetBatch b) { return augment(std::move(b), a, rng); })
              .m;
    }
    out.push_back({p, m, m.miou - clean.m.miou, m.oa - clean.m.oa});
  }
  return out;
}

}  // namespace pointvector
