#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pointvector/geometry.hpp"
#include "pointvector/nnops.hpp"
#include "pointvector/setabs.hpp"

namespace pointvector {

enum class Task { classification, segmentation };

inline const char* to_string(Task t) { return t == Task::classification ? "classification" : "segmentation"; }

inline Task parse_task(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + s + "' (expected classification|segmentation)");
}

enum class Grouper { knn, ball };

struct ModelConfig {
  std::size_t embed_channels = 32;
  std::vector<std::size_t> sa_per_stage{1, 1, 1, 1};
  std::vector<std::size_t> vpsa_per_stage{2, 4, 2, 2};
  std::vector<std::size_t> strides{4, 4, 4, 4};
  std::size_t k_sa = 32;
  std::size_t k_vpsa = 8;
  std::optional<double> radius;  // first-stage ball radius; KNN everywhere when unset
  double radius_scaling = 2.0;
  Grouper vpsa_grouper = Grouper::knn;
  Task task = Task::segmentation;
  std::size_t num_classes = 13;
  std::optional<ops::Reduction> reduction;  // default: sum (segmentation), max (classification)
  EncoderKind encoder = EncoderKind::rotation;
  std::size_t vector_dim = 3;
  /// Default: sum_groupconv or max_groupconv following the reduction.
  std::optional<Aggregation> aggregation;
  bool projection_bias = true;
  std::size_t sa_layers = 1;
  std::size_t fp_layers = 2;
  /// Features are x,y,z relative to the cloud centroid plus height above the
  /// lowest point. Otherwise the batch's own feature channels are used.
  bool derive_features = true;
  std::size_t in_channels = 4;

  ops::Reduction effective_reduction() const {
    if (reduction) return *reduction;
    return task == Task::segmentation ? ops::Reduction::sum : ops::Reduction::max;
  }

  Aggregation effective_aggregation() const {
    if (aggregation) return *aggregation;
    return effective_reduction() == ops::Reduction::sum ? Aggregation::sum_groupconv : Aggregation::max_groupconv;
  }

  void validate() const {
    if (embed_channels < 1) throw ConfigError("embed_channels must be at least 1");
    if (sa_per_stage.size() != vpsa_per_stage.size() || sa_per_stage.size() != strides.size())
      throw ConfigError("sa_per_stage, vpsa_per_stage and strides must have equal lengths");
    for (std::size_t s = 0; s < strides.size(); ++s) {
      if (strides[s] < 1) throw ConfigError("strides must be at least 1");
      if (strides[s] > 1 && sa_per_stage[s] + vpsa_per_stage[s] == 0)
        throw ConfigError("stage " + std::to_string(s) + " downsamples but has no blocks");
    }
    if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
    if (vector_dim < 1 || vector_dim > 3) throw ConfigError("vector_dim must be 1, 2 or 3");
    if (k_sa < 1 || k_vpsa < 1) throw ConfigError("neighbor counts must be at least 1");
    if (radius && !(*radius > 0.0)) throw ConfigError("radius must be positive");
    if (derive_features && in_channels != 4) throw ConfigError("derived features have exactly 4 channels");
  }
};

namespace presets {

inline ModelConfig pointvector_s(Task task, std::size_t classes) {
  ModelConfig c;
  c.embed_channels = 32;
  c.sa_per_stage = {0, 0, 0, 0};
  c.vpsa_per_stage = {1, 1, 1, 1};
  c.strides = {2, 2, 2, 2};
  c.task = task;
  c.num_classes = classes;
  return c;
}

inline ModelConfig pointvector_l(Task task = Task::segmentation, std::size_t classes = 13) {
  ModelConfig c;
  c.embed_channels = 32;
  c.sa_per_stage = {1, 1, 1, 1};
  c.vpsa_per_stage = {2, 4, 2, 2};
  c.strides = {4, 4, 4, 4};
  c.task = task;
  c.num_classes = classes;
  return c;
}

inline ModelConfig pointvector_xl(Task task = Task::segmentation, std::size_t classes = 13) {
  ModelConfig c = pointvector_l(task, classes);
  c.embed_channels = 64;
  c.vpsa_per_stage = {3, 6, 3, 3};
  return c;
}

/// Desk-scale segmentation network used for training experiments.
inline ModelConfig toy_segmentation(std::size_t classes = 3) {
  ModelConfig c;
  c.embed_channels = 16;
  c.sa_per_stage = {1, 1};
  c.vpsa_per_stage = {1, 1};
  c.strides = {2, 2};
  c.k_sa = 16;
  c.k_vpsa = 8;
  c.task = Task::segmentation;
  c.num_classes = classes;
  return c;
}

inline ModelConfig toy_classification(std::size_t classes = 3) {
  ModelConfig c = toy_segmentation(classes);
  c.sa_per_stage = {0, 0};
  c.task = Task::classification;
  return c;
}

inline ModelConfig by_name(const std::string& name, Task task, std::size_t classes) {
  if (name == "pointvector-s") return pointvector_s(task, classes);
  if (name == "pointvector-l") return pointvector_l(task, classes);
  if (name == "pointvector-xl") return pointvector_xl(task, classes);
  if (name == "toy") return task == Task::segmentation ? toy_segmentation(classes) : toy_classification(classes);
  throw ConfigError("unknown preset '" + name + "' (expected pointvector-s|pointvector-l|pointvector-xl|toy)");
}

}  // namespace presets

struct Stage {
  std::vector<SaBlock> sa;
  std::vector<VpsaBlock> vpsa;
  std::size_t channels = 0;
};

template <class T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> params;
  DenseUnit stem;
  std::vector<Stage> stages;
  std::vector<FpBlock> decoder;  // decoder[s] lifts stage s+1 output onto level s
  std::optional<SaBlock> global;
  DenseUnit head_hidden;
  LinearLayer head_out;
};

template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model<T> model;
  model.cfg = cfg;
  auto& store = model.params;
  model.stem = make_dense(store, "stem", cfg.in_channels, cfg.embed_channels, rng);

  std::vector<std::size_t> level_channels{cfg.embed_channels};
  std::size_t width = cfg.embed_channels;
  for (std::size_t s = 0; s < cfg.strides.size(); ++s) {
    const std::string prefix = "encoder.stage" + std::to_string(s);
    const std::size_t out = cfg.strides[s] > 1 ? width * 2 : width;
    std::optional<double> radius;
    if (cfg.radius) radius = *cfg.radius * std::pow(cfg.radius_scaling, static_cast<double>(s));
    Stage stage;
    stage.channels = out;
    for (std::size_t j = 0; j < cfg.sa_per_stage[s]; ++j) {
      BlockConfig b;
      b.in_channels = j == 0 ? width : out;
      b.out_channels = out;
      b.k_neighbors = cfg.k_sa;
      b.radius = radius;
      b.stride = j == 0 ? cfg.strides[s] : 1;
      b.mlp_layers = cfg.sa_layers;
      stage.sa.push_back(make_sa_block(store, prefix + ".sa" + std::to_string(j), b, rng));
    }
    for (std::size_t j = 0; j < cfg.vpsa_per_stage[s]; ++j) {
      const bool strided = cfg.sa_per_stage[s] == 0 && j == 0;
      BlockConfig b;
      b.in_channels = strided ? width : out;
      b.out_channels = out;
      b.k_neighbors = cfg.k_vpsa;
      if (cfg.vpsa_grouper == Grouper::ball) b.radius = radius;
      b.stride = strided ? cfg.strides[s] : 1;
      b.reduction = cfg.effective_reduction();
      b.vector_dim = cfg.vector_dim;
      b.encoder = cfg.encoder;
      b.aggregation = cfg.effective_aggregation();
      b.projection_bias = cfg.projection_bias;
      stage.vpsa.push_back(make_vpsa_block(store, prefix + ".vpsa" + std::to_string(j), b, rng));
    }
    model.stages.push_back(std::move(stage));
    width = out;
    level_channels.push_back(out);
  }

  if (cfg.task == Task::segmentation) {
    for (std::size_t s = 0; s < cfg.strides.size(); ++s)
      model.decoder.push_back(make_fp_block(store, "decoder.fp" + std::to_string(s), level_channels[s + 1],
                                            level_channels[s], level_channels[s], cfg.fp_layers, rng));
    model.head_hidden = make_dense(store, "head.hidden", cfg.embed_channels, cfg.embed_channels, rng);
    model.head_out = make_linear(store, "head.out", cfg.embed_channels, cfg.num_classes, true, rng);
  } else {
    BlockConfig g;
    g.in_channels = width;
    g.out_channels = width;
    g.k_neighbors = 1;
    g.mlp_layers = cfg.sa_layers;
    model.global = make_sa_block(store, "encoder.global", g, rng);
    model.head_hidden = make_dense(store, "head.hidden", width, width, rng);
    model.head_out = make_linear(store, "head.out", width, cfg.num_classes, true, rng);
  }
  return model;
}

template <class T>
std::size_t param_count(const Model<T>& model) {
  return model.params.param_count();
}

/// Per point: x, y, z minus the cloud centroid and z minus the lowest z, all
/// divided by `scale`.
inline std::vector<double> derived_features(const PointSetBatch& batch, double scale = 1.0) {
  const std::size_t b = batch.batch, n = batch.points;
  std::vector<double> out(b * n * 4);
  for (std::size_t bi = 0; bi < b; ++bi) {
    double c[3] = {0, 0, 0};
    double zmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = batch.position(bi, i);
      for (int d = 0; d < 3; ++d) c[d] += p[d];
      zmin = std::min(zmin, p[2]);
    }
    for (double& v : c) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = batch.position(bi, i);
      double* o = &out[(bi * n + i) * 4];
      for (int d = 0; d < 3; ++d) o[d] = (p[d] - c[d]) / scale;
      o[3] = (p[2] - zmin) / scale;
    }
  }
  return out;
}

namespace detail {

template <class T>
void check_finite(Context<T>& ctx, Var v, const std::string& where) {
  if (!ctx.tape.value(v).all_finite()) throw NumericFault("non-finite activations after " + where);
}

template <class T>
std::vector<Level> encode(Context<T>& ctx, const Model<T>& model, const PointSetBatch& batch) {
  const auto& cfg = model.cfg;
  if (batch.batch == 0 || batch.points == 0) throw SizeError("forward: empty batch");
  if (batch.positions.size() != batch.batch * batch.points * 3) throw SizeError("forward: positions length mismatch");
  Level in;
  in.batch = batch.batch;
  in.points = batch.points;
  in.positions = batch.positions;
  in.channels = cfg.in_channels;
  if (cfg.derive_features) {
    in.features = ops::constant(ctx.tape, Shape{batch.batch, batch.points, 4},
                                std::span<const double>(derived_features(batch, ctx.position_scale)));
  } else {
    if (batch.channels != cfg.in_channels)
      throw SizeError("forward: batch has " + std::to_string(batch.channels) + " feature channels, model expects " +
                      std::to_string(cfg.in_channels));
    in.features = ops::constant(ctx.tape, Shape{batch.batch, batch.points, batch.channels},
                                std::span<const double>(batch.features));
  }
  Level x = in;
  x.channels = cfg.embed_channels;
  x.features = ops::dense_unit(ctx, in.features, model.stem);
  check_finite(ctx, x.features, "stem");

  std::vector<Level> levels{x};
  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    const auto& stage = model.stages[s];
    for (std::size_t j = 0; j < stage.sa.size(); ++j) {
      SaBlock block = stage.sa[j];
      block.cfg.k_neighbors = std::min(block.cfg.k_neighbors, x.points);
      x = sa_block(ctx, x, block);
      check_finite(ctx, x.features, "encoder.stage" + std::to_string(s) + ".sa" + std::to_string(j));
    }
    for (std::size_t j = 0; j < stage.vpsa.size(); ++j) {
      const VpsaBlock* block = &stage.vpsa[j];
      VpsaBlock clamped;
      if (!uses_slot_kernel(block->cfg.aggregation) && block->cfg.k_neighbors > x.points) {
        clamped = *block;
        clamped.cfg.k_neighbors = x.points;
        block = &clamped;
      }
      x = vpsa_block(ctx, x, *block);
      check_finite(ctx, x.features, "encoder.stage" + std::to_string(s) + ".vpsa" + std::to_string(j));
    }
    levels.push_back(x);
  }
  return levels;
}

}  // namespace detail

/// Per-point logits [B][N][num_classes].
template <class T>
Var forward_seg(Context<T>& ctx, const Model<T>& model, const PointSetBatch& batch) {
  if (model.cfg.task != Task::segmentation) throw ConfigError("forward_seg: model was built for classification");
  auto levels = detail::encode(ctx, model, batch);
  Level x = levels.back();
  for (std::size_t s = model.decoder.size(); s-- > 0;) {
    x = feature_propagate(ctx, x, levels[s], model.decoder[s]);
    detail::check_finite(ctx, x.features, "decoder.fp" + std::to_string(s));
  }
  Var h = ops::dense_unit(ctx, x.features, model.head_hidden);
  Var logits = ops::linear(ctx, h, model.head_out);
  detail::check_finite(ctx, logits, "head");
  return logits;
}

/// Per-cloud logits [B][num_classes].
template <class T>
Var forward_cls(Context<T>& ctx, const Model<T>& model, const PointSetBatch& batch) {
  if (model.cfg.task != Task::classification) throw ConfigError("forward_cls: model was built for segmentation");
  auto levels = detail::encode(ctx, model, batch);
  Level g = global_sa(ctx, levels.back(), *model.global);
  detail::check_finite(ctx, g.features, "encoder.global");
  Var h = ops::dense_unit(ctx, g.features, model.head_hidden);
  Var logits = ops::reshape(ctx.tape, ops::linear(ctx, h, model.head_out), Shape{batch.batch, model.cfg.num_classes});
  detail::check_finite(ctx, logits, "head");
  return logits;
}

template <class T>
Var forward(Context<T>& ctx, const Model<T>& model, const PointSetBatch& batch) {
  return model.cfg.task == Task::segmentation ? forward_seg(ctx, model, batch) : forward_cls(ctx, model, batch);
}

}  // namespace pointvector
