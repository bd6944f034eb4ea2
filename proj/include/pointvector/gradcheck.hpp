#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pointvector/model.hpp"
#include "pointvector/oracle.hpp"

namespace pointvector::gradcheck {

/// One randomly drawn instance: differentiable inputs, parameters, and a
/// forward that maps them to any tensor.
struct Problem {
  ParamStore<double> params;
  std::vector<Tensor<double>> inputs;
  std::function<Var(Context<double>&, const std::vector<Var>&)> forward;
  Mode mode = Mode::train;
  std::size_t max_coords = 0;  // 0: check every coordinate, else a random subset
};

struct Case {
  std::string name;
  std::function<Problem(std::mt19937_64&)> make;
};

struct CaseResult {
  std::string name;
  double worst = 0;  // largest norm-wise relative error over instances
  std::size_t instances = 0;
  std::size_t rejected = 0;  // draws discarded because a kink lay within h
  bool passed = false;
  std::string note;
};

struct Options {
  std::size_t instances = 20;
  double h = 1e-6;
  double threshold = 1e-5;
  std::uint64_t seed = 0;
  std::optional<std::string> inject_fault;  // case whose analytic gradient gets corrupted
  std::size_t max_rejections = 200;
};

namespace detail {

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

inline std::vector<double> random_positions(std::size_t count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> p(count * 3);
  for (auto& v : p) v = u(rng);
  return p;
}

/// Randomizes every parameter (and running stats within sane ranges).
inline void scramble(ParamStore<double>& store, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1), pos(0.5, 1.5);
  for (ParamId id = 0; id < store.size(); ++id) {
    auto& e = store.entry(id);
    const bool var = e.name.ends_with("running_var");
    for (auto& v : e.value.data) v = var ? pos(rng) : u(rng);
  }
}

struct Evaluator {
  const Problem& prob;
  Tensor<double> projection;
  std::vector<std::size_t> trainable;  // param ids, in order

  explicit Evaluator(const Problem& p) : prob(p) {
    for (ParamId id = 0; id < p.params.size(); ++id)
      if (p.params.entry(id).trainable) trainable.push_back(id);
  }

  std::size_t dims() const {
    std::size_t n = 0;
    for (const auto& t : prob.inputs) n += t.numel();
    for (auto id : trainable) n += prob.params.value(id).numel();
    return n;
  }

  void unpack(const std::vector<double>& flat, std::vector<Tensor<double>>& inputs, ParamStore<double>& store) const {
    std::size_t o = 0;
    for (auto& t : inputs)
      for (auto& v : t.data) v = flat[o++];
    for (auto id : trainable)
      for (auto& v : store.value(id).data) v = flat[o++];
  }

  std::vector<double> pack() const {
    std::vector<double> flat;
    for (const auto& t : prob.inputs) flat.insert(flat.end(), t.data.begin(), t.data.end());
    for (auto id : trainable) {
      const auto& d = prob.params.value(id).data;
      flat.insert(flat.end(), d.begin(), d.end());
    }
    return flat;
  }

  Var objective(Tape<double>& tape, Context<double>& ctx, const std::vector<Var>& leaves, std::mt19937_64* rng) {
    Var out = prob.forward(ctx, leaves);
    if (projection.shape.empty()) {
      std::mt19937_64 local(12345);
      projection = random_tensor(tape.shape(out), rng ? *rng : local);
    }
    return ops::weighted_sum(tape, out, projection);
  }

  double value(const std::vector<double>& flat) {
    auto inputs = prob.inputs;
    ParamStore<double> store = prob.params;
    unpack(flat, inputs, store);
    Tape<double> tape;
    Context<double> ctx{tape, store, prob.mode};
    std::vector<Var> leaves;
    for (auto& t : inputs) leaves.push_back(tape.leaf(t, false));
    return tape.value(objective(tape, ctx, leaves, nullptr))[0];
  }

  std::vector<double> analytic(std::mt19937_64& rng) {
    ParamStore<double> store = prob.params;
    Tape<double> tape;
    Context<double> ctx{tape, store, prob.mode};
    std::vector<Var> leaves;
    for (const auto& t : prob.inputs) leaves.push_back(tape.leaf(t, true));
    Var loss = objective(tape, ctx, leaves, &rng);
    Gradients<double> g = tape.backward(loss);
    std::vector<double> flat;
    for (Var v : leaves) {
      const auto& d = g.leaf(v).data;
      flat.insert(flat.end(), d.begin(), d.end());
    }
    for (auto id : trainable) {
      const auto t = g.param_or_zero(prob.params, id);
      flat.insert(flat.end(), t.data.begin(), t.data.end());
    }
    return flat;
  }
};

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

inline std::uint64_t derive_case_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull ^ seed;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

/// Norm-wise relative error of one instance, or nullopt when the central
/// estimates at h and h/2 disagree (the function is not smooth within h).
inline std::optional<double> check_instance(const Problem& prob, const Options& opt, bool corrupt,
                                            std::mt19937_64& rng) {
  detail::Evaluator ev(prob);
  std::vector<double> a = ev.analytic(rng);
  if (corrupt)
    for (auto& v : a) v *= 1.01;
  const std::vector<double> x0 = ev.pack();
  std::vector<std::size_t> coords(x0.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (prob.max_coords && coords.size() > prob.max_coords) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(prob.max_coords);
  }
  std::vector<double> an, fd;
  double scale = 0;
  for (std::size_t i : coords) scale += a[i] * a[i];
  scale = std::max(std::sqrt(scale), 1e-12);
  std::vector<double> x = x0;
  for (std::size_t i : coords) {
    auto central = [&](double h) {
      x[i] = x0[i] + h;
      const double fp = ev.value(x);
      x[i] = x0[i] - h;
      const double fm = ev.value(x);
      x[i] = x0[i];
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw OracleError("gradcheck: non-finite objective");
      return (fp - fm) / (2 * h);
    };
    const double d1 = central(opt.h), d2 = central(opt.h / 2);
    if (std::abs(d1 - d2) > 1e-7 * scale + 1e-9) return std::nullopt;
    an.push_back(a[i]);
    fd.push_back(d1);
  }
  std::vector<double> diff(an.size());
  for (std::size_t i = 0; i < an.size(); ++i) diff[i] = an[i] - fd[i];
  return detail::norm(diff) / std::max({detail::norm(an), detail::norm(fd), 1e-12});
}

inline CaseResult run_case(const Case& c, const Options& opt) {
  CaseResult r;
  r.name = c.name;
  std::mt19937_64 rng(derive_case_seed(opt.seed, c.name));
  const bool corrupt = opt.inject_fault && *opt.inject_fault == c.name;
  while (r.instances < opt.instances) {
    const Problem p = c.make(rng);
    auto err = check_instance(p, opt, corrupt, rng);
    if (!err) {
      if (++r.rejected > opt.max_rejections) {
        r.note = "too many non-smooth draws";
        r.passed = false;
        return r;
      }
      continue;
    }
    r.worst = std::max(r.worst, *err);
    ++r.instances;
  }
  r.passed = r.worst < opt.threshold;
  return r;
}

// ------------------------------------------------------------------ registry

namespace cases {

using detail::random_positions;
using detail::random_tensor;
using Fwd = std::function<Var(Context<double>&, const std::vector<Var>&)>;

inline Problem simple(std::vector<Tensor<double>> inputs, Fwd f) {
  Problem p;
  p.inputs = std::move(inputs);
  p.forward = std::move(f);
  return p;
}

inline NeighborIndex random_knn(std::size_t batch, std::size_t n, std::size_t k, std::mt19937_64& rng) {
  const auto pos = random_positions(batch * n, rng);
  return geometry::knn(geometry::all_centers(batch, n), n, pos, batch, n, k);
}

inline std::vector<std::uint8_t> random_pad(std::size_t groups, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::uint8_t> pad(groups * k, 0);
  std::bernoulli_distribution coin(0.3);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t j = 1; j < k; ++j) pad[g * k + j] = coin(rng) ? 1 : 0;  // slot 0 always real
  return pad;
}

inline Level random_level(Context<double>& ctx, Var features, const std::vector<double>& pos, std::size_t batch,
                          std::size_t n, std::size_t c) {
  (void)ctx;
  Level l;
  l.batch = batch;
  l.points = n;
  l.channels = c;
  l.positions = pos;
  l.features = features;
  return l;
}

inline Problem vpsa_problem(std::mt19937_64& rng, Aggregation agg, std::size_t stride, bool ball, EncoderKind enc,
                            std::size_t dim, Mode mode = Mode::train) {
  const std::size_t b = 2, n = 12, c = 3, k = 4;
  BlockConfig cfg;
  cfg.in_channels = c;
  cfg.out_channels = 4;
  cfg.k_neighbors = k;
  cfg.stride = stride;
  cfg.aggregation = agg;
  cfg.reduction = agg == Aggregation::max_groupconv || agg == Aggregation::max_fc ? ops::Reduction::max
                                                                                   : ops::Reduction::sum;
  cfg.encoder = enc;
  cfg.vector_dim = dim;
  if (ball) cfg.radius = 0.45;
  Problem p;
  auto block = make_vpsa_block(p.params, "vpsa", cfg, rng);
  detail::scramble(p.params, rng);
  p.inputs = {random_tensor({b, n, c}, rng)};
  const auto pos = random_positions(b * n, rng);
  p.mode = mode;
  p.forward = [block, pos, b, n, c](Context<double>& ctx, const std::vector<Var>& in) {
    return vpsa_block(ctx, random_level(ctx, in[0], pos, b, n, c), block).features;
  };
  return p;
}

inline std::vector<Case> all() {
  std::vector<Case> out;
  auto add = [&](std::string name, std::function<Problem(std::mt19937_64&)> f) {
    out.push_back(Case{std::move(name), std::move(f)});
  };

  add("linear", [](std::mt19937_64& rng) {
    Problem p;
    auto l = make_linear(p.params, "l", 4, 3, true, rng);
    p.inputs = {random_tensor({2, 5, 4}, rng)};
    p.forward = [l](Context<double>& ctx, const std::vector<Var>& in) { return ops::linear(ctx, in[0], l); };
    return p;
  });
  add("batchnorm.train", [](std::mt19937_64& rng) {
    Problem p;
    auto n = make_norm(p.params, "n", 3);
    detail::scramble(p.params, rng);
    p.inputs = {random_tensor({4, 5, 3}, rng, -3, 3)};
    p.forward = [n](Context<double>& ctx, const std::vector<Var>& in) { return ops::batchnorm(ctx, in[0], n); };
    return p;
  });
  add("batchnorm.eval", [](std::mt19937_64& rng) {
    Problem p;
    auto n = make_norm(p.params, "n", 3);
    detail::scramble(p.params, rng);
    p.inputs = {random_tensor({4, 3}, rng)};
    p.mode = Mode::eval;
    p.forward = [n](Context<double>& ctx, const std::vector<Var>& in) { return ops::batchnorm(ctx, in[0], n); };
    return p;
  });
  add("relu", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 7}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::relu(ctx.tape, in[0]); });
  });
  add("leaky_relu", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 7}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::leaky_relu(ctx.tape, in[0], 0.1); });
  });
  add("add", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::add(ctx.tape, in[0], in[1]); });
  });
  add("residual_fuse", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}, [](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::residual_fuse(ctx.tape, in[0], in[1]);
    });
  });
  add("mul", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::mul(ctx.tape, in[0], in[1]); });
  });
  add("sum", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 4}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::sum(ctx.tape, in[0]); });
  });
  add("weighted_sum", [](std::mt19937_64& rng) {
    auto coeff = random_tensor({3, 4}, rng);
    return simple({random_tensor({3, 4}, rng)}, [coeff](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::weighted_sum(ctx.tape, in[0], coeff);
    });
  });
  add("reshape", [](std::mt19937_64& rng) {
    return simple({random_tensor({3, 4}, rng)}, [](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::reshape(ctx.tape, in[0], Shape{2, 6});
    });
  });
  add("concat", [](std::mt19937_64& rng) {
    return simple({random_tensor({2, 3, 2}, rng), random_tensor({2, 3, 4}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::concat(ctx.tape, in[0], in[1]); });
  });
  add("gather_rows", [](std::mt19937_64& rng) {
    std::uniform_int_distribution<std::int32_t> pick(0, 5);
    std::vector<std::int32_t> idx(2 * 4);
    for (auto& i : idx) i = pick(rng);
    return simple({random_tensor({2, 6, 3}, rng)}, [idx](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::gather_rows(ctx.tape, in[0], idx, 4);
    });
  });
  add("gather_neighbors", [](std::mt19937_64& rng) {
    auto nb = random_knn(2, 8, 3, rng);
    return simple({random_tensor({2, 8, 3}, rng)}, [nb](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::gather_neighbors(ctx.tape, in[0], nb);
    });
  });
  add("group_relative", [](std::mt19937_64& rng) {
    auto nb = random_knn(2, 8, 3, rng);
    return simple({random_tensor({2, 8, 3}, rng)}, [nb](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::group_relative(ctx.tape, in[0], nb);
    });
  });
  for (auto mode : {ops::Reduction::sum, ops::Reduction::max}) {
    add(std::string("neighbor_reduce.") + (mode == ops::Reduction::sum ? "sum" : "max"), [mode](std::mt19937_64& rng) {
      auto pad = random_pad(2 * 3, 4, rng);
      return simple({random_tensor({2, 3, 4, 3, 2}, rng)}, [pad, mode](Context<double>& ctx, const std::vector<Var>& in) {
        return ops::neighbor_reduce(ctx.tape, in[0], mode, pad);
      });
    });
  }
  add("grouped_projection", [](std::mt19937_64& rng) {
    Problem p;
    auto l = make_grouped_projection(p.params, "g", 3, 3, true, rng);
    p.inputs = {random_tensor({2, 4, 3, 3}, rng)};
    p.forward = [l](Context<double>& ctx, const std::vector<Var>& in) { return ops::grouped_projection(ctx, in[0], l); };
    return p;
  });
  add("slot_groupconv", [](std::mt19937_64& rng) {
    Problem p;
    auto l = make_slot_kernel(p.params, "s", 3, 4, 3, true, rng);
    auto pad = random_pad(2 * 2, 4, rng);
    p.inputs = {random_tensor({2, 2, 4, 3, 3}, rng)};
    p.forward = [l, pad](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::slot_groupconv(ctx, in[0], l, pad);
    };
    return p;
  });
  for (std::size_t m : {1, 2, 3}) {
    add("rotate_expand.m" + std::to_string(m), [m](std::mt19937_64& rng) {
      std::vector<Tensor<double>> in{random_tensor({5, 3}, rng)};
      if (m > 1) in.push_back(random_tensor({5, (m - 1) * 3}, rng, -3, 3));
      return simple(std::move(in), [m](Context<double>& ctx, const std::vector<Var>& v) {
        return ops::rotate_expand(ctx.tape, v[0], m > 1 ? std::optional<Var>(v[1]) : std::nullopt, m);
      });
    });
  }
  add("normalize_vectors", [](std::mt19937_64& rng) {
    return simple({random_tensor({4, 3, 3}, rng)},
                  [](Context<double>& ctx, const std::vector<Var>& in) { return ops::normalize_vectors(ctx.tape, in[0]); });
  });
  add("scale_vectors", [](std::mt19937_64& rng) {
    return simple({random_tensor({4, 3}, rng), random_tensor({4, 3, 2}, rng)}, [](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::scale_vectors(ctx.tape, in[0], in[1]);
    });
  });
  add("interpolate", [](std::mt19937_64& rng) {
    const auto fine = random_positions(2 * 7, rng), coarse = random_positions(2 * 4, rng);
    auto w = geometry::three_nn_weights(fine, 7, coarse, 4, 2);
    return simple({random_tensor({2, 4, 3}, rng)}, [w](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::interpolate(ctx.tape, in[0], w);
    });
  });
  add("ce_label_smoothing", [](std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, 3);
    std::vector<int> labels(6);
    for (auto& l : labels) l = pick(rng);
    return simple({random_tensor({6, 4}, rng, -2, 2)}, [labels](Context<double>& ctx, const std::vector<Var>& in) {
      return ops::ce_label_smoothing(ctx.tape, in[0], std::span<const int>(labels), 0.1);
    });
  });
  add("dense_unit", [](std::mt19937_64& rng) {
    Problem p;
    auto u = make_dense(p.params, "d", 3, 4, rng);
    detail::scramble(p.params, rng);
    p.inputs = {random_tensor({6, 3}, rng)};
    p.forward = [u](Context<double>& ctx, const std::vector<Var>& in) { return ops::dense_unit(ctx, in[0], u); };
    return p;
  });
  for (auto [kind, dim] : std::vector<std::pair<EncoderKind, std::size_t>>{
           {EncoderKind::rotation, 3}, {EncoderKind::rotation, 2}, {EncoderKind::rotation, 1},
           {EncoderKind::mlp, 3}, {EncoderKind::direction, 3}}) {
    add(std::string("encoder.") + to_string(kind) + ".m" + std::to_string(dim), [kind, dim](std::mt19937_64& rng) {
      Problem p;
      auto e = make_encoder(p.params, "enc", kind, 3, dim, rng);
      detail::scramble(p.params, rng);
      p.inputs = {random_tensor({2, 3, 4, 3}, rng)};
      p.forward = [e](Context<double>& ctx, const std::vector<Var>& in) { return vecenc::encode(ctx, in[0], e); };
      return p;
    });
  }
  add("sa_block", [](std::mt19937_64& rng) {
    const std::size_t b = 2, n = 10, c = 3;
    BlockConfig cfg;
    cfg.in_channels = c;
    cfg.out_channels = 4;
    cfg.k_neighbors = 4;
    cfg.stride = 2;
    Problem p;
    auto block = make_sa_block(p.params, "sa", cfg, rng);
    detail::scramble(p.params, rng);
    p.inputs = {random_tensor({b, n, c}, rng)};
    const auto pos = random_positions(b * n, rng);
    p.forward = [block, pos, b, n, c](Context<double>& ctx, const std::vector<Var>& in) {
      return sa_block(ctx, random_level(ctx, in[0], pos, b, n, c), block).features;
    };
    return p;
  });
  add("global_sa", [](std::mt19937_64& rng) {
    const std::size_t b = 2, n = 6, c = 3;
    BlockConfig cfg;
    cfg.in_channels = c;
    cfg.out_channels = 4;
    cfg.k_neighbors = 1;
    Problem p;
    auto block = make_sa_block(p.params, "g", cfg, rng);
    detail::scramble(p.params, rng);
    p.inputs = {random_tensor({b, n, c}, rng)};
    const auto pos = random_positions(b * n, rng);
    p.forward = [block, pos, b, n, c](Context<double>& ctx, const std::vector<Var>& in) {
      return global_sa(ctx, random_level(ctx, in[0], pos, b, n, c), block).features;
    };
    return p;
  });
  for (auto agg : {Aggregation::sum_groupconv, Aggregation::max_groupconv, Aggregation::groupconv,
                   Aggregation::sum_fc, Aggregation::max_fc, Aggregation::conv}) {
    add(std::string("vpsa_block.") + to_string(agg), [agg](std::mt19937_64& rng) {
      return vpsa_problem(rng, agg, 1, false, EncoderKind::rotation, 3);
    });
  }
  add("vpsa_block.strided", [](std::mt19937_64& rng) {
    return vpsa_problem(rng, Aggregation::sum_groupconv, 2, false, EncoderKind::rotation, 3);
  });
  add("vpsa_block.ball", [](std::mt19937_64& rng) {
    return vpsa_problem(rng, Aggregation::groupconv, 1, true, EncoderKind::rotation, 3);
  });
  add("vpsa_block.eval", [](std::mt19937_64& rng) {
    return vpsa_problem(rng, Aggregation::sum_groupconv, 1, false, EncoderKind::rotation, 3, Mode::eval);
  });
  add("feature_propagate", [](std::mt19937_64& rng) {
    const std::size_t b = 2, nf = 8, nc = 4, cf = 2, cc = 3;
    Problem p;
    auto block = make_fp_block(p.params, "fp", cc, cf, 4, 2, rng);
    detail::scramble(p.params, rng);
    p.inputs = {random_tensor({b, nc, cc}, rng), random_tensor({b, nf, cf}, rng)};
    const auto pf = random_positions(b * nf, rng), pc = random_positions(b * nc, rng);
    p.forward = [block, pf, pc, b, nf, nc, cf, cc](Context<double>& ctx, const std::vector<Var>& in) {
      return feature_propagate(ctx, random_level(ctx, in[0], pc, b, nc, cc), random_level(ctx, in[1], pf, b, nf, cf),
                               block)
          .features;
    };
    return p;
  });
  for (auto task : {Task::segmentation, Task::classification}) {
    add(std::string("model.toy_") + to_string(task), [task](std::mt19937_64& rng) {
      ModelConfig cfg = task == Task::segmentation ? presets::toy_segmentation(3) : presets::toy_classification(3);
      cfg.embed_channels = 4;
      cfg.k_sa = 4;
      cfg.k_vpsa = 4;
      Problem p;
      auto model = std::make_shared<Model<double>>(build_model<double>(cfg, rng()));
      detail::scramble(model->params, rng);
      p.params = model->params;
      PointSetBatch batch;
      batch.batch = 2;
      batch.points = 16;
      batch.channels = 1;
      batch.positions = random_positions(32, rng);
      batch.features.assign(32, 0.0);
      p.max_coords = 24;
      // Layers only hold parameter ids; the harness supplies perturbed values via ctx.
      p.forward = [model, batch](Context<double>& ctx, const std::vector<Var>&) { return forward(ctx, *model, batch); };
      return p;
    });
  }
  return out;
}

}  // namespace cases

inline std::vector<std::string> registered() {
  std::vector<std::string> names;
  for (const auto& c : cases::all()) names.push_back(c.name);
  return names;
}

/// Runs every registered case (or those whose name starts with `filter`).
inline std::vector<CaseResult> run_all(const Options& opt, const std::string& filter = {},
                                       const std::function<void(const CaseResult&)>& on_result = {}) {
  std::vector<CaseResult> out;
  for (const auto& c : cases::all()) {
    if (!filter.empty() && !c.name.starts_with(filter)) continue;
    out.push_back(run_case(c, opt));
    if (on_result) on_result(out.back());
  }
  return out;
}

}  // namespace pointvector::gradcheck
