#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "pointvector/config.hpp"
#include "pointvector/gradcheck.hpp"

namespace pointvector::cli {

namespace fs = std::filesystem;

enum Exit : int {
  ok = 0,
  failure = 1,
  config_error = 2,
  numeric_fault = 3,
  gradcheck_failed = 4,
  checkpoint_mismatch = 5,
};

enum class Precision { single, dual };

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool overwrite = false;
  Precision precision = Precision::single;
  std::string runs_root = "run";
};

/// Maps library exceptions to exit codes and prints the message.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return checkpoint_mismatch;
  } catch (const NumericFault& e) {
    err << "numeric fault: " << e.what() << '\n';
    return numeric_fault;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return config_error;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return config_error;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return config_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return failure;
  }
}

/// Creates (or, with overwrite, recreates) run/<name>.
inline fs::path prepare_run_dir(const Globals& g, const std::string& name) {
  const fs::path dir = fs::path(g.runs_root) / name;
  if (fs::exists(dir)) {
    if (!g.overwrite) throw ConfigError("run directory " + dir.string() + " exists (pass --overwrite to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline RunConfig load_with_overrides(const std::string& path, const Globals& g) {
  RunConfig cfg = load_run_config(path);
  if (g.seed) cfg.train.seed = *g.seed;
  return cfg;
}

// -------------------------------------------------------------------- train

template <class T>
int train_impl(const RunConfig& cfg, const Globals& g, std::ostream& out) {
  const fs::path dir = prepare_run_dir(g, cfg.name);
  const std::string resolved = to_json(cfg).dump(2) + "\n";
  write_text(dir / "config.json", resolved);
  std::ofstream log(dir / "log.txt", std::ios::trunc);
  const Dataset data = make_dataset(cfg.data);
  TrainHooks hooks;
  hooks.csv_path = (dir / "metrics.csv").string();
  hooks.checkpoint_path = (dir / "best.ckpt").string();
  hooks.checkpoint_meta = resolved;
  hooks.log = [&](const std::string& line) {
    log << line << '\n';
    log.flush();
    out << line << '\n';
  };
  try {
    auto report = train_loop<T>(cfg.model, cfg.train, data, hooks);
    char buf[200];
    std::snprintf(buf, sizeof buf, "best epoch %zu: oa %.4f macc %.4f miou %.4f, %zu parameters", report.best_epoch,
                  report.best.oa, report.best.macc, report.best.miou, report.best_params.param_count());
    hooks.log(buf);
  } catch (const NumericFault& e) {
    log << "numeric fault: " << e.what() << '\n';
    throw;
  }
  return ok;
}

inline int cmd_train(const std::string& config_path, const Globals& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_with_overrides(config_path, g);
    return g.precision == Precision::single ? train_impl<float>(cfg, g, out) : train_impl<double>(cfg, g, out);
  });
}

// --------------------------------------------------------------------- eval

struct EvalOptions {
  std::string checkpoint;
  std::string split = "val";
  std::string perturb = "table";  // table | none | comma list of names
  bool rescale_radius = false;
};

inline std::vector<Perturbation> select_perturbations(const EvalOptions& o) {
  auto all = standard_perturbations();
  if (o.rescale_radius)
    for (auto& p : all)
      if (p.kind == PerturbationKind::scale) p.rescale_radius = true;
  if (o.perturb == "table") return all;
  std::vector<Perturbation> out;
  std::stringstream ss(o.perturb);
  std::string name;
  while (std::getline(ss, name, ',')) {
    auto it = std::find_if(all.begin(), all.end(), [&](const Perturbation& p) { return p.name == name; });
    if (it == all.end()) throw ConfigError("unknown perturbation '" + name + "'");
    out.push_back(*it);
  }
  if (out.empty()) throw ConfigError("empty perturbation list");
  return out;
}

template <class T>
int eval_impl(const EvalOptions& o, const Globals& g, std::ostream& out) {
  const Checkpoint ck = read_checkpoint(o.checkpoint);
  RunConfig cfg;
  try {
    cfg = parse_run_config(ck.meta, o.checkpoint + " (embedded config)");
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint carries no usable config: ") + e.what());
  }
  Model<T> model = build_model<T>(cfg.model, cfg.train.seed);
  apply_checkpoint(ck, model.params, o.checkpoint);
  const Dataset data = make_dataset(cfg.data);
  const std::vector<Sample>* split = o.split == "val" ? &data.val : o.split == "test" ? &data.test
                                   : o.split == "train" ? &data.train : nullptr;
  if (!split) throw ConfigError("--split must be train, val or test");
  if (split->empty()) throw DataError("split '" + o.split + "' is empty");
  const auto results = perturbation_eval(model, *split, select_perturbations(o), cfg.train.batch_size,
                                         g.seed.value_or(cfg.train.seed), cfg.train.jitter_sigma, cfg.train.jitter_clip);
  out << "metric";
  for (const auto& r : results) out << ',' << r.perturbation.name;
  out << '\n';
  for (const char* metric : {"oa", "macc", "miou", "delta_miou"}) {
    out << metric;
    for (const auto& r : results) {
      const std::string m = metric;
      const double v = m == "oa" ? r.m.oa : m == "macc" ? r.m.macc : m == "miou" ? r.m.miou : r.delta_miou;
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.10g", v);
      out << buf;
    }
    out << '\n';
  }
  return ok;
}

inline int cmd_eval(const EvalOptions& o, const Globals& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    return g.precision == Precision::single ? eval_impl<float>(o, g, out) : eval_impl<double>(o, g, out);
  });
}

// ------------------------------------------------------------------- ablate

struct AblationCell {
  Aggregation aggregation;
  EncoderKind encoder;
  std::size_t vector_dim;
  std::uint64_t seed;
};

inline std::vector<AblationCell> ablation_cells(const RunConfig& cfg) {
  const auto& a = cfg.ablate;
  std::vector<Aggregation> aggs = a.aggregation;
  if (aggs.empty()) aggs = {cfg.model.effective_aggregation()};
  std::vector<EncoderKind> encs = a.encoder;
  if (encs.empty()) encs = {cfg.model.encoder};
  std::vector<std::size_t> dims = a.vector_dim;
  if (dims.empty()) dims = {cfg.model.vector_dim};
  std::vector<std::uint64_t> seeds = a.seeds;
  if (seeds.empty()) seeds = {cfg.train.seed};
  std::vector<AblationCell> cells;
  for (auto ag : aggs)
    for (auto e : encs)
      for (auto m : dims)
        for (auto s : seeds) cells.push_back({ag, e, m, s});
  return cells;
}

inline ModelConfig cell_model(const RunConfig& cfg, const AblationCell& c) {
  ModelConfig m = cfg.model;
  m.aggregation = c.aggregation;
  m.encoder = c.encoder;
  m.vector_dim = c.vector_dim;
  if (!cfg.model.reduction) {
    const bool max = c.aggregation == Aggregation::max_groupconv || c.aggregation == Aggregation::max_fc;
    const bool sum = c.aggregation == Aggregation::sum_groupconv || c.aggregation == Aggregation::sum_fc;
    if (max) m.reduction = ops::Reduction::max;
    if (sum) m.reduction = ops::Reduction::sum;
  }
  m.validate();
  return m;
}

inline std::string ablation_header() {
  return "aggregation,encoder,vector_dim,seed,param_count,best_epoch,oa,macc,miou";
}

template <class T>
int ablate_impl(const RunConfig& cfg, const Globals& g, std::ostream& out) {
  const fs::path dir = prepare_run_dir(g, cfg.name);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  const auto cells = ablation_cells(cfg);
  for (const auto& c : cells) cell_model(cfg, c);  // validate every cell before training any
  const Dataset data = make_dataset(cfg.data);
  std::vector<std::string> rows(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::ofstream log(dir / "log.txt", std::ios::trunc);
  std::mutex log_mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cells.size();) {
      try {
        const auto& c = cells[i];
        TrainConfig tc = cfg.train;
        tc.seed = c.seed;
        const ModelConfig mc = cell_model(cfg, c);
        auto report = train_loop<T>(mc, tc, data);
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%s,%zu,%llu,%zu,%zu,%.10g,%.10g,%.10g", to_string(c.aggregation),
                      to_string(c.encoder), c.vector_dim, static_cast<unsigned long long>(c.seed),
                      report.best_params.param_count(), report.best_epoch, report.best.oa, report.best.macc,
                      report.best.miou);
        rows[i] = buf;
        std::lock_guard lock(log_mu);
        log << "cell " << i << ": " << rows[i] << '\n';
        log.flush();
        out << rows[i] << '\n';
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  out << ablation_header() << '\n';
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::max<std::size_t>(g.jobs, 1); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::ofstream csv(dir / "ablation.csv", std::ios::binary | std::ios::trunc);
  csv << ablation_header() << '\n';
  for (const auto& r : rows) csv << r << '\n';
  return ok;
}

inline int cmd_ablate(const std::string& config_path, const Globals& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = load_with_overrides(config_path, g);
    return g.precision == Precision::single ? ablate_impl<float>(cfg, g, out) : ablate_impl<double>(cfg, g, out);
  });
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckOptions {
  std::string filter;
  std::optional<std::string> inject_fault;
  std::size_t instances = 20;
};

inline int cmd_gradcheck(const GradcheckOptions& o, const Globals& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    gradcheck::Options opt;
    opt.instances = o.instances;
    opt.seed = g.seed.value_or(0);
    opt.inject_fault = o.inject_fault;
    if (o.inject_fault) {
      const auto names = gradcheck::registered();
      if (std::find(names.begin(), names.end(), *o.inject_fault) == names.end())
        throw ConfigError("--inject-fault: no registered op named '" + *o.inject_fault + "'");
    }
    std::vector<std::string> failed;
    gradcheck::run_all(opt, o.filter, [&](const gradcheck::CaseResult& r) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "%-28s worst_rel_err %.3e  instances %zu  rejected %zu  %s", r.name.c_str(),
                    r.worst, r.instances, r.rejected, r.passed ? "ok" : "FAIL");
      out << buf << (r.note.empty() ? "" : "  (" + r.note + ")") << '\n';
      if (!r.passed) failed.push_back(r.name);
    });
    if (!failed.empty()) {
      err << "gradient check failed for:";
      for (const auto& f : failed) err << ' ' << f;
      err << '\n';
      return static_cast<int>(gradcheck_failed);
    }
    return static_cast<int>(ok);
  });
}

// -------------------------------------------------------------------- bench

struct BenchOptions {
  std::string preset = "toy";
  std::size_t points = 512;
  std::size_t batch = 4;
  std::size_t iters = 3;
};

template <class T>
int bench_impl(const BenchOptions& o, const Globals& g, std::ostream& out) {
  ModelConfig mc = presets::by_name(o.preset, Task::segmentation, kPrimitiveKinds);
  Model<T> model = build_model<T>(mc, g.seed.value_or(0));
  SceneSpec spec;
  spec.num_points = o.points;
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < o.batch; ++i) {
    spec.seed = derive_seed(g.seed.value_or(0), i);
    samples.push_back(Sample{gen_segmentation_scene(spec), 0});
  }
  std::vector<std::size_t> order(o.batch);
  std::iota(order.begin(), order.end(), 0);
  const PointSetBatch batch = collate(samples, order);
  double fwd_ms = 0, bwd_ms = 0;
  for (std::size_t it = 0; it < o.iters; ++it) {
    Tape<T> tape;
    Context<T> ctx{tape, model.params, Mode::train};
    const auto t0 = std::chrono::steady_clock::now();
    Var logits = forward(ctx, model, batch);
    Var loss = ops::ce_label_smoothing(tape, logits, std::span<const int>(*batch.labels), 0.1);
    const auto t1 = std::chrono::steady_clock::now();
    tape.backward(loss);
    const auto t2 = std::chrono::steady_clock::now();
    fwd_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    bwd_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
  }
  const double n = static_cast<double>(std::max<std::size_t>(o.iters, 1));
  char buf[256];
  std::snprintf(buf, sizeof buf, "preset %s  params %zu  batch %zux%zu  forward %.1f ms  backward %.1f ms", o.preset.c_str(),
                param_count(model), o.batch, o.points, fwd_ms / n, bwd_ms / n);
  out << buf << '\n';
  return ok;
}

inline int cmd_bench(const BenchOptions& o, const Globals& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    return g.precision == Precision::single ? bench_impl<float>(o, g, out) : bench_impl<double>(o, g, out);
  });
}

// ----------------------------------------------------------------- gen-data

inline int cmd_gen_data(const std::string& config_path, const std::string& out_dir, const Globals& g, std::ostream& out,
                        std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (g.seed) cfg.data.scene.seed = *g.seed;
    if (cfg.data.manifest) throw ConfigError("gen-data needs a synthetic data section, not a manifest");
    const fs::path dir(out_dir);
    if (fs::exists(dir / "manifest.txt") && !g.overwrite)
      throw ConfigError(dir.string() + " already holds a dataset (pass --overwrite to replace it)");
    fs::create_directories(dir);
    const Dataset data = make_dataset(cfg.data);
    std::vector<ManifestEntry> manifest;
    auto dump = [&](const std::vector<Sample>& samples, Split split) {
      for (std::size_t i = 0; i < samples.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "%s_%04zu.xyz", to_string(split), i);
        PointSetBatch c = samples[i].cloud;
        if (cfg.data.task == Task::classification) c.labels = std::vector<int>(c.points, samples[i].label);
        write_points((dir / name).string(), c);
        manifest.push_back({split, name});
      }
    };
    dump(data.train, Split::train);
    dump(data.val, Split::val);
    dump(data.test, Split::test);
    write_manifest((dir / "manifest.txt").string(), manifest);
    out << "wrote " << manifest.size() << " clouds and " << (dir / "manifest.txt").string() << '\n';
    return static_cast<int>(ok);
  });
}

// --------------------------------------------------------------------- main

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"PointVector: vector-oriented point set abstraction networks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  std::string precision = "single";
  auto* seed_opt = app.add_option("--seed", seed, "Override the random seed");
  app.add_option("--jobs", g.jobs, "Parallel ablation cells")->check(CLI::PositiveNumber);
  app.add_flag("--overwrite", g.overwrite, "Replace an existing run directory");
  app.add_option("--precision", precision, "Scalar type")->check(CLI::IsMember({"single", "double"}));
  app.add_option("--runs", g.runs_root, "Root directory for run outputs");

  std::string config_path;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("config", config_path, "Config file")->required();

  EvalOptions eval_opts;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint under test-time perturbations");
  eval->add_option("checkpoint", eval_opts.checkpoint, "best.ckpt written by train")->required();
  eval->add_option("--split", eval_opts.split, "train | val | test");
  eval->add_option("--perturb", eval_opts.perturb, "table, or a comma list such as none,rot_pi,scale_0.8");
  eval->add_flag("--rescale-radius", eval_opts.rescale_radius, "Scale query radii with the cloud");

  auto* ablate = app.add_subcommand("ablate", "Train every cell of the config's ablation axes");
  ablate->add_option("config", config_path, "Config file")->required();

  GradcheckOptions gc;
  std::string fault;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad->add_option("--filter", gc.filter, "Only cases whose name starts with this");
  auto* fault_opt = grad->add_option("--inject-fault", fault, "Corrupt the analytic gradient of one case");
  grad->add_option("--instances", gc.instances, "Random instances per case")->check(CLI::PositiveNumber);

  BenchOptions bench_opts;
  auto* bench = app.add_subcommand("bench", "Time one forward and backward pass");
  bench->add_option("--preset", bench_opts.preset, "toy | pointvector-s | pointvector-l | pointvector-xl");
  bench->add_option("--points", bench_opts.points, "Points per cloud")->check(CLI::PositiveNumber);
  bench->add_option("--batch", bench_opts.batch, "Clouds per batch")->check(CLI::PositiveNumber);
  bench->add_option("--iters", bench_opts.iters, "Timed repetitions")->check(CLI::PositiveNumber);

  std::string gen_config, gen_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as point files plus a manifest");
  gen->add_option("out", gen_out, "Output directory")->required();
  gen->add_option("--config", gen_config, "Config whose data section to use");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : config_error;
  }
  if (*seed_opt) g.seed = seed;
  g.precision = precision == "double" ? Precision::dual : Precision::single;
  if (*fault_opt) gc.inject_fault = fault;

  if (*train) return cmd_train(config_path, g, out, err);
  if (*eval) return cmd_eval(eval_opts, g, out, err);
  if (*ablate) return cmd_ablate(config_path, g, out, err);
  if (*grad) return cmd_gradcheck(gc, g, out, err);
  if (*bench) return cmd_bench(bench_opts, g, out, err);
  if (*gen) return cmd_gen_data(gen_config, gen_out, g, out, err);
  return config_error;
}

}  // namespace pointvector::cli
