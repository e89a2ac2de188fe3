#include "fms/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "fms/config.hpp"
#include "fms/curve.hpp"
#include "fms/harness.hpp"
#include "fms/io.hpp"

namespace fms {

namespace {

// Usage errors raised after CLI parsing (bad environment, bad values).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return in;
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

void close_out(std::ofstream& out, const std::string& path) {
  out.close();
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ckpt;
};

TrainConfig resolve_config(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (const char* env = std::getenv("FMS_SEED"); env && *env) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(env, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || env[used] != '\0' || env[0] == '-')
      throw UsageError(std::string("FMS_SEED='") + env + "' is not a non-negative integer");
    cfg.seed = v;
  }
  cfg.check();
  return cfg;
}

// Same initialization as training, optionally overwritten by a checkpoint.
Model load_model(ParamStore& store, const TrainConfig& cfg, const std::string& ckpt) {
  Rng rng(derive_seed(cfg.seed, 0));
  Model m = Model::make(store, rng, cfg.model);
  if (!ckpt.empty()) {
    auto in = open_in(ckpt, std::ios::binary);
    store.load(in);
  }
  return m;
}

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) throw UsageError("empty entry in value list '" + s + "'");
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  if (out.empty()) throw UsageError("empty value list");
  return out;
}

void add_common(CLI::App* app, Common& c, bool with_ckpt) {
  app->add_option("--config", c.config, "Key = value configuration file (defaults when omitted)");
  app->add_option("--seed", c.seed, "Master seed (FMS_SEED overrides)");
  if (with_ckpt)
    app->add_option("--ckpt", c.ckpt, "Checkpoint written by train (fresh weights when omitted)");
}

const std::vector<std::string> kSchemes{"hilbert", "zorder", "raster-x", "raster-y"};

int gen_template(const std::string& scheme, int order, const std::string& path,
                 std::ostream& out) {
  const auto t = build_template(parse_scheme(scheme), order);
  auto f = open_out(path, std::ios::binary);
  save_template(f, t);
  close_out(f, path);
  out << "wrote " << scheme << " order " << order << " template to " << path << "\n";
  return 0;
}

int run_scene(const Common& c, const std::string& points, const std::string& boxes,
              const std::string& feats_path, std::ostream& out) {
  const auto cfg = resolve_config(c);
  SceneSample scene;
  {
    auto in = open_in(points);
    scene.points = read_points_csv(in, points, cfg.scene.grid);
  }
  if (!boxes.empty()) {
    auto in = open_in(boxes);
    scene.boxes = read_boxes_csv(in, boxes);
  }
  ParamStore store;
  const auto model = load_model(store, cfg, c.ckpt);
  const auto prepared = prepare_scene(std::move(scene), cfg.scene, cfg.model);
  const auto fr = forward(model, prepared);
  const auto& res = fr.backbone.out;

  auto f = open_out(feats_path);
  f << "x,y,z";
  const std::size_t d = cfg.model.stages.front().d();
  for (std::size_t k = 0; k < d; ++k) f << ",f" << k;
  f << "\n" << std::setprecision(10);
  for (std::size_t i = 0; i < res.size(); ++i) {
    const auto& cell = res.coords[i];
    f << cell[0] << "," << cell[1] << "," << cell[2];
    for (std::size_t k = 0; k < d; ++k) f << "," << res.feats.at(i, k);
    f << "\n";
  }
  close_out(f, feats_path);

  out << "voxels " << prepared.vox.size() << "\n";
  for (std::size_t k = 0; k < fr.backbone.stages.size(); ++k) {
    const auto& st = fr.backbone.stages[k];
    out << "stage " << k << ": " << fr.backbone.stage_coords[k].size() << " voxels, "
        << st.split.fg.size() << " sampled\n";
  }
  if (!prepared.scene.boxes.empty() && prepared.vox.size() > 0) {
    const auto labels = foreground_labels(prepared.vox, prepared.scene.boxes, cfg.scene.enlarge);
    const auto& sc = fr.backbone.stages.front().scores.data();
    const auto [recall, precision] = recall_precision_at(
        std::vector<double>(sc.begin(), sc.end()), labels, cfg.eval_alpha);
    out << "foreground recall " << recall << ", precision " << precision << " at alpha "
        << cfg.eval_alpha << "\n";
  }
  out << "wrote " << res.size() << " feature rows to " << feats_path << "\n";
  return 0;
}

void print_metrics(std::ostream& out, const std::string& tag, const ValMetrics& m) {
  out << tag << ": fg_recall " << m.fg_recall << " fg_precision " << m.fg_precision
      << " sem_accuracy " << m.sem_accuracy << " ap " << m.ap << " loss " << m.loss << "\n";
}

int train_cmd(const Common& c, const std::string& ckpt, const std::string& log,
              std::ostream& out) {
  const auto cfg = resolve_config(c);
  const auto r = train(cfg);
  auto f = open_out(ckpt, std::ios::binary);
  r.store.save(f);
  close_out(f, ckpt);
  auto l = open_out(log);
  write_step_log(l, r.steps);
  close_out(l, log);
  print_metrics(out, "untrained", r.untrained);
  for (const auto& v : r.val) print_metrics(out, "step " + std::to_string(v.step), v.m);
  out << "loss " << r.steps.front().total << " -> " << r.steps.back().total << " over "
      << r.steps.size() << " steps\n";
  return 0;
}

int ablate_cmd(const Common& c, const std::string& kind, const std::string& values,
               const std::string& path, std::ostream& out) {
  const auto cfg = resolve_config(c);
  const auto vals = split_values(values);
  Table t;
  try {
    t = run_ablation(parse_ablation(kind), vals, cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto f = open_out(path);
  t.write_csv(f);
  close_out(f, path);
  out << "wrote " << t.rows.size() << " rows to " << path << "\n";
  return 0;
}

int bench_cmd(const Common& c, std::size_t scenes, std::ostream& out) {
  const auto cfg = resolve_config(c);
  if (scenes == 0) throw UsageError("--scenes must be at least 1");
  ParamStore store;
  const auto model = load_model(store, cfg, c.ckpt);
  const auto set = make_scenes(cfg, scenes, 2);
  FlopsReport mean;
  std::vector<double> ms(cfg.model.stages.size(), 0.0);
  double voxels = 0;
  for (const auto& s : set) {
    const auto r = count_flops(s.vox, cfg.model.stages);
    mean.scoring += r.scoring;
    mean.embed += r.embed;
    mean.flatten += r.flatten;
    mean.encoder.resize(std::max(mean.encoder.size(), r.encoder.size()), 0.0);
    for (std::size_t k = 0; k < r.encoder.size(); ++k) mean.encoder[k] += r.encoder[k];
    mean.merge += r.merge;
    mean.downsample += r.downsample;
    voxels += static_cast<double>(s.vox.size());

    VoxelSet cur = s.vox;
    cur.feats = model.stem(s.vox.feats);
    for (std::size_t k = 0; k < cfg.model.stages.size(); ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      auto sr = encode_stage(cur, cfg.model.stages[k], model.stages[k], {}, &default_templates());
      cur = sr.out;
      if (cfg.model.stages[k].stride > 1)
        cur = downsample(cur, cfg.model.stages[k].stride, &model.stages[k].down);
      ms[k] += 1000.0 * std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }
  const double n = static_cast<double>(scenes);
  mean.scoring /= n;
  mean.embed /= n;
  mean.flatten /= n;
  for (double& e : mean.encoder) e /= n;
  mean.merge /= n;
  mean.downsample /= n;
  out << std::setprecision(10);
  mean.write_csv(out);
  out << "\nstage,wall_ms\n";
  for (std::size_t k = 0; k < ms.size(); ++k) out << k << "," << ms[k] / n << "\n";
  out << "\nscenes " << scenes << ", mean voxels " << voxels / n << "\n";
  return 0;
}

int viz_cmd(const Common& c, const std::string& what, std::size_t scene_index,
            std::size_t window, const std::string& path, std::ostream& out) {
  const auto cfg = resolve_config(c);
  ParamStore store;
  const auto model = load_model(store, cfg, c.ckpt);
  const auto scenes = make_scenes(cfg, scene_index + 1, 2);
  const auto& s = scenes.back();
  if (what == "assoc" || what == "assoc-saf") {
    const auto w = interleaved_window(model, s, window);
    const auto m = window_association(model, w, what == "assoc-saf");
    auto f = open_out(path, std::ios::binary);
    write_pgm(f, w.coords.size(), w.coords.size(), m);
    close_out(f, path);
    out << "wrote " << w.coords.size() << " x " << w.coords.size() << " map to " << path << "\n";
  } else if (what == "fg-heatmap") {
    const auto fr = forward(model, s);
    const auto& res = cfg.scene.grid.resolution;
    const auto wx = static_cast<std::size_t>(res[0]), wy = static_cast<std::size_t>(res[1]);
    std::vector<double> img(wx * wy, 0.0);
    const auto& sc = fr.backbone.stages.front().scores;
    for (std::size_t i = 0; i < s.vox.size(); ++i) {
      const auto& cell = s.vox.coords[i];
      // Row 0 is the far edge of the grid so that +y points up in the image.
      const auto row = wy - 1 - static_cast<std::size_t>(cell[1]);
      img[row * wx + static_cast<std::size_t>(cell[0])] += sc.at(i, 0);
    }
    auto f = open_out(path, std::ios::binary);
    write_pgm(f, wx, wy, img);
    close_out(f, path);
    out << "wrote " << wx << " x " << wy << " heatmap to " << path << "\n";
  } else {
    const auto& st = cfg.model.stages.front();
    const auto g = truncation_gap(s.vox.coords, st.scheme, st.angles, s.vox.grid.resolution);
    auto f = open_out(path);
    f << "pair,gap0,min_gap\n";
    for (std::size_t k = 0; k < g.gap0.size(); ++k)
      f << k << "," << g.gap0[k] << "," << g.min_gap[k] << "\n";
    close_out(f, path);
    out << "pairs " << g.pairs << ", mean gap at 0 " << g.mean_gap0 << ", mean min gap "
        << g.mean_min_gap << "\n";
  }
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Foreground-sampled state space encoding of sparse voxel scenes"};
  app.name("fms");
  app.require_subcommand(1);

  std::string scheme, tmpl_out;
  int order = 0;
  auto* gen = app.add_subcommand("gen-template", "Write a binary curve template");
  gen->add_option("--scheme", scheme, "Curve scheme")
      ->required()
      ->check(CLI::IsMember(kSchemes));
  gen->add_option("--order", order, "Curve order (side 2^order)")
      ->required()
      ->check(CLI::Range(kMinOrder, kMaxOrder));
  gen->add_option("--out", tmpl_out, "Output path")->required();

  Common run_c;
  std::string points, boxes, feats;
  auto* run = app.add_subcommand("run", "Encode one point cloud and write final voxel features");
  run->add_option("--points", points, "CSV x,y,z,intensity")->required();
  run->add_option("--boxes", boxes, "CSV class,cx,cy,cz,l,w,h,yaw (optional)");
  add_common(run, run_c, true);
  run->add_option("--out-feats", feats, "Output CSV x,y,z,f0..")->required();

  Common train_c;
  std::string ckpt, log;
  auto* tr = app.add_subcommand("train", "Train on synthetic scenes");
  add_common(tr, train_c, false);
  tr->add_option("--out", ckpt, "Checkpoint path")->required();
  tr->add_option("--log", log, "Per-step loss CSV")->required();

  Common abl_c;
  std::string kind, values, table;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate over a grid of values");
  ab->add_option("--kind", kind, "Swept setting")
      ->required()
      ->check(CLI::IsMember({"alpha", "scan", "kernel", "iterations", "noise"}));
  ab->add_option("--values", values, "Comma-separated values")->required();
  add_common(ab, abl_c, false);
  ab->add_option("--out", table, "Output CSV")->required();

  Common bench_c;
  std::size_t scenes = 4;
  auto* be = app.add_subcommand("bench", "FLOPs report and per-stage wall-clock");
  add_common(be, bench_c, true);
  be->add_option("--scenes", scenes, "Number of generated scenes")->capture_default_str();

  Common viz_c;
  std::string what, viz_out;
  std::size_t scene_index = 0, window = 48;
  auto* vz = app.add_subcommand("viz", "Diagnostic exports (PGM heatmaps, CSV otherwise)");
  vz->add_option("--what", what, "assoc, assoc-saf, fg-heatmap (PGM) or truncation (CSV)")
      ->required()
      ->check(CLI::IsMember({"assoc", "assoc-saf", "fg-heatmap", "truncation"}));
  vz->add_option("--out", viz_out, "Output path")->required();
  add_common(vz, viz_c, true);
  vz->add_option("--scene", scene_index, "Index of the generated validation scene")
      ->capture_default_str();
  vz->add_option("--window", window, "Rows in the association window")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return gen_template(scheme, order, tmpl_out, out);
    if (*run) return run_scene(run_c, points, boxes, feats, out);
    if (*tr) return train_cmd(train_c, ckpt, log, out);
    if (*ab) return ablate_cmd(abl_c, kind, values, table, out);
    if (*be) return bench_cmd(bench_c, scenes, out);
    return viz_cmd(viz_c, what, scene_index, window, viz_out, out);
  } catch (const UsageError& e) {
    err << "fms: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "fms: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace fms
