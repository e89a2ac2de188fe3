#include "fms/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fms/curve.hpp"
#include "fms/ssm.hpp"

namespace fms {

namespace {

constexpr double kPi = 3.14159265358979323846;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

Vec3 world_extent(const Grid& g) {
  return {g.resolution[0] * g.cell_size[0], g.resolution[1] * g.cell_size[1],
          g.resolution[2] * g.cell_size[2]};
}

Cell cell_of(const Grid& g, const Vec3& p) {
  Cell c{};
  for (int a = 0; a < 3; ++a)
    c[a] = static_cast<std::int64_t>(std::floor((p[a] - g.origin[a]) / g.cell_size[a]));
  return c;
}

bool inside_any(const std::vector<Box3D>& boxes, const Vec3& p, const Enlarge& e) {
  for (const auto& b : boxes)
    if (inside_enlarged(b, p, e)) return true;
  return false;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---- synthetic scenes ------------------------------------------------------

void SceneConfig::check() const {
  if (min_boxes < 0 || max_boxes < min_boxes)
    throw ContractError("scene: box count range [" + std::to_string(min_boxes) + ", " +
                        std::to_string(max_boxes) + "] is empty");
  if (classes.empty() && max_boxes > 0) throw ContractError("scene: no box classes");
  for (int c : classes)
    if (c < 1 || c > 3) throw ContractError("scene: class ids are 1..3");
  if (!(fg_fraction > 0.0 && fg_fraction < 1.0))
    throw ContractError("scene: foreground fraction must be in (0, 1)");
  if (!(surface_density > 0.0)) throw ContractError("scene: surface density must be > 0");
  if (!(surface_noise >= 0.0)) throw ContractError("scene: noise must be >= 0");
}

Point make_point(const Vec3& xyz, double intensity, const Grid& grid) {
  Point p;
  p.xyz = xyz;
  p.feat = {intensity, (xyz[2] - grid.origin[2]) / 4.0};
  return p;
}

Vec3 class_size(int class_id) {
  switch (class_id) {
    case 1: return {4.0, 1.8, 1.5};
    case 2: return {0.8, 0.8, 1.7};
    case 3: return {1.8, 0.7, 1.6};
    default: throw ContractError("scene: unknown class " + std::to_string(class_id));
  }
}

namespace {

// Intensity range of foreground points per class.
std::pair<double, double> class_intensity(int class_id) {
  switch (class_id) {
    case 1: return {0.45, 0.95};
    case 2: return {0.35, 0.85};
    default: return {0.40, 0.90};
  }
}

std::string describe(const SceneConfig& cfg, int n_boxes) {
  const auto ext = world_extent(cfg.grid);
  std::ostringstream os;
  os << n_boxes << " boxes in a " << ext[0] << " x " << ext[1] << " m grid, classes {";
  for (std::size_t i = 0; i < cfg.classes.size(); ++i) os << (i ? "," : "") << cfg.classes[i];
  os << "}, enlarge " << cfg.enlarge.xy << " m";
  return os.str();
}

std::vector<Box3D> place_boxes(const SceneConfig& cfg, Rng& rng) {
  const int n = static_cast<int>(uniform_int(rng, cfg.min_boxes, cfg.max_boxes));
  const auto ext = world_extent(cfg.grid);
  std::vector<Box3D> boxes;
  std::vector<double> radius;
  for (int i = 0; i < n; ++i) {
    Box3D b;
    b.class_id = cfg.classes[static_cast<std::size_t>(uniform_int(rng, 0, cfg.classes.size() - 1))];
    const auto nominal = class_size(b.class_id);
    for (int a = 0; a < 3; ++a) b.size[a] = nominal[a] * uniform(rng, 0.9, 1.1);
    b.yaw = uniform(rng, -kPi, kPi);
    const double r = 0.5 * std::hypot(b.size[0], b.size[1]) + cfg.enlarge.xy;
    const double margin = r + 0.25;
    if (2 * margin >= ext[0] || 2 * margin >= ext[1] || b.size[2] + cfg.enlarge.z >= ext[2])
      throw std::runtime_error("generate_scene: grid too small for a class " +
                               std::to_string(b.class_id) + " box (" + describe(cfg, n) + ")");
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      b.center = {cfg.grid.origin[0] + uniform(rng, margin, ext[0] - margin),
                  cfg.grid.origin[1] + uniform(rng, margin, ext[1] - margin),
                  cfg.grid.origin[2] + b.size[2] / 2};
      placed = true;
      for (std::size_t j = 0; j < boxes.size() && placed; ++j)
        placed = std::hypot(b.center[0] - boxes[j].center[0],
                            b.center[1] - boxes[j].center[1]) > r + radius[j];
    }
    if (!placed)
      throw std::runtime_error("generate_scene: could not place box " + std::to_string(i + 1) +
                               " after 1000 attempts (" + describe(cfg, n) + ")");
    boxes.push_back(b);
    radius.push_back(r);
  }
  return boxes;
}

// Points on the four sides and the top of a box.
void surface_points(const Box3D& b, const SceneConfig& cfg, Rng& rng,
                    std::vector<Point>& out) {
  const double l = b.size[0], w = b.size[1], h = b.size[2];
  const double areas[5] = {l * h, l * h, w * h, w * h, l * w};
  const double total = std::accumulate(std::begin(areas), std::end(areas), 0.0);
  const auto count = static_cast<std::size_t>(std::lround(cfg.surface_density * total));
  std::discrete_distribution<int> face(std::begin(areas), std::end(areas));
  std::normal_distribution<double> noise(0.0, cfg.surface_noise);
  const auto [ilo, ihi] = class_intensity(b.class_id);
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  for (std::size_t i = 0; i < count; ++i) {
    double lx = 0, ly = 0, lz = 0;
    switch (face(rng)) {
      case 0: lx = uniform(rng, -l / 2, l / 2); ly = -w / 2; lz = uniform(rng, -h / 2, h / 2); break;
      case 1: lx = uniform(rng, -l / 2, l / 2); ly = w / 2; lz = uniform(rng, -h / 2, h / 2); break;
      case 2: lx = -l / 2; ly = uniform(rng, -w / 2, w / 2); lz = uniform(rng, -h / 2, h / 2); break;
      case 3: lx = l / 2; ly = uniform(rng, -w / 2, w / 2); lz = uniform(rng, -h / 2, h / 2); break;
      default: lx = uniform(rng, -l / 2, l / 2); ly = uniform(rng, -w / 2, w / 2); lz = h / 2; break;
    }
    lx += noise(rng);
    ly += noise(rng);
    lz += noise(rng);
    Point p = make_point(
        {b.center[0] + lx * c - ly * s, b.center[1] + lx * s + ly * c, b.center[2] + lz},
        uniform(rng, ilo, ihi), cfg.grid);
    if (cfg.grid.contains(cell_of(cfg.grid, p.xyz))) out.push_back(std::move(p));
  }
}

}  // namespace

SceneSample generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.check();
  Rng rng(seed);
  SceneSample s;
  s.seed = seed;
  s.boxes = place_boxes(cfg, rng);
  for (const auto& b : s.boxes) surface_points(b, cfg, rng, s.points);

  // Foreground cells, and how many of them the label rule counts.
  std::set<Cell> occupied;
  for (const auto& p : s.points) occupied.insert(cell_of(cfg.grid, p.xyz));
  std::size_t fg_cells = 0;
  for (const auto& c : occupied)
    if (inside_any(s.boxes, cfg.grid.center_of(c), cfg.enlarge)) ++fg_cells;
  const std::size_t stray = occupied.size() - fg_cells;
  std::size_t want = cfg.empty_background;
  if (fg_cells > 0) {
    const auto total = static_cast<std::size_t>(
        std::lround(static_cast<double>(fg_cells) / cfg.fg_fraction));
    want = total > fg_cells + stray ? total - fg_cells - stray : 0;
  }

  // Background: scattered ground cells and short walls of clutter.
  const auto& res = cfg.grid.resolution;
  std::vector<Cell> bg;
  auto try_add = [&](const Cell& c) {
    if (bg.size() >= want || !cfg.grid.contains(c) || occupied.count(c)) return;
    if (inside_any(s.boxes, cfg.grid.center_of(c), cfg.enlarge)) return;
    occupied.insert(c);
    bg.push_back(c);
  };
  const std::size_t max_attempts = 200 * (want + 1);
  for (std::size_t attempt = 0; bg.size() < want && attempt < max_attempts; ++attempt) {
    if (uniform(rng, 0, 1) < 0.55) {
      try_add({uniform_int(rng, 0, res[0] - 1), uniform_int(rng, 0, res[1] - 1), 0});
    } else {
      const std::int64_t x0 = uniform_int(rng, 0, res[0] - 1);
      const std::int64_t y0 = uniform_int(rng, 0, res[1] - 1);
      const std::int64_t len = uniform_int(rng, 1, 6);
      const std::int64_t height = uniform_int(rng, 2, std::min<std::int64_t>(10, res[2]));
      const bool along_x = uniform(rng, 0, 1) < 0.5;
      for (std::int64_t k = 0; k < len; ++k)
        for (std::int64_t z = 0; z < height; ++z)
          try_add({x0 + (along_x ? k : 0), y0 + (along_x ? 0 : k), z});
    }
  }
  for (const auto& c : bg) {
    const auto n = static_cast<int>(uniform_int(rng, 1, 3));
    const bool ground = c[2] == 0;
    for (int i = 0; i < n; ++i) {
      Vec3 p{};
      for (int attempt = 0; attempt < 10; ++attempt) {
        for (int a = 0; a < 3; ++a)
          p[a] = cfg.grid.origin[a] + (static_cast<double>(c[a]) + uniform(rng, 0, 1)) *
                                          cfg.grid.cell_size[a];
        if (!inside_any(s.boxes, p, cfg.enlarge)) break;
        p = cfg.grid.center_of(c);
      }
      const double intensity = ground ? uniform(rng, 0.05, 0.40) : uniform(rng, 0.15, 0.65);
      s.points.push_back(make_point(p, intensity, cfg.grid));
    }
  }
  return s;
}

double foreground_fraction(const SceneSample& s, const SceneConfig& cfg) {
  auto vox = voxelize(s.points, cfg.grid);
  if (vox.size() == 0) return 0.0;
  auto labels = foreground_labels(vox, s.boxes, cfg.enlarge);
  return static_cast<double>(std::count(labels.begin(), labels.end(), 1)) /
         static_cast<double>(vox.size());
}

// ---- model -------------------------------------------------------------------

std::vector<StageConfig> default_stages() {
  StageConfig st;
  return {st, st};
}

void ModelConfig::check() const {
  if (stages.empty()) throw ContractError("model: at least one stage");
  for (const auto& st : stages) {
    st.check();
    if (st.d() != stages.front().d())
      throw ContractError("model: every stage must have the same width");
    if (st.block.classes != 4)
      throw ContractError("model: semantic heads predict background plus 3 classes");
  }
  if (in_dim == 0 || reg_dim == 0) throw ContractError("model: zero width");
}

Model Model::make(ParamStore& store, Rng& rng, const ModelConfig& cfg) {
  cfg.check();
  Model m;
  m.cfg = cfg;
  const std::size_t d = cfg.stages.front().d();
  m.stem = Linear::make(store, "stem", rng, cfg.in_dim, d);
  for (std::size_t i = 0; i < cfg.stages.size(); ++i)
    m.stages.push_back(StageParams::make(store, "stage" + std::to_string(i), rng, cfg.stages[i]));
  m.head = Mlp::make(store, "head", rng, d, cfg.head_hidden, 2 + cfg.reg_dim);
  return m;
}

Grid final_grid(const Grid& g, const ModelConfig& cfg) {
  Grid out = g;
  for (const auto& st : cfg.stages)
    if (st.stride > 1) out = downsample_map({}, out, st.stride).grid;
  return out;
}

PreparedScene prepare_scene(SceneSample s, const SceneConfig& scfg, const ModelConfig& mcfg) {
  PreparedScene p;
  p.vox = voxelize(s.points, scfg.grid);
  if (p.vox.size() == 0) p.vox.feats = Tensor::zeros({0, mcfg.in_dim});
  if (p.vox.dim() != mcfg.in_dim)
    throw ContractError("scene: voxel features have width " + std::to_string(p.vox.dim()) +
                        ", model expects " + std::to_string(mcfg.in_dim));
  const Grid g = final_grid(scfg.grid, mcfg);
  p.bev = {g.resolution[0], g.resolution[1], 1};
  const auto cells = static_cast<std::size_t>(g.resolution[0] * g.resolution[1]);
  p.targets.objectness.assign(cells, 0);
  std::vector<double> reg(cells * mcfg.reg_dim, 0.0);
  for (const auto& b : s.boxes) {
    const Cell c = cell_of(g, b.center);
    if (c[0] < 0 || c[0] >= g.resolution[0] || c[1] < 0 || c[1] >= g.resolution[1]) continue;
    const auto i = static_cast<std::size_t>(c[0] + g.resolution[0] * c[1]);
    p.targets.objectness[i] = 1;
    const double t[8] = {(b.center[0] - g.origin[0]) / g.cell_size[0] - (c[0] + 0.5),
                         (b.center[1] - g.origin[1]) / g.cell_size[1] - (c[1] + 0.5),
                         b.center[2] - g.origin[2],
                         std::log(b.size[0]),
                         std::log(b.size[1]),
                         std::log(b.size[2]),
                         std::sin(b.yaw),
                         std::cos(b.yaw)};
    for (std::size_t k = 0; k < mcfg.reg_dim; ++k) reg[i * mcfg.reg_dim + k] = k < 8 ? t[k] : 0.0;
  }
  p.targets.regression = Tensor::from({cells, mcfg.reg_dim}, std::move(reg));
  p.scene = std::move(s);
  return p;
}

ForwardResult forward(const Model& m, const PreparedScene& s, const StageHooks& hooks,
                      TemplateCache* templates) {
  VoxelSet x = s.vox;
  x.feats = m.stem(s.vox.feats);
  ForwardResult fr;
  fr.backbone = run_backbone(x, m.cfg.stages, m.stages, hooks, templates);
  const auto& out = fr.backbone.out;
  const auto cells = static_cast<std::size_t>(s.bev[0] * s.bev[1]);
  Index slot(out.size());
  std::vector<double> count(cells, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& c = out.coords[i];
    slot[i] = c[0] + s.bev[0] * c[1];
    count[static_cast<std::size_t>(slot[i])] += 1.0;
  }
  for (double& c : count) c = c > 0 ? 1.0 / c : 0.0;
  const std::size_t d = m.cfg.stages.front().d();
  Tensor pooled = mul(scatter_add(out.feats, 0, slot, cells),
                      repeat_cols(Tensor::from({cells, 1}, std::move(count)), d));
  Tensor h = m.head(pooled);
  fr.logits = slice(h, 1, 0, 2);
  fr.regression = slice(h, 1, 2, 2 + m.cfg.reg_dim);
  return fr;
}

void TrainConfig::check() const {
  scene.check();
  model.check();
  if (steps < 1) throw ContractError("train: steps must be >= 1");
  if (batch < 1) throw ContractError("train: batch must be >= 1");
  if (!(lr >= 0.0)) throw ContractError("train: learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("train: momentum must be in [0, 1)");
  if (train_scenes < 1) throw ContractError("train: need training scenes");
  if (!(eval_alpha > 0.0 && eval_alpha <= 1.0)) throw ContractError("train: eval alpha not in (0, 1]");
  focal_fg.check(2);
  focal_sem.check(4);
}

namespace {

VoxelSet label_view(const BackboneResult& bb, std::size_t stage) {
  VoxelSet v;
  v.coords = bb.stage_coords[stage];
  v.grid = bb.stage_grids[stage];
  return v;
}

std::vector<int> pick(const std::vector<int>& labels, const Index& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<std::size_t>(idx[i])];
  return out;
}

}  // namespace

LossTerms compute_losses(const ForwardResult& fr, const PreparedScene& s,
                         const TrainConfig& cfg) {
  const auto& bb = fr.backbone;
  const std::size_t stages = bb.stages.size();
  Tensor lf = Tensor::scalar(0.0), ls = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < stages; ++k) {
    const auto view = label_view(bb, k);
    const auto& st = bb.stages[k];
    lf = add(lf, focal_loss(binary_probs(st.scores),
                            foreground_labels(view, s.scene.boxes, cfg.scene.enlarge),
                            cfg.focal_fg));
    const auto sem = semantic_labels(view, s.scene.boxes, cfg.scene.enlarge);
    ls = add(ls, focal_loss(softmax(st.semantic), pick(sem, st.split.fg), cfg.focal_sem));
  }
  LossTerms t;
  t.f = scale(lf, 1.0 / static_cast<double>(stages));
  t.s = scale(ls, 1.0 / static_cast<double>(stages));
  std::tie(t.cls, t.reg) = head_losses(fr.logits, fr.regression, s.targets);
  t.total = total_loss(t.f, t.s, t.cls, t.reg, cfg.weights);
  return t;
}

// ---- metrics -----------------------------------------------------------------

std::pair<double, double> recall_precision_at(const std::vector<double>& scores,
                                              const std::vector<int>& labels, double alpha) {
  if (scores.size() != labels.size()) throw ContractError("recall: size mismatch");
  const auto top = sample_topk(scores, alpha);
  std::size_t hits = 0;
  for (auto i : top.fg) hits += labels[static_cast<std::size_t>(i)] == 1;
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const double recall = pos ? static_cast<double>(hits) / static_cast<double>(pos) : 1.0;
  const double precision =
      top.fg.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(top.fg.size());
  return {recall, precision};
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ContractError("average precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0, acc = 0;
  for (std::size_t r = 0; r < order.size(); ++r)
    if (labels[order[r]] == 1) {
      hits += 1;
      acc += hits / static_cast<double>(r + 1);
    }
  return hits > 0 ? acc / hits : 0.0;
}

Index inject_foreground_noise(const Index& fg, const Index& bg, double ratio,
                              std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw ContractError("noise: ratio " + std::to_string(ratio) + " not in [0, 1]");
  const auto count = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(fg.size()) + 1e-9));
  if (count > bg.size())
    throw ContractError("noise: " + std::to_string(count) + " replacements but only " +
                        std::to_string(bg.size()) + " background rows");
  Rng rng(seed);
  // Full shuffles so that the first `count` picks are a prefix for every ratio.
  std::vector<std::size_t> slots(fg.size());
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  Index pool = bg;
  std::shuffle(pool.begin(), pool.end(), rng);
  Index out = fg;
  for (std::size_t i = 0; i < count; ++i) out[slots[i]] = pool[i];
  return out;
}

ValMetrics evaluate(const Model& m, const std::vector<PreparedScene>& scenes,
                    const TrainConfig& cfg, double noise, std::uint64_t noise_seed) {
  ValMetrics out;
  std::size_t fg_total = 0, fg_hit = 0, top_total = 0, sampled = 0, sampled_fg = 0,
              sem_total = 0, sem_hit = 0;
  std::vector<double> cell_scores;
  std::vector<int> cell_labels;
  double loss = 0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const auto& s = scenes[si];
    StageHooks hooks;
    if (noise > 0.0) {
      auto stage = std::make_shared<std::uint64_t>(0);
      hooks.select = [=](const Index& fg, const Index& bg) {
        return inject_foreground_noise(fg, bg, noise,
                                       derive_seed(noise_seed, si * 64 + (*stage)++));
      };
    }
    auto fr = forward(m, s, hooks);
    loss += compute_losses(fr, s, cfg).total.item();
    const auto& bb = fr.backbone;
    if (!bb.stages.empty() && !bb.stage_coords[0].empty()) {
      const auto view = label_view(bb, 0);
      const auto fg = foreground_labels(view, s.scene.boxes, cfg.scene.enlarge);
      const auto sem = semantic_labels(view, s.scene.boxes, cfg.scene.enlarge);
      const auto& st = bb.stages[0];
      std::vector<double> sc(st.scores.data().begin(), st.scores.data().end());
      const auto top = sample_topk(sc, cfg.eval_alpha);
      const auto pos = static_cast<std::size_t>(std::count(fg.begin(), fg.end(), 1));
      fg_total += pos;
      top_total += top.fg.size();
      for (auto i : top.fg) fg_hit += fg[static_cast<std::size_t>(i)] == 1;
      const auto pred = predict_semantics(st.semantic);
      for (std::size_t r = 0; r < st.split.fg.size(); ++r) {
        const auto i = static_cast<std::size_t>(st.split.fg[r]);
        ++sampled;
        if (fg[i] == 1) {
          ++sampled_fg;
          ++sem_total;
          sem_hit += pred[r] == sem[i];
        }
      }
    }
    const auto probs = softmax(fr.logits);
    for (std::size_t c = 0; c < probs.rows(); ++c) {
      cell_scores.push_back(probs.at(c, 1));
      cell_labels.push_back(s.targets.objectness[c]);
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  out.fg_recall = fg_total ? ratio(fg_hit, fg_total) : 1.0;
  out.fg_precision = ratio(fg_hit, top_total);
  out.sampled_precision = ratio(sampled_fg, sampled);
  out.sem_accuracy = ratio(sem_hit, sem_total);
  out.ap = average_precision(cell_scores, cell_labels);
  out.loss = scenes.empty() ? 0.0 : loss / static_cast<double>(scenes.size());
  return out;
}

// ---- training ----------------------------------------------------------------

std::vector<PreparedScene> make_scenes(const TrainConfig& cfg, std::size_t count,
                                       std::uint64_t stream) {
  std::vector<PreparedScene> out;
  out.reserve(count);
  const std::uint64_t base = derive_seed(cfg.seed, stream);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(prepare_scene(generate_scene(cfg.scene, derive_seed(base, i)), cfg.scene,
                                cfg.model));
  return out;
}

TrainResult train(const TrainConfig& cfg) {
  cfg.check();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r;
  Rng rng(derive_seed(cfg.seed, 0));
  r.model = Model::make(r.store, rng, cfg.model);
  const auto train_set = make_scenes(cfg, cfg.train_scenes, 1);
  const auto val_set = make_scenes(cfg, cfg.val_scenes, 2);
  r.untrained = evaluate(r.model, val_set, cfg);
  MomentumSgd opt(r.store, cfg.lr, cfg.momentum);
  std::size_t cursor = 0;
  for (int step = 1; step <= cfg.steps; ++step) {
    r.store.zero_grad();
    StepLog log;
    log.step = step;
    const double inv = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& scene = train_set[cursor++ % train_set.size()];
      Tape tape;
      TapeScope scope(tape);
      LossTerms t;
      try {
        t = compute_losses(forward(r.model, scene), scene, cfg);
      } catch (const ContractError& e) {
        throw std::runtime_error("train: step " + std::to_string(step) + ": " + e.what());
      }
      tape.backward(scale(t.total, inv));
      log.total += inv * t.total.item();
      log.f += inv * t.f.item();
      log.s += inv * t.s.item();
      log.cls += inv * t.cls.item();
      log.reg += inv * t.reg.item();
    }
    r.steps.push_back(log);
    const double norm = opt.step(cfg.clip);
    if (!std::isfinite(norm))
      throw std::runtime_error("train: non-finite gradient at step " + std::to_string(step));
    if ((cfg.val_every > 0 && step % cfg.val_every == 0) || step == cfg.steps)
      if (r.val.empty() || r.val.back().step != step)
        r.val.push_back({step, evaluate(r.model, val_set, cfg)});
  }
  r.seconds = seconds_since(t0);
  return r;
}

void write_step_log(std::ostream& os, const std::vector<StepLog>& log) {
  os << "step,loss_total,loss_f,loss_s,loss_cls,loss_reg\n";
  os << std::setprecision(10);
  for (const auto& l : log)
    os << l.step << "," << l.total << "," << l.f << "," << l.s << "," << l.cls << "," << l.reg
       << "\n";
}

// ---- ablations ---------------------------------------------------------------

AblationKind parse_ablation(const std::string& name) {
  static const std::map<std::string, AblationKind> kinds{
      {"alpha", AblationKind::alpha},   {"scan", AblationKind::scan},
      {"kernel", AblationKind::kernel}, {"iterations", AblationKind::iterations},
      {"noise", AblationKind::noise}};
  auto it = kinds.find(name);
  if (it == kinds.end())
    throw std::invalid_argument("unknown ablation '" + name +
                                "' (alpha, scan, kernel, iterations, noise)");
  return it->second;
}

void Table::write_csv(std::ostream& os) const {
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n" << std::setprecision(10);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    bool first = true;
    if (!labels.empty()) {
      os << labels[r];
      first = false;
    }
    for (double v : rows[r]) {
      os << (first ? "" : ",") << v;
      first = false;
    }
    os << "\n";
  }
}

FgWindow interleaved_window(const Model& m, const PreparedScene& s, std::size_t window) {
  FgWindow out;
  out.x = Tensor::zeros({0, m.cfg.stages.front().d()});
  if (s.vox.size() == 0) return out;
  const auto fg = foreground_labels(s.vox, s.scene.boxes);
  const auto sem = semantic_labels(s.vox, s.scene.boxes);
  Index rows;
  std::vector<Cell> coords;
  for (std::size_t i = 0; i < fg.size(); ++i)
    if (fg[i] == 1) {
      rows.push_back(static_cast<std::int64_t>(i));
      coords.push_back(s.vox.coords[i]);
    }
  if (rows.empty()) return out;
  const auto frame = rotation_frame(s.vox.grid.resolution, 0.0);
  const auto& tmpl = default_templates().get(m.cfg.stages.front().scheme, frame.order);
  const auto order = serialize_order(coords, tmpl, frame);
  std::vector<int> cls(order.size());
  for (std::size_t k = 0; k < order.size(); ++k)
    cls[k] = sem[static_cast<std::size_t>(rows[static_cast<std::size_t>(order[k])])];
  const std::size_t w = std::min(window, order.size());
  std::size_t best = 0, best_changes = 0;
  for (std::size_t start = 0; start + w <= order.size(); ++start) {
    std::size_t changes = 0;
    for (std::size_t k = start + 1; k < start + w; ++k) changes += cls[k] != cls[k - 1];
    if (changes > best_changes) {
      best_changes = changes;
      best = start;
    }
  }
  Index pick_rows(w);
  for (std::size_t k = 0; k < w; ++k) {
    const auto o = static_cast<std::size_t>(order[best + k]);
    pick_rows[k] = rows[o];
    out.coords.push_back(coords[o]);
    out.classes.push_back(cls[best + k]);
  }
  out.x = gather(m.stem(s.vox.feats), 0, pick_rows);
  return out;
}

std::vector<double> window_association(const Model& m, const FgWindow& w, bool with_saf) {
  const auto& st = m.cfg.stages.front();
  const auto& block = m.stages.front().block;
  const std::size_t n = w.coords.size();
  std::vector<double> total(n * n, 0.0);
  if (n == 0) return total;
  const auto steps = discretize(block.ssm, w.x);
  for (std::size_t c = 0; c < st.d(); ++c) {
    const auto mc = with_saf ? saf_association(steps, w.classes, block.saf_w, c, {},
                                               st.block.saf_per_group)
                             : association_matrix(steps, c);
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += std::abs(mc[k]);
  }
  return total;
}

double kernel_similarity(const Model& m, const std::vector<PreparedScene>& scenes,
                         std::size_t window) {
  double acc = 0;
  std::size_t used = 0;
  for (const auto& s : scenes) {
    const auto w = interleaved_window(m, s, window);
    if (w.coords.size() < 2) continue;
    acc += association_similarity(window_association(m, w, true), w.coords, w.classes);
    ++used;
  }
  return used ? acc / static_cast<double>(used) : 0.0;
}

namespace {

double parse_number(const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size())
    throw std::invalid_argument("ablation: '" + v + "' is not a number");
  return x;
}

double mean_flops(const std::vector<PreparedScene>& scenes, const ModelConfig& cfg) {
  double acc = 0;
  for (const auto& s : scenes) acc += count_flops(s.vox, cfg.stages).total();
  return scenes.empty() ? 0.0 : acc / static_cast<double>(scenes.size());
}

// Milliseconds per scene of a plain forward pass.
double forward_ms(const Model& m, const std::vector<PreparedScene>& scenes) {
  if (scenes.empty()) return 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& s : scenes) forward(m, s);
  return 1000.0 * seconds_since(t0) / static_cast<double>(scenes.size());
}

}  // namespace

Table run_ablation(AblationKind kind, const std::vector<std::string>& values,
                   const TrainConfig& base) {
  base.check();
  Table t;
  const auto val_set = make_scenes(base, base.val_scenes, 2);
  auto finish = [&](std::vector<double> row, const Model& m, const ModelConfig& mc) {
    row.push_back(mean_flops(val_set, mc));
    if (base.timing) row.push_back(forward_ms(m, val_set));
    t.rows.push_back(std::move(row));
  };
  auto head = [&](std::vector<std::string> h) {
    h.push_back("flops");
    if (base.timing) h.push_back("wall_ms");
    t.header = std::move(h);
  };
  switch (kind) {
    case AblationKind::alpha: {
      head({"alpha", "ap", "fg_recall", "fg_precision"});
      for (const auto& v : values) {
        auto cfg = base;
        const double a = parse_number(v);
        for (auto& st : cfg.model.stages) st.alpha = a;
        auto r = train(cfg);
        const auto m = evaluate(r.model, val_set, cfg);
        finish({a, m.ap, m.fg_recall, m.fg_precision}, r.model, cfg.model);
      }
      break;
    }
    case AblationKind::scan: {
      head({"scheme", "ap", "mean_gap0", "mean_min_gap"});
      for (const auto& v : values) {
        auto cfg = base;
        const Scheme sc = parse_scheme(v);
        for (auto& st : cfg.model.stages) st.scheme = sc;
        auto r = train(cfg);
        const auto m = evaluate(r.model, val_set, cfg);
        double g0 = 0, gmin = 0;
        std::size_t pairs = 0;
        for (const auto& s : val_set) {
          const auto fg = foreground_labels(s.vox, s.scene.boxes, cfg.scene.enlarge);
          std::vector<Cell> coords;
          for (std::size_t i = 0; i < fg.size(); ++i)
            if (fg[i] == 1) coords.push_back(s.vox.coords[i]);
          const auto g = truncation_gap(coords, sc, cfg.model.stages.front().angles,
                                        s.vox.grid.resolution);
          g0 += g.mean_gap0 * static_cast<double>(g.pairs);
          gmin += g.mean_min_gap * static_cast<double>(g.pairs);
          pairs += g.pairs;
        }
        const double np = pairs ? static_cast<double>(pairs) : 1.0;
        t.labels.push_back(scheme_name(sc));
        finish({m.ap, g0 / np, gmin / np}, r.model, cfg.model);
      }
      break;
    }
    case AblationKind::kernel: {
      head({"taps", "sim", "ap"});
      for (const auto& v : values) {
        auto cfg = base;
        const auto taps = std::max(1, static_cast<int>(parse_number(v)));
        if (taps % 2 == 0) throw std::invalid_argument("ablation: kernel taps must be odd");
        for (auto& st : cfg.model.stages) st.block.saf_taps = taps;
        auto r = train(cfg);
        const auto m = evaluate(r.model, val_set, cfg);
        finish({static_cast<double>(taps), kernel_similarity(r.model, val_set), m.ap}, r.model,
               cfg.model);
      }
      break;
    }
    case AblationKind::iterations: {
      head({"t", "ap"});
      for (const auto& v : values) {
        auto cfg = base;
        const int it = static_cast<int>(parse_number(v));
        for (auto& st : cfg.model.stages) st.t = it;
        auto r = train(cfg);
        const auto m = evaluate(r.model, val_set, cfg);
        finish({static_cast<double>(it), m.ap}, r.model, cfg.model);
      }
      break;
    }
    case AblationKind::noise: {
      head({"ratio", "ap", "sampled_precision"});
      auto r = train(base);
      for (const auto& v : values) {
        const double ratio = parse_number(v);
        const auto m = evaluate(r.model, val_set, base, ratio, derive_seed(base.seed, 99));
        finish({ratio, m.ap, m.sampled_precision}, r.model, base.model);
      }
      break;
    }
  }
  return t;
}

}  // namespace fms
