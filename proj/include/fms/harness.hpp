#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fms/backbone.hpp"
#include "fms/loss.hpp"
#include "fms/nn.hpp"
#include "fms/voxel.hpp"

namespace fms {

// ---- synthetic scenes ------------------------------------------------------

struct SceneConfig {
  Grid grid;                          // 64 x 64 x 16 cells of 0.25 m
  int min_boxes = 2;
  int max_boxes = 5;
  std::vector<int> classes{1, 2, 3};  // car, pedestrian, cyclist
  double fg_fraction = 0.2;           // target share of foreground voxels
  double surface_density = 40.0;      // foreground points per square meter
  double surface_noise = 0.05;        // meters
  std::size_t empty_background = 1500;  // background voxels when there are no boxes
  Enlarge enlarge;

  void check() const;
};

struct SceneSample {
  std::vector<Point> points;  // feat = [intensity, height / 4 m]
  std::vector<Box3D> boxes;
  std::uint64_t seed = 0;
};

/// Point with features [intensity, height above the grid floor / 4 m].
Point make_point(const Vec3& xyz, double intensity, const Grid& grid);

/// Nominal (length, width, height) of a class.
Vec3 class_size(int class_id);

/// Boxes on the ground plane without overlap, points on their side and top
/// faces, and background points in cells whose centers lie outside every
/// enlarged box. The background voxel count is chosen so that foreground
/// voxels make up `fg_fraction` of the scene.
SceneSample generate_scene(const SceneConfig& cfg, std::uint64_t seed);

/// Share of voxels labeled foreground.
double foreground_fraction(const SceneSample& s, const SceneConfig& cfg);

// ---- model -------------------------------------------------------------------

/// Two stages of width 32 with stride-2 downsampling after each.
std::vector<StageConfig> default_stages();

struct ModelConfig {
  std::vector<StageConfig> stages = default_stages();
  std::size_t in_dim = 3;       // voxel features: intensity, height, count
  std::size_t head_hidden = 32;
  std::size_t reg_dim = 8;      // dx, dy, z, log l, log w, log h, sin, cos

  void check() const;
};

struct Model {
  ModelConfig cfg;
  Linear stem;
  std::vector<StageParams> stages;
  Mlp head;  // D -> hidden -> 2 + reg_dim per bird's-eye-view cell

  static Model make(ParamStore& store, Rng& rng, const ModelConfig& cfg);
};

/// A scene voxelized once, with the bird's-eye-view head targets.
struct PreparedScene {
  SceneSample scene;
  VoxelSet vox;
  Cell bev{};  // head grid (x, y cells, 1)
  HeadTargets targets;
};

/// Resolution of the grid after all stage downsamples.
Grid final_grid(const Grid& g, const ModelConfig& cfg);
PreparedScene prepare_scene(SceneSample s, const SceneConfig& scfg, const ModelConfig& mcfg);

struct ForwardResult {
  BackboneResult backbone;
  Tensor logits;      // bev cells x 2
  Tensor regression;  // bev cells x reg_dim
};

ForwardResult forward(const Model& m, const PreparedScene& s, const StageHooks& hooks = {},
                      TemplateCache* templates = nullptr);

struct LossTerms {
  Tensor total, f, s, cls, reg;
};

struct TrainConfig {
  SceneConfig scene;
  ModelConfig model;
  int steps = 200;
  std::size_t batch = 2;
  double lr = 0.02;
  double momentum = 0.9;
  double clip = 5.0;
  std::uint64_t seed = 7;
  LossWeights weights;
  FocalConfig focal_fg{2.0, {1.0, 2.0}};
  FocalConfig focal_sem{2.0, {}};
  std::size_t train_scenes = 32;
  std::size_t val_scenes = 8;
  int val_every = 50;           // 0 = only after the last step
  double eval_alpha = 0.25;
  bool timing = false;          // ablation tables gain a wall-clock column

  void check() const;
};

/// Foreground focal loss per stage (mean over stages), semantic focal loss on
/// the sampled rows per stage (mean over stages), and the head losses.
LossTerms compute_losses(const ForwardResult& fr, const PreparedScene& s,
                         const TrainConfig& cfg);

// ---- metrics -----------------------------------------------------------------

/// Recall and precision of the top ceil(alpha N) scores against labels.
std::pair<double, double> recall_precision_at(const std::vector<double>& scores,
                                              const std::vector<int>& labels, double alpha);

/// Non-interpolated average precision of `scores` for binary `labels`;
/// ties broken by index. 0 without positives.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct ValMetrics {
  double fg_recall = 0;     // stage 1, at eval_alpha
  double fg_precision = 0;  // stage 1, at eval_alpha
  double sampled_precision = 0;  // share of foreground in the encoded set, stage 1
  double sem_accuracy = 0;  // sampled foreground rows, stage 1
  double ap = 0;            // bird's-eye-view objectness
  double loss = 0;
};

/// Evaluates on prepared scenes. `noise` > 0 replaces that share of every
/// stage's sampled foreground with background rows (inference only).
ValMetrics evaluate(const Model& m, const std::vector<PreparedScene>& scenes,
                    const TrainConfig& cfg, double noise = 0.0,
                    std::uint64_t noise_seed = 0);

/// Replaces floor(ratio * k) uniformly chosen entries of `fg` with distinct
/// entries of `bg`. For a fixed seed the replaced sets are nested in ratio.
Index inject_foreground_noise(const Index& fg, const Index& bg, double ratio,
                              std::uint64_t seed);

// ---- training ----------------------------------------------------------------

struct StepLog {
  int step = 0;
  double total = 0, f = 0, s = 0, cls = 0, reg = 0;
};

struct ValLog {
  int step = 0;
  ValMetrics m;
};

struct TrainResult {
  ParamStore store;
  Model model;
  std::vector<StepLog> steps;
  std::vector<ValLog> val;
  ValMetrics untrained;  // validation before the first step
  double seconds = 0;
};

std::vector<PreparedScene> make_scenes(const TrainConfig& cfg, std::size_t count,
                                       std::uint64_t stream);

TrainResult train(const TrainConfig& cfg);

void write_step_log(std::ostream& os, const std::vector<StepLog>& log);

// ---- ablations ---------------------------------------------------------------

enum class AblationKind { alpha, scan, kernel, iterations, noise };

AblationKind parse_ablation(const std::string& name);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;  // first column when it is not numeric

  void write_csv(std::ostream& os) const;
};

/// `window` consecutive true-foreground rows of a scene in the stage-1 scan
/// order at angle 0, placed where the class changes most often (earliest on
/// ties), with stem features.
struct FgWindow {
  Tensor x;
  std::vector<Cell> coords;
  std::vector<int> classes;
};
FgWindow interleaved_window(const Model& m, const PreparedScene& s, std::size_t window = 48);

/// Sum over channels of |M| (plain scan) or |M'| (with SAF) for the stage-1
/// block on a window, as a row-major window x window map.
std::vector<double> window_association(const Model& m, const FgWindow& w, bool with_saf);

/// Sum over channels of |M'| for the stage-1 block on the most interleaved
/// window of true foreground rows, scored against the Gaussian distance
/// label. Averaged over scenes.
double kernel_similarity(const Model& m, const std::vector<PreparedScene>& scenes,
                         std::size_t window = 48);

/// Trains and evaluates once per value with the same seed (the noise sweep
/// trains once and corrupts only evaluation). Values for `scan` are scheme
/// names; for the others numbers.
Table run_ablation(AblationKind kind, const std::vector<std::string>& values,
                   const TrainConfig& base);

}  // namespace fms
