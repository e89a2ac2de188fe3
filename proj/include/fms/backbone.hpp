#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

#include "fms/curve.hpp"
#include "fms/fusion.hpp"
#include "fms/nn.hpp"
#include "fms/rgsw.hpp"
#include "fms/voxel.hpp"

namespace fms {

struct StageConfig {
  double alpha = 0.2;                          // foreground sampling ratio
  std::vector<double> angles{0.0, 1.5707963267948966};
  std::size_t m = 0;                           // RGSW patches, 0 = auto
  int t = 2;                                   // RGSW iterations
  bool propagate_every = true;
  Scheme scheme = Scheme::hilbert;
  BlockConfig block;                           // block.d is the channel width
  std::size_t scorer_hidden = 32;
  std::size_t merge_hidden = 32;
  int stride = 2;                              // downsample after the stage, 1 = none

  std::size_t d() const { return block.d; }
  /// Throws ContractError when a field is out of range.
  void check() const;
};

/// k = ceil(alpha * n), at least 1 when n > 0.
std::size_t sample_count(std::size_t n, double alpha);
/// Patch count: cfg.m, or one patch per 64 sequence rows when cfg.m is 0.
std::size_t patch_count(std::size_t k, const StageConfig& cfg);

/// Learned parameters of one stage. Rotation branches share the block.
struct StageParams {
  Mlp scorer;        // [x, neighbor mean] -> 1
  Linear pe;         // normalized cell center -> D, zero-initialized
  Linear update;     // [z, neighbor mean of z] -> D, zero-initialized
  SasfBlock block;
  Tensor token;      // 1 x D, zero-initialized
  Linear merge_main; // D -> D, initialized to I / rotations
  Mlp merge_extra;   // second layer zero-initialized
  Linear down;       // D -> D after downsampling, identity-initialized

  static StageParams make(ParamStore& store, const std::string& name, Rng& rng,
                          const StageConfig& cfg);
};

/// Row indices of the face neighbors of every voxel and 1 / count (0 when
/// isolated).
struct NeighborTable {
  std::shared_ptr<const TapTable> taps;  // 6 taps
  Tensor inv_count;                      // N x 1
};

NeighborTable face_neighbors(const std::vector<Cell>& coords);
/// Mean over the face neighbors of each row, zero for isolated rows.
Tensor neighbor_mean(const Tensor& x, const NeighborTable& nb);

/// sigmoid(scorer([x, neighbor mean of x])) -> N x 1.
Tensor score_foreground(const VoxelSet& vox, const Mlp& scorer,
                        const NeighborTable* nb = nullptr);

struct TopK {
  Index fg;  // descending score, ties by ascending index
  Index bg;  // ascending index
};

TopK sample_topk(const std::vector<double>& scores, double alpha);

/// Builds curve templates once per (scheme, order) and shares them.
class TemplateCache {
 public:
  const CurveTemplate& get(Scheme scheme, int order);

 private:
  std::mutex mu_;
  std::map<std::pair<int, int>, std::unique_ptr<CurveTemplate>> cache_;
};

TemplateCache& default_templates();

struct StageHooks {
  /// Replaces the block-based sequence encoder (tests, degeneration checks).
  SeqEncoder encoder;
  /// Rewrites the sampled foreground indices before encoding.
  std::function<Index(const Index& fg, const Index& bg)> select;
};

struct StageResult {
  VoxelSet out;          // same coords as the input, updated feats
  Tensor scores;         // N x 1 foreground scores
  TopK split;            // the indices actually encoded
  Tensor semantic;       // |fg| x classes logits of the block head
};

/// Scores, adds the positional embedding and the local update, samples the
/// top-k, encodes the foreground per rotation with RGSW, merges by sum and
/// MLP, and reattaches the untouched background rows.
StageResult encode_stage(const VoxelSet& vox, const StageConfig& cfg,
                         const StageParams& params, const StageHooks& hooks = {},
                         TemplateCache* templates = nullptr);

struct BackboneResult {
  VoxelSet out;
  std::vector<StageResult> stages;
  std::vector<std::vector<Cell>> stage_coords;  // voxels seen by each stage
  std::vector<Grid> stage_grids;
};

/// Runs the stages in order with a strided downsample after each stage whose
/// stride exceeds 1.
BackboneResult run_backbone(const VoxelSet& vox, const std::vector<StageConfig>& stages,
                            const std::vector<StageParams>& params,
                            const StageHooks& hooks = {},
                            TemplateCache* templates = nullptr);

/// Multiply-add counts per component.
struct FlopsReport {
  double scoring = 0;
  double embed = 0;      // positional embedding and local update
  double flatten = 0;    // pure reordering
  std::vector<double> encoder;  // per rotation, summed over stages
  double merge = 0;
  double downsample = 0;

  double encoder_total() const;
  double total() const;
  /// `component,flops` rows.
  void write_csv(std::ostream& os) const;
};

/// Multiply-adds of one block pass per sequence row.
double block_row_flops(const BlockConfig& b);

/// Closed-form counts from the voxel coordinates alone.
FlopsReport count_flops(const VoxelSet& vox, const std::vector<StageConfig>& stages);
FlopsReport count_flops(const VoxelSet& vox, const StageConfig& stage);

}  // namespace fms
