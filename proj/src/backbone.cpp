#include "fms/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <unordered_map>

namespace fms {

void StageConfig::check() const {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ContractError("stage: alpha " + std::to_string(alpha) + " not in (0, 1]");
  if (angles.empty()) throw ContractError("stage: at least one rotation angle");
  if (t < 1) throw ContractError("stage: t must be >= 1");
  if (block.d == 0 || block.s == 0) throw ContractError("stage: zero width");
  if (block.classes < 2) throw ContractError("stage: need >= 2 classes");
  if (block.saf_taps < 1 || block.saf_taps % 2 == 0)
    throw ContractError("stage: saf taps must be odd");
  if (block.ssf_kernel < 1 || block.ssf_kernel % 2 == 0)
    throw ContractError("stage: ssf kernel must be odd");
  if (stride < 1) throw ContractError("stage: stride must be >= 1");
}

std::size_t sample_count(std::size_t n, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw ContractError("sample: alpha " + std::to_string(alpha) + " not in (0, 1]");
  if (n == 0) return 0;
  // The small slack keeps exact products such as 0.2 * 1000 from rounding up.
  const auto k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

std::size_t patch_count(std::size_t k, const StageConfig& cfg) {
  if (cfg.m > 0) return cfg.m;
  return std::max<std::size_t>(1, (k + 63) / 64);
}

StageParams StageParams::make(ParamStore& store, const std::string& name, Rng& rng,
                              const StageConfig& cfg) {
  cfg.check();
  const std::size_t d = cfg.d();
  StageParams p;
  p.scorer = Mlp::make(store, name + ".scorer", rng, 2 * d, cfg.scorer_hidden, 1);
  p.pe = Linear::zeros(store, name + ".pe", 3, d);
  p.update = Linear::zeros(store, name + ".update", 2 * d, d);
  p.block = SasfBlock::make(store, name + ".block", rng, cfg.block);
  p.token = store.add(name + ".token", Tensor::param({1, d}, std::vector<double>(d, 0.0)));
  p.merge_main = Linear::zeros(store, name + ".merge_main", d, d);
  const double inv_r = 1.0 / static_cast<double>(cfg.angles.size());
  auto w = p.merge_main.weight.mutable_data();
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = inv_r;
  p.merge_extra = Mlp::make(store, name + ".merge", rng, d, cfg.merge_hidden, d);
  for (double& v : p.merge_extra.second.weight.mutable_data()) v = 0.0;
  p.down = Linear::zeros(store, name + ".down", d, d);
  auto dw = p.down.weight.mutable_data();
  for (std::size_t i = 0; i < d; ++i) dw[i * d + i] = 1.0;
  return p;
}

namespace {

struct CellHash {
  std::size_t operator()(const Cell& c) const {
    std::uint64_t h = 1469598103934665603ull;
    for (auto v : c) h = (h ^ static_cast<std::uint64_t>(v)) * 1099511628211ull;
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

NeighborTable face_neighbors(const std::vector<Cell>& coords) {
  const std::size_t n = coords.size();
  std::unordered_map<Cell, std::int64_t, CellHash> where;
  where.reserve(n * 2);
  for (std::size_t i = 0; i < n; ++i) where.emplace(coords[i], static_cast<std::int64_t>(i));
  auto table = std::make_shared<TapTable>(6, Index(n, -1));
  std::vector<double> inv(n, 0.0);
  static constexpr int kDirs[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                                      {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  for (std::size_t i = 0; i < n; ++i) {
    int count = 0;
    for (int t = 0; t < 6; ++t) {
      Cell c{coords[i][0] + kDirs[t][0], coords[i][1] + kDirs[t][1],
             coords[i][2] + kDirs[t][2]};
      auto it = where.find(c);
      if (it != where.end()) {
        (*table)[t][i] = it->second;
        ++count;
      }
    }
    inv[i] = count > 0 ? 1.0 / count : 0.0;
  }
  return {table, Tensor::from({n, 1}, std::move(inv))};
}

Tensor neighbor_mean(const Tensor& x, const NeighborTable& nb) {
  const std::size_t d = x.cols();
  Tensor summed = neighbor_conv(x, Tensor::full({6, d}, 1.0), nb.taps);
  return mul(summed, repeat_cols(nb.inv_count, d));
}

Tensor score_foreground(const VoxelSet& vox, const Mlp& scorer, const NeighborTable* nb) {
  if (vox.size() == 0) return Tensor::zeros({0, 1});
  NeighborTable local;
  if (nb == nullptr) {
    local = face_neighbors(vox.coords);
    nb = &local;
  }
  Tensor ctx = concat({vox.feats, neighbor_mean(vox.feats, *nb)}, 1);
  return sigmoid(scorer(ctx));
}

TopK sample_topk(const std::vector<double>& scores, double alpha) {
  const std::size_t n = scores.size();
  const std::size_t k = sample_count(n, alpha);
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  TopK out;
  out.fg.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<char> taken(n, 0);
  for (auto i : out.fg) taken[static_cast<std::size_t>(i)] = 1;
  for (std::size_t i = 0; i < n; ++i)
    if (!taken[i]) out.bg.push_back(static_cast<std::int64_t>(i));
  return out;
}

const CurveTemplate& TemplateCache::get(Scheme scheme, int order) {
  std::lock_guard<std::mutex> lock(mu_);
  auto& slot = cache_[{static_cast<int>(scheme), order}];
  if (!slot) slot = std::make_unique<CurveTemplate>(build_template(scheme, order));
  return *slot;
}

TemplateCache& default_templates() {
  static TemplateCache cache;
  return cache;
}

namespace {

Tensor normalized_centers(const VoxelSet& vox) {
  const std::size_t n = vox.size();
  std::vector<double> v(n * 3);
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a)
      v[i * 3 + a] = (static_cast<double>(vox.coords[i][a]) + 0.5) /
                     static_cast<double>(vox.grid.resolution[a]);
  return Tensor::from({n, 3}, std::move(v));
}

Index complement(const Index& fg, std::size_t n) {
  std::vector<char> taken(n, 0);
  for (auto i : fg) {
    if (i < 0 || static_cast<std::size_t>(i) >= n || taken[static_cast<std::size_t>(i)])
      throw ContractError("stage: foreground indices must be distinct rows");
    taken[static_cast<std::size_t>(i)] = 1;
  }
  Index bg;
  for (std::size_t i = 0; i < n; ++i)
    if (!taken[i]) bg.push_back(static_cast<std::int64_t>(i));
  return bg;
}

}  // namespace

StageResult encode_stage(const VoxelSet& vox, const StageConfig& cfg,
                         const StageParams& params, const StageHooks& hooks,
                         TemplateCache* templates) {
  cfg.check();
  if (templates == nullptr) templates = &default_templates();
  const std::size_t n = vox.size();
  const std::size_t d = cfg.d();
  StageResult res;
  if (n == 0) {
    res.out = vox;
    res.scores = Tensor::zeros({0, 1});
    res.semantic = Tensor::zeros({0, cfg.block.classes});
    return res;
  }
  if (vox.dim() != d)
    throw ContractError("stage: features have width " + std::to_string(vox.dim()) +
                        ", stage expects " + std::to_string(d));

  const auto nb = face_neighbors(vox.coords);
  res.scores = score_foreground(vox, params.scorer, &nb);
  Tensor z = add(vox.feats, params.pe(normalized_centers(vox)));
  Tensor u = add(z, params.update(concat({z, neighbor_mean(z, nb)}, 1)));

  std::vector<double> s(res.scores.data().begin(), res.scores.data().end());
  res.split = sample_topk(s, cfg.alpha);
  if (hooks.select) {
    res.split.fg = hooks.select(res.split.fg, res.split.bg);
    res.split.bg = complement(res.split.fg, n);
  }
  const Index& fg = res.split.fg;
  const Index& bg = res.split.bg;
  const std::size_t k = fg.size();

  Tensor fg_rows = gather(u, 0, fg);
  std::vector<Cell> fg_coords(k);
  for (std::size_t i = 0; i < k; ++i) fg_coords[i] = vox.coords[static_cast<std::size_t>(fg[i])];
  res.semantic = params.block.semantic_logits(fg_rows);

  SeqEncoder enc = hooks.encoder;
  if (!enc) {
    const SasfBlock* block = &params.block;
    enc = [block](const Tensor& x, const SeqLayout& l) { return add(x, (*block)(x, l)); };
  }
  const RgswConfig rcfg{patch_count(k, cfg), cfg.t, cfg.propagate_every};

  Tensor summed;
  for (double theta : cfg.angles) {
    const auto frame = rotation_frame(vox.grid.resolution, theta);
    const auto& tmpl = templates->get(cfg.scheme, frame.order);
    const Index order = serialize_order(fg_coords, tmpl, frame);
    std::vector<Cell> seq_coords(k);
    for (std::size_t i = 0; i < k; ++i) seq_coords[i] = fg_coords[static_cast<std::size_t>(order[i])];
    Tensor encoded = rgsw_encode(gather(fg_rows, 0, order), enc, params.token, rcfg, seq_coords);
    Tensor back = scatter_add(encoded, 0, order, k);
    summed = summed.defined() ? add(summed, back) : back;
  }
  Tensor merged = add(params.merge_main(summed), params.merge_extra(summed));

  res.out.coords = vox.coords;
  res.out.grid = vox.grid;
  res.out.feats = add(scatter_add(merged, 0, fg, n),
                      scatter_add(gather(u, 0, bg), 0, bg, n));
  return res;
}

BackboneResult run_backbone(const VoxelSet& vox, const std::vector<StageConfig>& stages,
                            const std::vector<StageParams>& params,
                            const StageHooks& hooks, TemplateCache* templates) {
  if (stages.empty()) throw ContractError("backbone: at least one stage");
  if (params.size() != stages.size())
    throw ContractError("backbone: " + std::to_string(params.size()) +
                        " parameter sets for " + std::to_string(stages.size()) + " stages");
  BackboneResult res;
  VoxelSet cur = vox;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    res.stage_coords.push_back(cur.coords);
    res.stage_grids.push_back(cur.grid);
    auto sr = encode_stage(cur, stages[i], params[i], hooks, templates);
    cur = sr.out;
    if (stages[i].stride > 1) cur = downsample(cur, stages[i].stride, &params[i].down);
    res.stages.push_back(std::move(sr));
  }
  res.out = std::move(cur);
  return res;
}

double FlopsReport::encoder_total() const {
  return std::accumulate(encoder.begin(), encoder.end(), 0.0);
}

double FlopsReport::total() const {
  return scoring + embed + flatten + encoder_total() + merge + downsample;
}

void FlopsReport::write_csv(std::ostream& os) const {
  os << "component,flops\n";
  os << "scoring," << scoring << "\n";
  os << "embed," << embed << "\n";
  os << "flatten," << flatten << "\n";
  for (std::size_t r = 0; r < encoder.size(); ++r)
    os << "encoder_rot" << r << "," << encoder[r] << "\n";
  os << "merge," << merge << "\n";
  os << "downsample," << downsample << "\n";
  os << "total," << total() << "\n";
}

double block_row_flops(const BlockConfig& b) {
  const double d = static_cast<double>(b.d);
  const double s = static_cast<double>(b.s);
  const double w = d * s;
  const double h = static_cast<double>(b.head_hidden);
  const double c = static_cast<double>(b.classes);
  double f = 0;
  f += d * d + d;            // delta projection
  f += 2 * d * s + s;        // B and C projections
  f += 3 * w;                // discretization
  f += 3 * w;                // recurrence and input product
  f += w;                    // observation
  f += d * h + h + h * c + c;  // semantic head
  if (b.use_saf) f += b.saf_taps * w;
  if (b.use_ssf) f += 3.0 * b.ssf_kernel * w;
  if (b.use_gate) f += d * d + 2 * d;
  return f;
}

namespace {

double rgsw_rows(std::size_t k, std::size_t m, int t) {
  if (k == 0) return 0;
  const auto p = PatchLayout::make(k, m, t >= 2);
  double rows = 0;
  for (int it = 1; it <= t; ++it) {
    const std::size_t windows = it % 2 == 0 ? m - 1 : m;
    rows += static_cast<double>(windows * (p.len + 1));
  }
  return rows;
}

}  // namespace

FlopsReport count_flops(const VoxelSet& vox, const std::vector<StageConfig>& stages) {
  FlopsReport rep;
  std::vector<Cell> coords = vox.coords;
  Grid grid = vox.grid;
  std::size_t max_rot = 0;
  for (const auto& st : stages) max_rot = std::max(max_rot, st.angles.size());
  rep.encoder.assign(max_rot, 0.0);
  for (const auto& st : stages) {
    st.check();
    const double n = static_cast<double>(coords.size());
    const double d = static_cast<double>(st.d());
    const double hs = static_cast<double>(st.scorer_hidden);
    const double hm = static_cast<double>(st.merge_hidden);
    const std::size_t k = sample_count(coords.size(), st.alpha);
    const double kd = static_cast<double>(k);
    const double r = static_cast<double>(st.angles.size());
    rep.scoring += n * (6 * d + 2 * d * hs + hs + hs + 1);
    rep.embed += n * (3 * d + d + 6 * d + 2 * d * d + d + d);
    const double per_row = block_row_flops(st.block) + 4 * d;  // residual, propagation
    const double enc = rgsw_rows(k, patch_count(k, st), st.t) * per_row;
    for (std::size_t i = 0; i < st.angles.size(); ++i) rep.encoder[i] += enc;
    rep.merge += kd * ((r - 1) * d + d * d + d * hm + hm + hm * d + d + d);
    if (st.stride > 1 && !coords.empty()) {
      auto map = downsample_map(coords, grid, st.stride);
      rep.downsample += n * d + static_cast<double>(map.coords.size()) * (d * d + d);
      coords = std::move(map.coords);
      grid = map.grid;
    }
  }
  return rep;
}

FlopsReport count_flops(const VoxelSet& vox, const StageConfig& stage) {
  return count_flops(vox, std::vector<StageConfig>{stage});
}

}  // namespace fms
