#include "fms/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

namespace fms {

bool SeqLayout::has_cell(std::size_t i) const {
  if (coords.empty() || !is_active(i)) return false;
  return anchored.empty() || anchored[i] != 0;
}

void SeqLayout::check(std::size_t n) const {
  auto fits = [n](std::size_t sz, const char* what) {
    if (sz != 0 && sz != n)
      throw ContractError(std::string("sequence layout: ") + what + " has " +
                          std::to_string(sz) + " rows, sequence has " +
                          std::to_string(n));
  };
  fits(segment.size(), "segment");
  fits(active.size(), "active");
  fits(coords.size(), "coords");
  fits(anchored.size(), "anchored");
  fits(classes.size(), "classes");
}

StepMask step_mask(const SeqLayout& layout, std::size_t n) {
  layout.check(n);
  StepMask m;
  m.active = layout.active;
  m.reset.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    m.reset[i] = (i == 0 || layout.segment_of(i) != layout.segment_of(i - 1));
  return m;
}

std::vector<int> predict_semantics(const Tensor& logits) {
  const std::size_t n = logits.rows(), c = logits.cols();
  auto v = logits.data();
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (v[i * c + k] > v[i * c + best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Index semantic_order(const std::vector<int>& classes, const SeqLayout& layout) {
  const std::size_t n = classes.size();
  layout.check(n);
  Index perm;
  perm.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (layout.is_active(i)) perm.push_back(static_cast<std::int64_t>(i));
  std::stable_sort(perm.begin(), perm.end(), [&](std::int64_t a, std::int64_t b) {
    const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
    return std::make_pair(layout.segment_of(ua), classes[ua]) <
           std::make_pair(layout.segment_of(ub), classes[ub]);
  });
  return perm;
}

Rearranged semantic_rearrange(const Tensor& h, const std::vector<int>& classes,
                              const SeqLayout& layout) {
  if (classes.size() != h.rows())
    throw ContractError("semantic_rearrange: " + std::to_string(classes.size()) +
                        " classes for " + shape_str(h.shape()));
  Rearranged r;
  r.perm = semantic_order(classes, layout);
  r.sorted = gather(h, 0, r.perm);
  return r;
}

Tensor reverse_rearrange(const Tensor& sorted, const Index& perm, std::size_t n) {
  return scatter_add(sorted, 0, perm, n);
}

Tensor saf_uniform_weights(int taps, std::size_t width) {
  if (taps < 1 || taps % 2 == 0)
    throw ContractError("saf: tap count must be odd and positive, got " +
                        std::to_string(taps));
  return Tensor::param({static_cast<std::size_t>(taps), width},
                       std::vector<double>(static_cast<std::size_t>(taps) * width,
                                           1.0 / taps));
}

namespace {

// Conv segment id per sorted position.
std::vector<int> sorted_segments(const Index& perm, const std::vector<int>& classes,
                                 const SeqLayout& layout, bool per_group) {
  std::vector<int> seg(perm.size(), 0);
  int id = 0;
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const auto i = static_cast<std::size_t>(perm[k]);
    if (k > 0) {
      const auto p = static_cast<std::size_t>(perm[k - 1]);
      const bool split = layout.segment_of(i) != layout.segment_of(p) ||
                         (per_group && classes[i] != classes[p]);
      if (split) ++id;
    }
    seg[k] = id;
  }
  return seg;
}

}  // namespace

Tensor saf(const Tensor& h, const std::vector<int>& classes, const Tensor& w,
           const SeqLayout& layout, bool per_group) {
  auto r = semantic_rearrange(h, classes, layout);
  if (r.perm.empty()) return scale(h, 0.0);
  auto seg = sorted_segments(r.perm, classes, layout, per_group);
  return reverse_rearrange(conv1d(r.sorted, w, seg), r.perm, h.rows());
}

TapTable saf_neighbors(const std::vector<int>& classes, int taps,
                       const SeqLayout& layout, bool per_group) {
  const std::size_t n = classes.size();
  auto perm = semantic_order(classes, layout);
  auto seg = sorted_segments(perm, classes, layout, per_group);
  auto local = conv1d_table(perm.size(), static_cast<std::size_t>(taps), seg);
  TapTable out(local.size(), Index(n, -1));
  for (std::size_t t = 0; t < local.size(); ++t)
    for (std::size_t k = 0; k < perm.size(); ++k)
      if (local[t][k] >= 0)
        out[t][static_cast<std::size_t>(perm[k])] =
            perm[static_cast<std::size_t>(local[t][k])];
  return out;
}

std::vector<double> saf_association(const SsmSteps& steps,
                                    const std::vector<int>& classes,
                                    const Tensor& w, std::size_t channel,
                                    const SeqLayout& layout, bool per_group) {
  const std::size_t n = steps.length();
  const std::size_t s = steps.s;
  const std::size_t width = steps.d * s;
  if (classes.size() != n)
    throw ContractError("saf_association: class list length mismatch");
  if (w.cols() != width)
    throw ContractError("saf_association: weights " + shape_str(w.shape()) +
                        " for state width " + std::to_string(width));
  auto table = saf_neighbors(classes, static_cast<int>(w.rows()), layout, per_group);
  auto a = steps.a_bar.data();
  auto b = steps.b_bar.data();
  auto c = steps.c.data();
  auto wv = w.data();
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < table.size(); ++t) {
      if (table[t][i] < 0) continue;
      const auto nb = static_cast<std::size_t>(table[t][i]);
      for (std::size_t k = 0; k < s; ++k) {
        const std::size_t col = channel * s + k;
        const double ck = c[i * s + k] * wv[t * width + col];
        double prod = 1.0;  // prod_{q=j+1..nb} a_q, built from j = nb downwards
        for (std::size_t j = nb + 1; j-- > 0;) {
          m[i * n + j] += ck * prod * b[j * width + col];
          prod *= a[j * width + col];
        }
      }
    }
  return m;
}

double association_similarity(const std::vector<double>& m,
                              const std::vector<Cell>& coords,
                              const std::vector<int>& classes, double sigma) {
  const std::size_t n = coords.size();
  if (!(sigma > 0.0)) throw ContractError("association_similarity: sigma must be > 0");
  if (m.size() != n * n || classes.size() != n)
    throw ContractError("association_similarity: size mismatch");
  double dot = 0.0, mm = 0.0, ll = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double l = 0.0;
      if (classes[i] == classes[j]) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          const auto diff = static_cast<double>(coords[i][a] - coords[j][a]);
          d2 += diff * diff;
        }
        l = std::exp(-d2 / (2 * sigma * sigma));
      }
      const double v = std::abs(m[i * n + j]);
      dot += v * l;
      mm += v * v;
      ll += l * l;
    }
  if (mm == 0.0 || ll == 0.0) return 0.0;
  return dot / std::sqrt(mm * ll);
}

SsfTables ssf_tables(const SeqLayout& layout, std::size_t n, int kernel) {
  layout.check(n);
  if (kernel < 1 || kernel % 2 == 0)
    throw ContractError("ssf: kernel must be odd and positive, got " +
                        std::to_string(kernel));
  std::map<std::pair<int, Cell>, std::int64_t> where;
  for (std::size_t i = 0; i < n; ++i) {
    if (!layout.has_cell(i)) continue;
    auto [it, fresh] = where.emplace(std::make_pair(layout.segment_of(i), layout.coords[i]),
                                     static_cast<std::int64_t>(i));
    if (!fresh) {
      const auto& c = layout.coords[i];
      throw ContractError("ssf: duplicate cell (" + std::to_string(c[0]) + "," +
                          std::to_string(c[1]) + "," + std::to_string(c[2]) +
                          ") at rows " + std::to_string(it->second) + " and " +
                          std::to_string(i));
    }
  }
  const int half = kernel / 2;
  SsfTables t;
  t.kernel = kernel;
  for (int axis = 0; axis < 3; ++axis) {
    auto table = std::make_shared<TapTable>(static_cast<std::size_t>(kernel), Index(n, -1));
    for (std::size_t i = 0; i < n; ++i) {
      if (!layout.has_cell(i)) {
        (*table)[static_cast<std::size_t>(half)][i] = static_cast<std::int64_t>(i);
        continue;
      }
      for (int k = 0; k < kernel; ++k) {
        Cell c = layout.coords[i];
        c[axis] += k - half;
        auto it = where.find({layout.segment_of(i), c});
        if (it != where.end()) (*table)[static_cast<std::size_t>(k)][i] = it->second;
      }
    }
    t.axis[static_cast<std::size_t>(axis)] = std::move(table);
  }
  return t;
}

Tensor ssf_identity_weights(int kernel, std::size_t width) {
  std::vector<double> v(static_cast<std::size_t>(kernel) * width, 0.0);
  const auto center = static_cast<std::size_t>(kernel / 2);
  for (std::size_t k = 0; k < width; ++k) v[center * width + k] = 1.0;
  return Tensor::param({static_cast<std::size_t>(kernel), width}, std::move(v));
}

Tensor ssf(const Tensor& h, const std::array<Tensor, 3>& w, const SsfTables& tables) {
  Tensor out = h;
  for (std::size_t axis = 0; axis < 3; ++axis)
    out = neighbor_conv(out, w[axis], tables.axis[axis]);
  return out;
}

SasfBlock SasfBlock::make(ParamStore& store, const std::string& name, Rng& rng,
                          const BlockConfig& cfg) {
  SasfBlock b;
  b.cfg = cfg;
  const std::size_t width = cfg.d * cfg.s;
  b.ssm = SsmParams::make(store, name + ".ssm", rng, cfg.d, cfg.s);
  b.head = Mlp::make(store, name + ".head", rng, cfg.d, cfg.head_hidden, cfg.classes);
  b.saf_w = store.add(name + ".saf", saf_uniform_weights(cfg.saf_taps, width));
  const char* axes[] = {"x", "y", "z"};
  for (std::size_t a = 0; a < 3; ++a)
    b.ssf_w[a] = store.add(name + ".ssf." + axes[a],
                           ssf_identity_weights(cfg.ssf_kernel, width));
  b.gate = Linear::make(store, name + ".gate", rng, cfg.d, cfg.d);
  return b;
}

Tensor SasfBlock::semantic_logits(const Tensor& x) const { return head(x); }

Tensor SasfBlock::operator()(const Tensor& x, const SeqLayout& layout) const {
  const std::size_t n = x.rows();
  layout.check(n);
  if (n == 0) return x;
  auto steps = discretize(ssm, x, step_mask(layout, n));
  Tensor h = scan_states(x, steps);
  if (cfg.use_saf) {
    const auto classes =
        layout.classes.empty() ? predict_semantics(semantic_logits(x)) : layout.classes;
    h = saf(h, classes, saf_w, layout, cfg.saf_per_group);
  }
  if (cfg.use_ssf && !layout.coords.empty())
    h = ssf(h, ssf_w, ssf_tables(layout, n, cfg.ssf_kernel));
  Tensor y = observe(h, steps);
  if (cfg.use_gate) y = mul(y, sigmoid(gate(x)));
  return y;
}

}  // namespace fms
