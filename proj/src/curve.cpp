#include "fms/curve.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace fms {

namespace {

constexpr std::array<char, 4> kTemplateMagic{'F', 'M', 'C', 'T'};

std::string cell_str(const Cell& c) {
  return "(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
         std::to_string(c[2]) + ")";
}

void check_order(int order) {
  if (order < kMinOrder || order > kMaxOrder)
    throw ContractError("curve order must be in [1,6], got " +
                        std::to_string(order));
}

// Skilling's transpose form of the Hilbert index ("Programming the Hilbert
// curve", AIP Conf. Proc. 707, 2004), specialized to three axes.
std::uint32_t hilbert_rank(int order, std::uint32_t x, std::uint32_t y,
                           std::uint32_t z) {
  std::array<std::uint32_t, 3> v{x, y, z};
  const std::uint32_t top = 1u << (order - 1);
  for (std::uint32_t q = top; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 0; i < 3; ++i) {
      if (v[i] & q) {
        v[0] ^= p;
      } else {
        const std::uint32_t t = (v[0] ^ v[i]) & p;
        v[0] ^= t;
        v[i] ^= t;
      }
    }
  }
  for (int i = 1; i < 3; ++i) v[i] ^= v[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t q = top; q > 1; q >>= 1)
    if (v[2] & q) t ^= q - 1;
  for (auto& c : v) c ^= t;
  std::uint32_t rank = 0;
  for (int b = order - 1; b >= 0; --b)
    for (int i = 0; i < 3; ++i) rank = (rank << 1) | ((v[i] >> b) & 1u);
  return rank;
}

std::uint32_t zorder_rank(int order, std::uint32_t x, std::uint32_t y,
                          std::uint32_t z) {
  std::uint32_t rank = 0;
  for (int b = 0; b < order; ++b) {
    rank |= ((x >> b) & 1u) << (3 * b);
    rank |= ((y >> b) & 1u) << (3 * b + 1);
    rank |= ((z >> b) & 1u) << (3 * b + 2);
  }
  return rank;
}

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) <= 1e-9 ? r : v;
}

}  // namespace

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::hilbert: return "hilbert";
    case Scheme::zorder: return "zorder";
    case Scheme::raster_x: return "raster_x";
    case Scheme::raster_y: return "raster_y";
  }
  return "unknown";
}

Scheme parse_scheme(const std::string& name) {
  std::string key = name;
  for (char& c : key)
    if (c == '-') c = '_';
  for (auto s : {Scheme::hilbert, Scheme::zorder, Scheme::raster_x, Scheme::raster_y})
    if (scheme_name(s) == key) return s;
  throw std::invalid_argument("unknown curve scheme '" + name +
                              "' (hilbert, zorder, raster-x, raster-y)");
}

bool CurveTemplate::contains(const Cell& c) const {
  const auto n = side();
  return c[0] >= 0 && c[0] < n && c[1] >= 0 && c[1] < n && c[2] >= 0 && c[2] < n;
}

std::uint32_t CurveTemplate::rank_of(const Cell& c) const {
  if (!contains(c))
    throw ContractError("cell " + cell_str(c) + " outside " +
                        scheme_name(scheme) + " template of order " +
                        std::to_string(order));
  const auto n = side();
  return ranks[static_cast<std::size_t>(c[0] + n * c[1] + n * n * c[2])];
}

std::vector<Cell> CurveTemplate::cells_by_rank() const {
  const auto n = side();
  std::vector<Cell> out(ranks.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const auto idx = static_cast<std::int64_t>(i);
    out[ranks[i]] = {idx % n, (idx / n) % n, idx / (n * n)};
  }
  return out;
}

std::uint32_t curve_rank(Scheme scheme, int order, const Cell& c) {
  check_order(order);
  const auto n = std::int64_t{1} << order;
  for (auto v : c)
    if (v < 0 || v >= n)
      throw ContractError("cell " + cell_str(c) + " outside order " +
                          std::to_string(order));
  const auto x = static_cast<std::uint32_t>(c[0]);
  const auto y = static_cast<std::uint32_t>(c[1]);
  const auto z = static_cast<std::uint32_t>(c[2]);
  const auto un = static_cast<std::uint32_t>(n);
  switch (scheme) {
    case Scheme::hilbert: return hilbert_rank(order, x, y, z);
    case Scheme::zorder: return zorder_rank(order, x, y, z);
    case Scheme::raster_x: return x + un * y + un * un * z;
    case Scheme::raster_y: return y + un * x + un * un * z;
  }
  throw ContractError("unknown scheme");
}

CurveTemplate build_template(Scheme scheme, int order) {
  check_order(order);
  CurveTemplate t;
  t.scheme = scheme;
  t.order = order;
  const auto n = t.side();
  t.ranks.resize(static_cast<std::size_t>(n * n * n));
  for (std::int64_t z = 0; z < n; ++z)
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x)
        t.ranks[static_cast<std::size_t>(x + n * y + n * n * z)] =
            curve_rank(scheme, order, {x, y, z});
  return t;
}

void save_template(std::ostream& os, const CurveTemplate& t) {
  os.write(kTemplateMagic.data(), kTemplateMagic.size());
  os.put(static_cast<char>(t.scheme));
  os.put(static_cast<char>(t.order));
  for (auto r : t.ranks)
    for (int b = 0; b < 4; ++b) os.put(static_cast<char>((r >> (8 * b)) & 0xff));
}

CurveTemplate load_template(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kTemplateMagic)
    throw std::runtime_error("template: bad magic");
  const int scheme = is.get();
  const int order = is.get();
  if (!is || scheme < 0 || scheme > 3)
    throw std::runtime_error("template: bad scheme byte");
  if (order < kMinOrder || order > kMaxOrder)
    throw std::runtime_error("template: order " + std::to_string(order) +
                             " out of range");
  CurveTemplate t;
  t.scheme = static_cast<Scheme>(scheme);
  t.order = order;
  const auto n = t.side();
  t.ranks.resize(static_cast<std::size_t>(n * n * n));
  std::vector<char> seen(t.ranks.size(), 0);
  for (auto& r : t.ranks) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (!is) throw std::runtime_error("template: truncated rank table");
    r = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    if (r >= t.ranks.size() || seen[r])
      throw std::runtime_error("template: rank table is not a bijection");
    seen[r] = 1;
  }
  return t;
}

void write_template_csv(std::ostream& os, const CurveTemplate& t) {
  const auto n = t.side();
  os << "x,y,z,rank\n";
  for (std::int64_t z = 0; z < n; ++z)
    for (std::int64_t y = 0; y < n; ++y)
      for (std::int64_t x = 0; x < n; ++x)
        os << x << ',' << y << ',' << z << ','
           << t.ranks[static_cast<std::size_t>(x + n * y + n * n * z)] << '\n';
}

Cell rotate_coords(const Cell& p, double theta) {
  if (theta == 0.0) return p;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const auto x = static_cast<double>(p[0]);
  const auto y = static_cast<double>(p[1]);
  return {static_cast<std::int64_t>(std::floor(snap(x * c + y * s))),
          static_cast<std::int64_t>(std::floor(snap(y * c - x * s))), p[2]};
}

RotationFrame rotation_frame(const Cell& extent, double theta) {
  for (auto e : extent)
    if (e <= 0) throw ContractError("rotation frame: extent must be positive");
  RotationFrame f;
  f.theta = theta;
  // floor is monotone, so the rotated grid's bounds sit at rotated corners.
  Cell lo{0, 0, 0};
  Cell hi{0, 0, extent[2] - 1};
  bool first = true;
  for (std::int64_t cx : {std::int64_t{0}, extent[0] - 1})
    for (std::int64_t cy : {std::int64_t{0}, extent[1] - 1}) {
      const Cell r = rotate_coords({cx, cy, 0}, theta);
      for (int a = 0; a < 2; ++a) {
        lo[a] = first ? r[a] : std::min(lo[a], r[a]);
        hi[a] = first ? r[a] : std::max(hi[a], r[a]);
      }
      first = false;
    }
  std::int64_t need = 1;
  for (int a = 0; a < 3; ++a) {
    f.shift[a] = -lo[a];
    need = std::max({need, hi[a] - lo[a] + 1, extent[a]});
  }
  int order = kMinOrder;
  while ((std::int64_t{1} << order) < need) ++order;
  if (order > kMaxOrder)
    throw ContractError("rotation frame: extent " + cell_str(extent) +
                        " at theta " + std::to_string(theta) +
                        " needs curve order " + std::to_string(order) +
                        ", above the maximum 6");
  f.order = order;
  return f;
}

Index serialize_order(const std::vector<Cell>& coords, const CurveTemplate& tmpl,
                      const RotationFrame& frame) {
  struct Key {
    std::uint32_t rotated;
    std::uint32_t base;
    std::int64_t index;
  };
  std::vector<Key> keys(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    Cell r = rotate_coords(coords[i], frame.theta);
    for (int a = 0; a < 3; ++a) r[a] += frame.shift[a];
    if (!tmpl.contains(r))
      throw ContractError("flatten: voxel " + cell_str(coords[i]) +
                          " maps to " + cell_str(r) +
                          " outside the template of order " +
                          std::to_string(tmpl.order));
    keys[i] = {tmpl.rank_of(r), tmpl.rank_of(coords[i]),
               static_cast<std::int64_t>(i)};
  }
  std::sort(keys.begin(), keys.end(), [](const Key& a, const Key& b) {
    if (a.rotated != b.rotated) return a.rotated < b.rotated;
    if (a.base != b.base) return a.base < b.base;
    return a.index < b.index;
  });
  Index perm(coords.size());
  for (std::size_t k = 0; k < keys.size(); ++k) perm[k] = keys[k].index;
  return perm;
}

Flattened flatten(const Tensor& feats, const std::vector<Cell>& coords,
                  const CurveTemplate& tmpl, const RotationFrame& frame) {
  if (feats.rows() != coords.size())
    throw ContractError("flatten: feats " + shape_str(feats.shape()) + " but " +
                        std::to_string(coords.size()) + " coords");
  Flattened out;
  out.perm = serialize_order(coords, tmpl, frame);
  out.seq = gather(feats, 0, out.perm);
  return out;
}

Index invert_perm(const Index& perm) {
  Index inv(perm.size(), -1);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const auto p = perm[k];
    if (p < 0 || static_cast<std::size_t>(p) >= perm.size() ||
        inv[static_cast<std::size_t>(p)] != -1)
      throw ContractError("invert_perm: not a permutation");
    inv[static_cast<std::size_t>(p)] = static_cast<std::int64_t>(k);
  }
  return inv;
}

GapStats truncation_gap(const std::vector<Cell>& coords, Scheme scheme,
                        const std::vector<double>& angles, const Cell& extent) {
  if (coords.size() < 2)
    throw ContractError("truncation_gap: need at least 2 voxels");
  if (angles.empty()) throw ContractError("truncation_gap: no angles");

  std::map<int, CurveTemplate> templates;
  auto positions = [&](double theta) {
    const auto frame = rotation_frame(extent, theta);
    auto it = templates.find(frame.order);
    if (it == templates.end())
      it = templates.emplace(frame.order, build_template(scheme, frame.order)).first;
    return invert_perm(serialize_order(coords, it->second, frame));
  };

  std::map<Cell, std::size_t> where;
  for (std::size_t i = 0; i < coords.size(); ++i) where.emplace(coords[i], i);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      Cell nb = coords[i];
      ++nb[a];
      auto it = where.find(nb);
      if (it != where.end()) pairs.emplace_back(i, it->second);
    }

  GapStats st;
  st.pairs = pairs.size();
  const auto base = positions(0.0);
  std::vector<Index> pos;
  for (double th : angles) pos.push_back(positions(th));
  for (auto [i, j] : pairs) {
    const auto g0 = std::abs(base[i] - base[j]);
    auto gm = std::abs(pos[0][i] - pos[0][j]);
    for (const auto& p : pos) gm = std::min(gm, std::abs(p[i] - p[j]));
    st.gap0.push_back(g0);
    st.min_gap.push_back(gm);
  }
  if (!pairs.empty()) {
    const double n = static_cast<double>(pairs.size());
    st.mean_gap0 = std::accumulate(st.gap0.begin(), st.gap0.end(), 0.0) / n;
    st.mean_min_gap =
        std::accumulate(st.min_gap.begin(), st.min_gap.end(), 0.0) / n;
    st.max_gap0 = static_cast<double>(*std::max_element(st.gap0.begin(), st.gap0.end()));
    st.max_min_gap =
        static_cast<double>(*std::max_element(st.min_gap.begin(), st.min_gap.end()));
  }
  return st;
}

}  // namespace fms
