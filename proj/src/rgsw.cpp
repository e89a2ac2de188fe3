#include "fms/rgsw.hpp"

#include "fms/nn.hpp"

namespace fms {

PatchLayout PatchLayout::make(std::size_t n, std::size_t m, bool even_len) {
  if (m < 1) throw ContractError("rgsw: patch count must be >= 1");
  PatchLayout p;
  p.n = n;
  p.m = m;
  const std::size_t unit = even_len ? 2 * m : m;
  p.padded = std::max(unit, (n + unit - 1) / unit * unit);
  p.len = p.padded / m;
  return p;
}

WindowSeq make_windows(const Tensor& x, const std::vector<std::size_t>& starts,
                       std::size_t len, std::size_t padded, const Tensor& token,
                       const std::vector<Cell>& coords) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (token.numel() != d)
    throw ContractError("rgsw: token " + shape_str(token.shape()) + " for width " +
                        std::to_string(d));
  if (!coords.empty() && coords.size() != n)
    throw ContractError("rgsw: coords length mismatch");
  WindowSeq w;
  w.starts = starts;
  w.len = len;
  // Source rows: x rows, then one zero row for padding, then the token.
  const auto zero_row = static_cast<std::int64_t>(n);
  const auto token_row = zero_row + 1;
  Index idx;
  const std::size_t total = starts.size() * (len + 1);
  idx.reserve(total);
  w.pos.reserve(total);
  w.layout.segment.reserve(total);
  w.layout.active.reserve(total);
  if (!coords.empty()) {
    w.layout.coords.reserve(total);
    w.layout.anchored.reserve(total);
  }
  for (std::size_t k = 0; k < starts.size(); ++k) {
    if (starts[k] + len > padded)
      throw ContractError("rgsw: window exceeds padded length");
    for (std::size_t r = 0; r <= len; ++r) {
      const bool is_token = r == len;
      const std::size_t p = starts[k] + r;
      const bool real = !is_token && p < n;
      idx.push_back(is_token ? token_row : real ? static_cast<std::int64_t>(p) : zero_row);
      w.pos.push_back(is_token ? -1 : static_cast<std::int64_t>(p));
      w.layout.segment.push_back(static_cast<int>(k));
      w.layout.active.push_back(static_cast<char>(is_token || real));
      if (!coords.empty()) {
        w.layout.coords.push_back(real ? coords[p] : Cell{0, 0, 0});
        w.layout.anchored.push_back(static_cast<char>(real));
      }
    }
  }
  Tensor source = concat({x, Tensor::zeros({1, d}), reshape(token, {1, d})}, 0);
  w.rows = gather(source, 0, idx);
  return w;
}

WindowSeq split_and_insert(const Tensor& x, std::size_t m, const Tensor& token,
                           const std::vector<Cell>& coords) {
  auto p = PatchLayout::make(x.rows(), m, false);
  std::vector<std::size_t> starts(m);
  for (std::size_t k = 0; k < m; ++k) starts[k] = k * p.len;
  return make_windows(x, starts, p.len, p.padded, token, coords);
}

Tensor propagate_token(const Tensor& encoded, const WindowSeq& win,
                       std::vector<std::int64_t>* positions) {
  const std::size_t stride = win.len + 1;
  Index real_rows;
  Index token_of;
  for (std::size_t i = 0; i < win.pos.size(); ++i) {
    if (win.pos[i] < 0 || !win.layout.is_active(i)) continue;
    real_rows.push_back(static_cast<std::int64_t>(i));
    token_of.push_back(static_cast<std::int64_t>((i / stride) * stride + win.len));
    if (positions != nullptr) positions->push_back(win.pos[i]);
  }
  Tensor rows = gather(encoded, 0, real_rows);
  Tensor tok = gather(encoded, 0, token_of);
  Tensor sim = repeat_cols(cosine_rows(rows, tok), encoded.cols());
  return add(rows, mul(sim, tok));
}

std::vector<std::size_t> slide_starts(std::size_t m, std::size_t len) {
  if (len % 2 != 0)
    throw ContractError("slide: patch length " + std::to_string(len) +
                        " is odd");
  std::vector<std::size_t> s;
  for (std::size_t k = 0; k + 1 < m; ++k) s.push_back(k * len + len / 2);
  return s;
}

Tensor slide(const Tensor& patches, std::size_t m) {
  if (m < 1 || patches.rows() % m != 0)
    throw ContractError("slide: " + shape_str(patches.shape()) +
                        " does not split into " + std::to_string(m) + " patches");
  const std::size_t len = patches.rows() / m;
  Index idx;
  for (auto s : slide_starts(m, len))
    for (std::size_t r = 0; r < len; ++r) idx.push_back(static_cast<std::int64_t>(s + r));
  return gather(patches, 0, idx);
}

Tensor rgsw_encode(const Tensor& x, const SeqEncoder& enc, const Tensor& token,
                   const RgswConfig& cfg, const std::vector<Cell>& coords) {
  if (cfg.t < 1) throw ContractError("rgsw: t must be >= 1");
  const std::size_t n = x.rows();
  if (n == 0) return x;
  const auto p = PatchLayout::make(n, cfg.m, cfg.t >= 2);
  Tensor cur = x;
  for (int it = 1; it <= cfg.t; ++it) {
    std::vector<std::size_t> starts;
    if (it % 2 == 0) {
      starts = slide_starts(cfg.m, p.len);
    } else {
      for (std::size_t k = 0; k < cfg.m; ++k) starts.push_back(k * p.len);
    }
    if (starts.empty()) continue;  // a single patch has nothing to slide over
    auto win = make_windows(cur, starts, p.len, p.padded, token, coords);
    Tensor encoded = enc(win.rows, win.layout);
    std::vector<std::int64_t> pos;
    Tensor updated;
    if (cfg.propagate_every || it == 1) {
      updated = propagate_token(encoded, win, &pos);
    } else {
      Index real_rows;
      for (std::size_t i = 0; i < win.pos.size(); ++i)
        if (win.pos[i] >= 0 && win.layout.is_active(i)) {
          real_rows.push_back(static_cast<std::int64_t>(i));
          pos.push_back(win.pos[i]);
        }
      updated = gather(encoded, 0, real_rows);
    }
    std::vector<char> covered(n, 0);
    for (auto q : pos) covered[static_cast<std::size_t>(q)] = 1;
    Index keep;
    for (std::size_t i = 0; i < n; ++i)
      if (!covered[i]) keep.push_back(static_cast<std::int64_t>(i));
    Tensor next = scatter_add(updated, 0, pos, n);
    if (!keep.empty()) next = add(next, scatter_add(gather(cur, 0, keep), 0, keep, n));
    cur = next;
  }
  return cur;
}

}  // namespace fms
