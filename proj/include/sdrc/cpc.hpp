#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "sdrc/errors.hpp"
#include "sdrc/tensor.hpp"

// Cross-pattern comparison: mask-average-pooled prototypes per component,
// compared crossly against every query component at every position.

namespace sdrc {

enum class Metric { kCosine, kEuclidean, kDot };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kCosine: return "cosine";
    case Metric::kEuclidean: return "euclidean";
    case Metric::kDot: return "dot";
  }
  return "?";
}

// Majority-vote downsample of a full-resolution binary mask onto the n x n
// token grid; ties break to background.
template <typename T = float>
TensorT<T> downsample_mask(const std::vector<std::uint8_t>& mask, int h, int w, int n) {
  if (static_cast<std::int64_t>(mask.size()) != static_cast<std::int64_t>(h) * w)
    throw ShapeError("downsample_mask: mask length does not match extents");
  if (h % n != 0 || w % n != 0)
    throw ShapeError("downsample_mask: extents not divisible by grid");
  const int ch = h / n, cw = w / n;
  TensorT<T> out({n, n});
  for (int gy = 0; gy < n; ++gy)
    for (int gx = 0; gx < n; ++gx) {
      int fg = 0;
      for (int dy = 0; dy < ch; ++dy)
        for (int dx = 0; dx < cw; ++dx)
          fg += mask[static_cast<std::size_t>(gy * ch + dy) * w + (gx * cw + dx)] ? 1 : 0;
      out.at2(gy, gx) = (2 * fg > ch * cw) ? T(1) : T(0);
    }
  return out;
}

template <typename T>
struct PrototypeSetT {
  std::vector<TensorT<T>> fg;  // one [d x 1] per component
  std::vector<TensorT<T>> bg;
};

using PrototypeSet = PrototypeSetT<float>;

// Mask average pooling over an n x n grid mask (values {0,1}); the mask is
// a constant with respect to differentiation.
template <typename T>
PrototypeSetT<T> map_prototypes(const std::vector<TensorT<T>>& support_components,
                                const TensorT<T>& mask_grid) {
  if (support_components.empty()) throw ShapeError("map_prototypes: empty component list");
  const int n2 = static_cast<int>(mask_grid.size());
  int fg_count = 0;
  for (std::int64_t i = 0; i < mask_grid.size(); ++i) fg_count += mask_grid.at(i) > T(0.5) ? 1 : 0;
  const int bg_count = n2 - fg_count;
  if (fg_count == 0)
    throw DegenerateMaskError(DegenerateMaskError::Side::kForeground,
                              "map_prototypes: mask has no foreground positions");
  if (bg_count == 0)
    throw DegenerateMaskError(DegenerateMaskError::Side::kBackground,
                              "map_prototypes: mask has no background positions");

  TensorT<T> fg_vec({n2, 1}), bg_vec({n2, 1});
  for (int i = 0; i < n2; ++i) {
    const bool is_fg = mask_grid.at(i) > T(0.5);
    fg_vec.at(i) = is_fg ? T(1) : T(0);
    bg_vec.at(i) = is_fg ? T(0) : T(1);
  }
  PrototypeSetT<T> protos;
  for (const TensorT<T>& comp : support_components) {
    if (comp.rank() != 2 || comp.cols() != n2)
      throw ShapeError("map_prototypes: component extents do not match mask grid");
    protos.fg.push_back(scale(matmul(comp, fg_vec), static_cast<T>(1.0 / fg_count)));
    protos.bg.push_back(scale(matmul(comp, bg_vec), static_cast<T>(1.0 / bg_count)));
  }
  return protos;
}

// K-shot aggregation: arithmetic mean of per-shot prototypes per component.
template <typename T>
PrototypeSetT<T> average_prototypes(const std::vector<PrototypeSetT<T>>& shots) {
  if (shots.empty()) throw ContractError("average_prototypes: no shots");
  const std::size_t comps = shots[0].fg.size();
  PrototypeSetT<T> out;
  const T inv = static_cast<T>(1.0 / shots.size());
  for (std::size_t c = 0; c < comps; ++c) {
    TensorT<T> fg = shots[0].fg[c];
    TensorT<T> bg = shots[0].bg[c];
    for (std::size_t s = 1; s < shots.size(); ++s) {
      fg = add(fg, shots[s].fg[c]);
      bg = add(bg, shots[s].bg[c]);
    }
    out.fg.push_back(scale(fg, inv));
    out.bg.push_back(scale(bg, inv));
  }
  return out;
}

// Scalar comparison used by exports and as the brute-force reference for
// the map-level path. Larger is always "more similar": the euclidean
// metric is negated.
template <typename T>
double distance(Metric metric, const TensorT<T>& x, const TensorT<T>& p) {
  if (x.size() != p.size()) throw ShapeError("distance: extents differ");
  switch (metric) {
    case Metric::kDot:
      return dot_flat(x, p);
    case Metric::kEuclidean: {
      double acc = 0.0;
      for (std::int64_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x.at(i)) - static_cast<double>(p.at(i));
        acc += d * d;
      }
      return -std::sqrt(acc);
    }
    case Metric::kCosine: {
      const double nx = frobenius_norm(x);
      const double np = frobenius_norm(p);
      if (nx == 0.0 || np == 0.0)
        throw DegenerateInputError("distance: zero-norm vector under cosine");
      double v = dot_flat(x, p) / (nx * np);
      return std::min(1.0, std::max(-1.0, v));
    }
  }
  throw ContractError("distance: unknown metric");
}

namespace detail {

// Similarity of every column of a component map against one prototype,
// returned as a [1 x N] map on the same tape.
template <typename T>
TensorT<T> score_map(Metric metric, const TensorT<T>& component, const TensorT<T>& proto) {
  switch (metric) {
    case Metric::kDot:
      return matmul(transpose(proto), component);
    case Metric::kEuclidean: {
      TensorT<T> diff = sub_colvec(component, proto);
      return neg(sqrt_t(colsum(mul(diff, diff))));
    }
    case Metric::kCosine: {
      TensorT<T> col_norms = sqrt_t(colsum(mul(component, component)));
      for (std::int64_t i = 0; i < col_norms.size(); ++i)
        if (col_norms.at(i) == T(0))
          throw DegenerateInputError("score_map: zero-norm query column under cosine");
      double pn = frobenius_norm(proto);
      if (pn == 0.0) throw DegenerateInputError("score_map: zero-norm prototype under cosine");
      TensorT<T> proto_norm = sqrt_t(sum(mul(proto, proto)));
      TensorT<T> dots = matmul(transpose(proto), component);
      TensorT<T> cos = mul_scalar_t(mul(dots, recip(col_norms)), recip(proto_norm));
      return clamp(cos, T(-1), T(1));
    }
  }
  throw ContractError("score_map: unknown metric");
}

}  // namespace detail

// The L^2 x 2 x n x n comparison stack. Row-major storage maps pair
// (i, j) -> index i*L + j with i the query component and j the prototype
// component; channel 0 is background, channel 1 foreground.
template <typename T>
struct ScoreStackT {
  TensorT<T> maps;  // dims {L*L, 2, n, n}
  Metric metric = Metric::kCosine;
  int components = 0;  // L
  int grid_n = 0;      // n

  int pair_index(int query_component, int proto_component) const {
    return query_component * components + proto_component;
  }

  // Untracked copy of one n x n score map.
  TensorT<T> map_copy(int query_component, int proto_component, int channel) const {
    const int n2 = grid_n * grid_n;
    const std::int64_t base =
        (static_cast<std::int64_t>(pair_index(query_component, proto_component)) * 2 + channel) *
        n2;
    TensorT<T> out({grid_n, grid_n});
    for (int i = 0; i < n2; ++i) out.at(i) = maps.at(base + i);
    return out;
  }
};

using ScoreStack = ScoreStackT<float>;

template <typename T>
ScoreStackT<T> cross_compare(const std::vector<TensorT<T>>& query_components,
                             const PrototypeSetT<T>& protos, Metric metric) {
  const int layers = static_cast<int>(query_components.size());
  if (layers == 0) throw ShapeError("cross_compare: empty component list");
  if (static_cast<int>(protos.fg.size()) != layers)
    throw ShapeError("cross_compare: component counts differ");
  const int n2 = query_components[0].cols();
  const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n2))));
  if (n * n != n2) throw ShapeError("cross_compare: positions do not form a square grid");

  std::vector<TensorT<T>> rows;
  rows.reserve(static_cast<std::size_t>(layers) * layers * 2);
  for (int i = 0; i < layers; ++i)
    for (int j = 0; j < layers; ++j) {
      rows.push_back(detail::score_map(metric, query_components[static_cast<std::size_t>(i)],
                                       protos.bg[static_cast<std::size_t>(j)]));
      rows.push_back(detail::score_map(metric, query_components[static_cast<std::size_t>(i)],
                                       protos.fg[static_cast<std::size_t>(j)]));
    }
  ScoreStackT<T> stack;
  stack.metric = metric;
  stack.components = layers;
  stack.grid_n = n;
  stack.maps = reshape(concat_rows(rows), {layers * layers, 2, n, n});
  return stack;
}

// CSV export of every pair map, one row per grid row (heatmap data).
template <typename T>
void write_score_stack_csv(const ScoreStackT<T>& stack, std::ostream& os) {
  os << "query_component,proto_component,channel,row";
  for (int c = 0; c < stack.grid_n; ++c) os << ",col_" << c;
  os << "\n";
  for (int i = 0; i < stack.components; ++i)
    for (int j = 0; j < stack.components; ++j)
      for (int ch = 0; ch < 2; ++ch) {
        TensorT<T> m = stack.map_copy(i, j, ch);
        for (int r = 0; r < stack.grid_n; ++r) {
          os << i << "," << j << "," << (ch == 0 ? "bg" : "fg") << "," << r;
          for (int c = 0; c < stack.grid_n; ++c) os << "," << m.at2(r, c);
          os << "\n";
        }
      }
}

}  // namespace sdrc
