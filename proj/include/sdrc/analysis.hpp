#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "sdrc/errors.hpp"
#include "sdrc/tensor.hpp"
#include "sdrc/vit.hpp"

// Representation-similarity diagnostics: HSIC/CKA, the layer-pair CKA
// grid with its aggregates, the cross-term decomposition of cosine
// similarity, and a binned mutual-information estimator. Everything here
// is a pure function computed in double precision.

namespace sdrc {

// Empirical HSIC over Gram matrices: tr(K H L H) / (m-1)^2 with the
// centering matrix H = I - (1/m) 11^T.
template <typename T>
double hsic(const TensorT<T>& k, const TensorT<T>& lm) {
  if (k.rank() != 2 || k.rows() != k.cols()) throw ShapeError("hsic: K must be square");
  if (lm.rank() != 2 || lm.rows() != lm.cols()) throw ShapeError("hsic: L must be square");
  if (k.rows() != lm.rows()) throw ShapeError("hsic: Gram extents differ");
  const int m = k.rows();
  if (m < 2) throw ContractError("hsic: needs at least two samples");

  // Double-center K, then trace against L.
  std::vector<double> kc(static_cast<std::size_t>(m) * m);
  std::vector<double> row_mean(static_cast<std::size_t>(m), 0.0);
  std::vector<double> col_mean(static_cast<std::size_t>(m), 0.0);
  double total = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double v = static_cast<double>(k.at2(i, j));
      row_mean[static_cast<std::size_t>(i)] += v;
      col_mean[static_cast<std::size_t>(j)] += v;
      total += v;
    }
  for (int i = 0; i < m; ++i) {
    row_mean[static_cast<std::size_t>(i)] /= m;
    col_mean[static_cast<std::size_t>(i)] /= m;
  }
  total /= static_cast<double>(m) * m;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      kc[static_cast<std::size_t>(i) * m + j] = static_cast<double>(k.at2(i, j)) -
                                                row_mean[static_cast<std::size_t>(i)] -
                                                col_mean[static_cast<std::size_t>(j)] + total;
  double trace = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      trace += kc[static_cast<std::size_t>(i) * m + j] * static_cast<double>(lm.at2(j, i));
  const double denom = static_cast<double>(m - 1) * (m - 1);
  return trace / denom;
}

namespace detail {

// Column-centered copy in double; reports the Frobenius norms before and
// after centering so callers can detect degenerate (constant) inputs.
inline std::vector<double> center_columns(const std::vector<double>& x, int m, int p,
                                          double* centered_norm) {
  std::vector<double> out(x);
  for (int c = 0; c < p; ++c) {
    double mu = 0.0;
    for (int r = 0; r < m; ++r) mu += out[static_cast<std::size_t>(r) * p + c];
    mu /= m;
    for (int r = 0; r < m; ++r) out[static_cast<std::size_t>(r) * p + c] -= mu;
  }
  double nrm = 0.0;
  for (double v : out) nrm += v * v;
  if (centered_norm) *centered_norm = std::sqrt(nrm);
  return out;
}

inline std::vector<double> gram(const std::vector<double>& x, int m, int p) {
  std::vector<double> g(static_cast<std::size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int c = 0; c < p; ++c)
        acc += x[static_cast<std::size_t>(i) * p + c] * x[static_cast<std::size_t>(j) * p + c];
      g[static_cast<std::size_t>(i) * m + j] = acc;
    }
  return g;
}

inline double hsic_raw(const std::vector<double>& k, const std::vector<double>& l, int m) {
  // Both Grams come from centered features, so tr(K L) / (m-1)^2 equals
  // the H-sandwiched form.
  double trace = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      trace += k[static_cast<std::size_t>(i) * m + j] * l[static_cast<std::size_t>(j) * m + i];
  return trace / (static_cast<double>(m - 1) * (m - 1));
}

template <typename T>
std::vector<double> to_double_rows(const TensorT<T>& x) {
  std::vector<double> out(static_cast<std::size_t>(x.size()));
  for (std::int64_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x.at(i);
  return out;
}

}  // namespace detail

// Linear-kernel CKA between representations X [m x p] and Y [m x q];
// columns are centered internally. Degenerate (all-constant) inputs are an
// error rather than a silent zero.
template <typename T>
double cka(const TensorT<T>& x, const TensorT<T>& y) {
  if (x.rank() != 2 || y.rank() != 2) throw ShapeError("cka: rank-2 inputs required");
  if (x.rows() != y.rows()) throw ShapeError("cka: sample counts differ");
  const int m = x.rows();
  if (m < 2) throw ContractError("cka: needs at least two samples");
  const int p = x.cols(), q = y.cols();

  double raw_x = 0.0, raw_y = 0.0;
  for (const T& v : x.values()) raw_x += static_cast<double>(v) * static_cast<double>(v);
  for (const T& v : y.values()) raw_y += static_cast<double>(v) * static_cast<double>(v);

  double cx_norm = 0.0, cy_norm = 0.0;
  std::vector<double> cx = detail::center_columns(detail::to_double_rows(x), m, p, &cx_norm);
  std::vector<double> cy = detail::center_columns(detail::to_double_rows(y), m, q, &cy_norm);
  if (cx_norm <= 1e-12 * std::max(1.0, std::sqrt(raw_x)))
    throw DegenerateInputError("cka: first representation is constant");
  if (cy_norm <= 1e-12 * std::max(1.0, std::sqrt(raw_y)))
    throw DegenerateInputError("cka: second representation is constant");

  // Scale invariance lets us normalize up front for conditioning.
  for (double& v : cx) v /= cx_norm;
  for (double& v : cy) v /= cy_norm;
  std::vector<double> kx = detail::gram(cx, m, p);
  std::vector<double> ky = detail::gram(cy, m, q);
  const double cross = detail::hsic_raw(kx, ky, m);
  const double self_x = detail::hsic_raw(kx, kx, m);
  const double self_y = detail::hsic_raw(ky, ky, m);
  if (self_x <= 0.0 || self_y <= 0.0)
    throw DegenerateInputError("cka: zero self-similarity");
  double value = cross / std::sqrt(self_x * self_y);
  return std::min(1.0, std::max(0.0, value));
}

// L x L grid of source-layer x target-layer CKA values plus labels.
struct CkaMatrix {
  int size = 0;
  std::vector<double> values;  // row-major, row = source layer
  std::string row_domain = "source";
  std::string col_domain = "target";

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * size + j]; }
  double& at(int i, int j) { return values[static_cast<std::size_t>(i) * size + j]; }
};

// One row per image: token-mean of a component's [d x N] output.
template <typename T>
TensorT<T> token_mean_features(const std::vector<ResidualStreamT<T>>& streams,
                               int component_index) {
  if (streams.empty()) throw ContractError("token_mean_features: empty stream list");
  const int m = static_cast<int>(streams.size());
  std::vector<std::vector<TensorT<T>>> comps;
  comps.reserve(streams.size());
  for (const auto& s : streams) comps.push_back(decompose(s));
  const TensorT<T>& probe = comps[0][static_cast<std::size_t>(component_index)];
  const int d = probe.rows(), n = probe.cols();
  TensorT<T> out({m, d});
  for (int img = 0; img < m; ++img) {
    const TensorT<T>& c = comps[static_cast<std::size_t>(img)][static_cast<std::size_t>(component_index)];
    for (int r = 0; r < d; ++r) {
      double acc = 0.0;
      for (int col = 0; col < n; ++col) acc += static_cast<double>(c.at2(r, col));
      out.at2(img, r) = static_cast<T>(acc / n);
    }
  }
  return out;
}

// Entry (i, j) compares source layer-i features against target layer-j
// features (layers 1..L; Z0 is excluded). Both stream lists must have the
// same image count, since the linear-kernel Grams must share m.
template <typename T>
CkaMatrix layer_pair_cka(const std::vector<ResidualStreamT<T>>& source_streams,
                         const std::vector<ResidualStreamT<T>>& target_streams) {
  if (source_streams.empty() || target_streams.empty())
    throw ContractError("layer_pair_cka: empty stream list");
  if (source_streams.size() != target_streams.size())
    throw ContractError("layer_pair_cka: stream counts differ");
  const int layers = source_streams[0].layers;
  if (target_streams[0].layers != layers)
    throw ContractError("layer_pair_cka: layer counts differ");

  std::vector<TensorT<T>> src_feats, tgt_feats;
  for (int l = 1; l <= layers; ++l) {
    src_feats.push_back(token_mean_features(source_streams, l));
    tgt_feats.push_back(token_mean_features(target_streams, l));
  }
  CkaMatrix m;
  m.size = layers;
  m.values.assign(static_cast<std::size_t>(layers) * layers, 0.0);
  for (int i = 0; i < layers; ++i)
    for (int j = 0; j < layers; ++j) {
      try {
        m.at(i, j) = cka(src_feats[static_cast<std::size_t>(i)],
                         tgt_feats[static_cast<std::size_t>(j)]);
      } catch (const Error& e) {
        throw DegenerateInputError("layer_pair_cka: pair (" + std::to_string(i) + "," +
                                   std::to_string(j) + "): " + e.what());
      }
    }
  return m;
}

struct CkaAggregates {
  double final_output = 0.0;
  double layerwise_avg = 0.0;
  double topk_avg = 0.0;
  double bottomk_avg = 0.0;
  int k = 0;
};

inline CkaAggregates cka_aggregates(const CkaMatrix& matrix, double final_output_cka, int k) {
  if (k <= 0) throw ContractError("cka_aggregates: k must be positive");
  const int total = matrix.size * matrix.size;
  if (k > total) throw ContractError("cka_aggregates: k exceeds grid size");
  CkaAggregates agg;
  agg.k = k;
  agg.final_output = final_output_cka;
  double diag = 0.0;
  for (int i = 0; i < matrix.size; ++i) diag += matrix.at(i, i);
  agg.layerwise_avg = diag / matrix.size;
  std::vector<double> sorted(matrix.values);
  std::sort(sorted.begin(), sorted.end());
  double lo = 0.0, hi = 0.0;
  for (int i = 0; i < k; ++i) {
    lo += sorted[static_cast<std::size_t>(i)];
    hi += sorted[static_cast<std::size_t>(total - 1 - i)];
  }
  agg.bottomk_avg = lo / k;
  agg.topk_avg = hi / k;
  return agg;
}

// The cross-term expansion of cosine similarity between two streams'
// final features: total == sum(cross_terms) / norm_product.
struct SimilarityDecomposition {
  double total = 0.0;
  int components = 0;                // L + 1 (Z0 plus layers)
  std::vector<double> cross_terms;   // (L+1) x (L+1), row = support component
  double norm_product = 0.0;

  double at(int i, int j) const {
    return cross_terms[static_cast<std::size_t>(i) * components + j];
  }
};

template <typename T>
SimilarityDecomposition decomposed_similarity(const ResidualStreamT<T>& stream_s,
                                              const ResidualStreamT<T>& stream_q) {
  std::vector<TensorT<T>> cs = decompose(stream_s);
  std::vector<TensorT<T>> cq = decompose(stream_q);
  if (cs.size() != cq.size()) throw ShapeError("decomposed_similarity: component counts differ");
  const double norm_s = frobenius_norm(stream_s.final);
  const double norm_q = frobenius_norm(stream_q.final);
  if (norm_s == 0.0 || norm_q == 0.0)
    throw DegenerateInputError("decomposed_similarity: zero-norm feature");

  SimilarityDecomposition dec;
  dec.components = static_cast<int>(cs.size());
  dec.norm_product = norm_s * norm_q;
  dec.cross_terms.assign(static_cast<std::size_t>(dec.components) * dec.components, 0.0);
  for (int i = 0; i < dec.components; ++i)
    for (int j = 0; j < dec.components; ++j)
      dec.cross_terms[static_cast<std::size_t>(i) * dec.components + j] =
          dot_flat(cs[static_cast<std::size_t>(i)], cq[static_cast<std::size_t>(j)]);
  dec.total = dot_flat(stream_s.final, stream_q.final) / dec.norm_product;
  return dec;
}

// Binned mutual information between corresponding channels of two feature
// sets, averaged over channels and normalized by log(bins). Constant
// channels contribute zero.
template <typename T>
double mutual_information(const TensorT<T>& feats_a, const TensorT<T>& feats_b, int bins) {
  if (feats_a.rank() != 2 || feats_b.rank() != 2)
    throw ShapeError("mutual_information: rank-2 inputs required");
  if (feats_a.dims() != feats_b.dims())
    throw ShapeError("mutual_information: extents differ");
  const int m = feats_a.rows(), d = feats_a.cols();
  if (bins < 2) throw ContractError("mutual_information: bins must be >= 2");
  if (m < bins) throw ContractError("mutual_information: needs at least `bins` samples");

  auto bin_index = [bins](double v, double lo, double hi) {
    int idx = static_cast<int>(static_cast<double>(bins) * (v - lo) / (hi - lo));
    return std::min(idx, bins - 1);
  };

  double total = 0.0;
  std::vector<double> joint(static_cast<std::size_t>(bins) * bins);
  std::vector<double> pa(static_cast<std::size_t>(bins)), pb(static_cast<std::size_t>(bins));
  for (int c = 0; c < d; ++c) {
    double alo = 1e300, ahi = -1e300, blo = 1e300, bhi = -1e300;
    for (int r = 0; r < m; ++r) {
      const double av = static_cast<double>(feats_a.at2(r, c));
      const double bv = static_cast<double>(feats_b.at2(r, c));
      alo = std::min(alo, av);
      ahi = std::max(ahi, av);
      blo = std::min(blo, bv);
      bhi = std::max(bhi, bv);
    }
    if (alo == ahi || blo == bhi) continue;  // constant channel: zero entropy

    std::fill(joint.begin(), joint.end(), 0.0);
    std::fill(pa.begin(), pa.end(), 0.0);
    std::fill(pb.begin(), pb.end(), 0.0);
    const double w = 1.0 / m;
    for (int r = 0; r < m; ++r) {
      const int ia = bin_index(static_cast<double>(feats_a.at2(r, c)), alo, ahi);
      const int ib = bin_index(static_cast<double>(feats_b.at2(r, c)), blo, bhi);
      joint[static_cast<std::size_t>(ia) * bins + ib] += w;
      pa[static_cast<std::size_t>(ia)] += w;
      pb[static_cast<std::size_t>(ib)] += w;
    }
    double mi = 0.0;
    for (int ia = 0; ia < bins; ++ia)
      for (int ib = 0; ib < bins; ++ib) {
        const double pj = joint[static_cast<std::size_t>(ia) * bins + ib];
        if (pj <= 0.0) continue;
        mi += pj * std::log(pj / (pa[static_cast<std::size_t>(ia)] * pb[static_cast<std::size_t>(ib)]));
      }
    total += mi / std::log(static_cast<double>(bins));
  }
  return total / d;
}

// Average normalized MI over all distinct component pairs of a stream set
// (token-mean pooled, layers 1..L). The cross-component correlation
// diagnostic behind the OSD ablation.
template <typename T>
double component_mutual_information(const std::vector<std::vector<TensorT<T>>>& per_image_components,
                                    int bins) {
  if (per_image_components.empty())
    throw ContractError("component_mutual_information: empty input");
  const int m = static_cast<int>(per_image_components.size());
  const int count = static_cast<int>(per_image_components[0].size());
  if (count < 2) throw ContractError("component_mutual_information: needs >= 2 components");
  const int d = per_image_components[0][0].rows();
  const int n = per_image_components[0][0].cols();

  std::vector<TensorT<T>> pooled;  // one [m x d] per component
  for (int comp = 0; comp < count; ++comp) {
    TensorT<T> f({m, d});
    for (int img = 0; img < m; ++img) {
      const TensorT<T>& c = per_image_components[static_cast<std::size_t>(img)][static_cast<std::size_t>(comp)];
      for (int r = 0; r < d; ++r) {
        double acc = 0.0;
        for (int col = 0; col < n; ++col) acc += static_cast<double>(c.at2(r, col));
        f.at2(img, r) = static_cast<T>(acc / n);
      }
    }
    pooled.push_back(std::move(f));
  }
  double total = 0.0;
  int pairs = 0;
  for (int i = 0; i < count; ++i)
    for (int j = i + 1; j < count; ++j) {
      total += mutual_information(pooled[static_cast<std::size_t>(i)],
                                  pooled[static_cast<std::size_t>(j)], bins);
      ++pairs;
    }
  return total / pairs;
}

// ---------------------------------------------------------------------------
// Exports

inline void write_cka_csv(const CkaMatrix& m, std::ostream& os) {
  os << "source_layer";
  for (int j = 0; j < m.size; ++j) os << ",target_layer_" << (j + 1);
  os << "\n";
  for (int i = 0; i < m.size; ++i) {
    os << (i + 1);
    for (int j = 0; j < m.size; ++j) os << "," << m.at(i, j);
    os << "\n";
  }
}

}  // namespace sdrc
