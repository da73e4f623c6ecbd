#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "sdrc/cpc.hpp"
#include "sdrc/errors.hpp"
#include "sdrc/tensor.hpp"

// Re-composition of the comparison stack: uniform averaging during source
// training, learned per-pair weights during target finetuning, followed by
// bilinear upsampling, a temperature softmax and the training losses.

namespace sdrc {

template <typename T>
struct FusionWeightsT {
  TensorT<T> w;  // [L^2 x 2]; column 0 background, column 1 foreground
};

using FusionWeights = FusionWeightsT<float>;

// All-ones initialization: the first finetuning step starts exactly at the
// uniform-average behavior.
template <typename T>
FusionWeightsT<T> make_fusion_weights(int components) {
  if (components < 1) throw ContractError("make_fusion_weights: components must be >= 1");
  FusionWeightsT<T> fw;
  fw.w = TensorT<T>::full({components * components, 2}, T(1));
  return fw;
}

namespace detail {

// Constant selector that averages the stack over pairs per channel:
// out[c] = sum_pairs stack[pair*2 + c] / L^2.
template <typename T>
TensorT<T> pair_average_matrix(int pairs) {
  TensorT<T> sel({2, pairs * 2});
  const T inv = static_cast<T>(1.0 / pairs);
  for (int p = 0; p < pairs; ++p) {
    sel.at2(0, p * 2 + 0) = inv;
    sel.at2(1, p * 2 + 1) = inv;
  }
  return sel;
}

template <typename T>
TensorT<T> stack_as_matrix(const ScoreStackT<T>& stack) {
  const int pairs = stack.components * stack.components;
  const int n2 = stack.grid_n * stack.grid_n;
  return reshape(stack.maps, {pairs * 2, n2});
}

}  // namespace detail

// C_fusion = (sum over pairs of C(l)) / L^2.
template <typename T>
TensorT<T> fuse_source(const ScoreStackT<T>& stack) {
  const int pairs = stack.components * stack.components;
  TensorT<T> fused = matmul(detail::pair_average_matrix<T>(pairs),
                            detail::stack_as_matrix(stack));
  return reshape(fused, {2, stack.grid_n, stack.grid_n});
}

// C_fusion = (sum over pairs of w[l] (.) C(l)) / L^2, the weights
// broadcasting their bg/fg scalars over each n x n map.
template <typename T>
TensorT<T> fuse_afw(const ScoreStackT<T>& stack, const FusionWeightsT<T>& weights) {
  const int pairs = stack.components * stack.components;
  if (weights.w.rank() != 2 || weights.w.rows() != pairs || weights.w.cols() != 2)
    throw ShapeError("fuse_afw: weights must be [L^2 x 2]");
  TensorT<T> w_col = reshape(weights.w, {pairs * 2, 1});
  TensorT<T> weighted = scale_rows(detail::stack_as_matrix(stack), w_col);
  TensorT<T> fused = matmul(detail::pair_average_matrix<T>(pairs), weighted);
  return reshape(fused, {2, stack.grid_n, stack.grid_n});
}

// Interpolation weights for one axis, half-pixel convention with edge
// clamping: row i of the result mixes at most two source cells.
template <typename T>
TensorT<T> bilinear_matrix(int out_extent, int in_extent) {
  if (out_extent < in_extent) throw ShapeError("bilinear_matrix: only upsampling is supported");
  TensorT<T> m({out_extent, in_extent});
  const double ratio = static_cast<double>(in_extent) / out_extent;
  for (int i = 0; i < out_extent; ++i) {
    double src = (i + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in_extent - 1) src = in_extent - 1;
    const int i0 = static_cast<int>(src);
    const int i1 = std::min(i0 + 1, in_extent - 1);
    const double frac = src - i0;
    m.at2(i, i0) += static_cast<T>(1.0 - frac);
    m.at2(i, i1) += static_cast<T>(frac);
  }
  return m;
}

template <typename T>
struct PredictionT {
  TensorT<T> probs;                 // [2 x h x w], sums to one over classes
  std::vector<std::uint8_t> labels; // h*w entries, argmax with ties to background
  int h = 0, w = 0;
};

using Prediction = PredictionT<float>;

// Bilinear upsample each class channel to h x w, then a temperature
// softmax across the two classes. Labels are the argmax; exact ties go to
// background.
template <typename T>
PredictionT<T> predict(const TensorT<T>& c_fusion, int h, int w, T temperature) {
  if (c_fusion.rank() != 3 || c_fusion.dims()[0] != 2)
    throw ShapeError("predict: fused scores must be [2 x n x n]");
  if (temperature <= T(0)) throw ContractError("predict: temperature must be positive");
  const int n = c_fusion.dims()[1];
  if (c_fusion.dims()[2] != n) throw ShapeError("predict: fused grid must be square");
  if (h < n || w < n) throw ShapeError("predict: output extents must not shrink the grid");

  TensorT<T> rows_m = bilinear_matrix<T>(h, n);
  TensorT<T> cols_mt = transpose(bilinear_matrix<T>(w, n));
  TensorT<T> flat = reshape(c_fusion, {2, n * n});
  std::vector<TensorT<T>> channels;
  for (int c = 0; c < 2; ++c) {
    TensorT<T> grid = reshape(slice_rows(flat, c, c + 1), {n, n});
    TensorT<T> up = matmul(matmul(rows_m, grid), cols_mt);  // [h x w]
    channels.push_back(reshape(up, {1, h * w}));
  }
  TensorT<T> logits = scale(concat_rows(channels), temperature);
  TensorT<T> probs = softmax(logits, 0);

  PredictionT<T> pred;
  pred.h = h;
  pred.w = w;
  pred.labels.resize(static_cast<std::size_t>(h) * w);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i)
    pred.labels[static_cast<std::size_t>(i)] =
        probs.at(h * static_cast<std::int64_t>(w) + i) > probs.at(i) ? 1 : 0;
  pred.probs = reshape(probs, {2, h, w});
  return pred;
}

// Mean over pixels of -log p(target class), clamped at 1e-7.
template <typename T>
TensorT<T> bce_loss(const TensorT<T>& probs, const std::vector<std::uint8_t>& target) {
  if (probs.rank() != 3 || probs.dims()[0] != 2)
    throw ShapeError("bce_loss: probabilities must be [2 x h x w]");
  const std::int64_t pixels = static_cast<std::int64_t>(probs.dims()[1]) * probs.dims()[2];
  if (static_cast<std::int64_t>(target.size()) != pixels)
    throw ShapeError("bce_loss: target extent mismatch");
  TensorT<T> onehot({2, probs.dims()[1], probs.dims()[2]});
  for (std::int64_t i = 0; i < pixels; ++i) {
    const bool fg = target[static_cast<std::size_t>(i)] != 0;
    onehot.at(i) = fg ? T(0) : T(1);
    onehot.at(pixels + i) = fg ? T(1) : T(0);
  }
  TensorT<T> picked = mul(onehot, log_t(clamp_min(probs, static_cast<T>(1e-7))));
  return scale(sum(picked), static_cast<T>(-1.0 / pixels));
}

// L = L_bce + lambda * L_orth.
template <typename T>
TensorT<T> total_loss(const TensorT<T>& bce, const TensorT<T>& orth, T lambda) {
  if (lambda < T(0)) throw ContractError("total_loss: lambda must be non-negative");
  if (bce.size() != 1 || orth.size() != 1) throw ShapeError("total_loss: scalar inputs required");
  return add(bce, scale(orth, lambda));
}

struct IouResult {
  double iou_fg = 0.0;
  double iou_bg = 0.0;
  double mean = 0.0;
};

// Per-class intersection over union; a class absent from both prediction
// and ground truth counts as 1.
inline IouResult miou(const std::vector<std::uint8_t>& pred,
                      const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("miou: extents differ");
  std::int64_t inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter_fg += (p && g) ? 1 : 0;
    union_fg += (p || g) ? 1 : 0;
    inter_bg += (!p && !g) ? 1 : 0;
    union_bg += (!p || !g) ? 1 : 0;
  }
  IouResult r;
  r.iou_fg = union_fg == 0 ? 1.0 : static_cast<double>(inter_fg) / union_fg;
  r.iou_bg = union_bg == 0 ? 1.0 : static_cast<double>(inter_bg) / union_bg;
  r.mean = 0.5 * (r.iou_fg + r.iou_bg);
  return r;
}

// 2 x L^2 CSV: background weights on the first row, foreground on the
// second (heatmap data).
template <typename T>
void write_fusion_weights_csv(const FusionWeightsT<T>& fw, std::ostream& os) {
  const int pairs = fw.w.rows();
  os << "channel";
  for (int p = 0; p < pairs; ++p) os << ",pair_" << p;
  os << "\n";
  for (int c = 0; c < 2; ++c) {
    os << (c == 0 ? "bg" : "fg");
    for (int p = 0; p < pairs; ++p) os << "," << fw.w.at2(p, c);
    os << "\n";
  }
}

}  // namespace sdrc
