#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sdrc/errors.hpp"
#include "sdrc/init.hpp"
#include "sdrc/rng.hpp"
#include "sdrc/tensor.hpp"

// A small encoder-only vision transformer whose forward pass records the
// residual stream, so the output can be decomposed into per-component
// contributions. Tokens are columns: activations are [dim x N] with
// N = patch_n^2 and no CLS token.

namespace sdrc {

enum class Granularity { kPerBlock, kPerSublayer };
enum class NormMode { kNormFree, kPreNorm };

struct VitConfig {
  int layers = 4;
  int dim = 32;
  int heads = 2;
  int patch_n = 8;     // tokens per side; N = patch_n^2
  int mlp_ratio = 2;
  Granularity granularity = Granularity::kPerBlock;
  NormMode norm = NormMode::kNormFree;

  int tokens() const { return patch_n * patch_n; }

  void validate() const {
    if (layers < 1) throw ContractError("VitConfig: layers must be >= 1");
    if (patch_n < 2) throw ContractError("VitConfig: patch_n must be >= 2");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ContractError("VitConfig: dim must be a positive multiple of heads");
    if (mlp_ratio < 1) throw ContractError("VitConfig: mlp_ratio must be >= 1");
  }
};

template <typename T>
struct VitBlockParamsT {
  TensorT<T> wq, wk, wv, wo;  // [d x d]
  TensorT<T> w_mlp1;          // [mlp_ratio*d x d]
  TensorT<T> w_mlp2;          // [d x mlp_ratio*d]
  // Affine layer-norm parameters; allocated only in pre-norm mode.
  TensorT<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // [d x 1]
};

template <typename T>
struct VitParamsT {
  TensorT<T> patch_proj;  // [d x channels*patch_h*patch_w]
  TensorT<T> pos;         // [d x N]
  std::vector<VitBlockParamsT<T>> blocks;
  int in_channels = 1;
  int patch_h = 4;
  int patch_w = 4;
};

using VitParams = VitParamsT<float>;

template <typename T>
VitParamsT<T> init_vit_params(const VitConfig& cfg, int channels, int image_h, int image_w,
                              Rng& rng) {
  cfg.validate();
  if (image_h % cfg.patch_n != 0 || image_w % cfg.patch_n != 0)
    throw ShapeError("init_vit_params: image extents not divisible by patch grid");
  VitParamsT<T> p;
  p.in_channels = channels;
  p.patch_h = image_h / cfg.patch_n;
  p.patch_w = image_w / cfg.patch_n;
  const int patch_len = channels * p.patch_h * p.patch_w;
  p.patch_proj = detail::fan_in_uniform<T>({cfg.dim, patch_len}, patch_len, rng);
  p.pos = TensorT<T>({cfg.dim, cfg.tokens()});
  for (std::int64_t i = 0; i < p.pos.size(); ++i)
    p.pos.at(i) = static_cast<T>(rng.normal() * 0.02);
  const int hidden = cfg.mlp_ratio * cfg.dim;
  for (int l = 0; l < cfg.layers; ++l) {
    VitBlockParamsT<T> b;
    b.wq = detail::fan_in_uniform<T>({cfg.dim, cfg.dim}, cfg.dim, rng);
    b.wk = detail::fan_in_uniform<T>({cfg.dim, cfg.dim}, cfg.dim, rng);
    b.wv = detail::fan_in_uniform<T>({cfg.dim, cfg.dim}, cfg.dim, rng);
    b.wo = detail::fan_in_uniform<T>({cfg.dim, cfg.dim}, cfg.dim, rng);
    b.w_mlp1 = detail::fan_in_uniform<T>({hidden, cfg.dim}, cfg.dim, rng);
    b.w_mlp2 = detail::fan_in_uniform<T>({cfg.dim, hidden}, hidden, rng);
    if (cfg.norm == NormMode::kPreNorm) {
      b.ln1_gamma = TensorT<T>::full({cfg.dim, 1}, T(1));
      b.ln1_beta = TensorT<T>::zeros({cfg.dim, 1});
      b.ln2_gamma = TensorT<T>::full({cfg.dim, 1}, T(1));
      b.ln2_beta = TensorT<T>::zeros({cfg.dim, 1});
    }
    p.blocks.push_back(std::move(b));
  }
  return p;
}

// Z0 = patch_proj . patches + positional embedding. Patches are taken in
// row-major grid order and flattened (channel, y, x).
template <typename T>
TensorT<T> patch_embed(const TensorT<T>& image, const VitParamsT<T>& params,
                       const VitConfig& cfg) {
  if (image.rank() != 3) throw ShapeError("patch_embed: image must be [C x H x W]");
  const int c = image.dims()[0], h = image.dims()[1], w = image.dims()[2];
  if (c != params.in_channels) throw ShapeError("patch_embed: channel extent mismatch");
  if (h % cfg.patch_n != 0 || w % cfg.patch_n != 0)
    throw ShapeError("patch_embed: image extents not divisible by patch grid");
  const int ph = h / cfg.patch_n, pw = w / cfg.patch_n;
  if (ph != params.patch_h || pw != params.patch_w)
    throw ShapeError("patch_embed: patch size mismatch with parameters");
  const int n_tokens = cfg.tokens();
  const int patch_len = c * ph * pw;

  TensorT<T> patches({patch_len, n_tokens});
  const std::vector<T>& img = image.values();
  for (int gy = 0; gy < cfg.patch_n; ++gy)
    for (int gx = 0; gx < cfg.patch_n; ++gx) {
      const int tok = gy * cfg.patch_n + gx;
      int row = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < ph; ++dy)
          for (int dx = 0; dx < pw; ++dx) {
            const std::size_t src = (static_cast<std::size_t>(ch) * h + (gy * ph + dy)) * w +
                                    (gx * pw + dx);
            patches.at2(row++, tok) = img[src];
          }
    }
  return add(matmul(params.patch_proj, patches), params.pos);
}

// Ordered record of one forward pass: Z0, the per-component additive
// contributions, and the final stream state. The contributions are the
// realized residual increments, so z0 + sum(contributions) == final in
// both norm modes.
template <typename T>
struct ResidualStreamT {
  TensorT<T> z0;
  std::vector<TensorT<T>> contributions;
  TensorT<T> final;
  Granularity granularity = Granularity::kPerBlock;
  int layers = 0;
};

using ResidualStream = ResidualStreamT<float>;

namespace detail {

// Per-token (column) layer norm with affine parameters, composed from
// differentiable primitives.
template <typename T>
TensorT<T> layer_norm_cols(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta) {
  const int d = x.rows();
  TensorT<T> mu = scale(colsum(x), static_cast<T>(1.0 / d));
  TensorT<T> centered = sub_rowvec(x, mu);
  TensorT<T> var = scale(colsum(mul(centered, centered)), static_cast<T>(1.0 / d));
  TensorT<T> inv_std = recip(sqrt_t(add_const(var, static_cast<T>(1e-5))));
  TensorT<T> normed = mul_rowvec(centered, inv_std);
  return add_colvec(mul_colvec(normed, gamma), beta);
}

template <typename T>
TensorT<T> msa(const TensorT<T>& z, const VitBlockParamsT<T>& b, int heads) {
  const int d = z.rows();
  const int dh = d / heads;
  TensorT<T> q = matmul(b.wq, z);
  TensorT<T> k = matmul(b.wk, z);
  TensorT<T> v = matmul(b.wv, z);
  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<TensorT<T>> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    TensorT<T> qh = slice_rows(q, hd * dh, (hd + 1) * dh);
    TensorT<T> kh = slice_rows(k, hd * dh, (hd + 1) * dh);
    TensorT<T> vh = slice_rows(v, hd * dh, (hd + 1) * dh);
    TensorT<T> scores = scale(matmul(transpose(qh), kh), inv_sqrt_dh);  // [N x N]
    TensorT<T> attn = softmax(scores, 1);  // rows are query tokens
    head_outs.push_back(matmul(vh, transpose(attn)));
  }
  return matmul(b.wo, concat_rows(head_outs));
}

template <typename T>
TensorT<T> mlp(const TensorT<T>& z, const VitBlockParamsT<T>& b) {
  return matmul(b.w_mlp2, gelu(matmul(b.w_mlp1, z)));
}

}  // namespace detail

template <typename T>
ResidualStreamT<T> forward_recorded(const TensorT<T>& z0, const VitParamsT<T>& params,
                                    const VitConfig& cfg) {
  cfg.validate();
  if (z0.rank() != 2 || z0.rows() != cfg.dim || z0.cols() != cfg.tokens())
    throw ShapeError("forward_recorded: z0 must be [dim x N]");
  if (static_cast<int>(params.blocks.size()) != cfg.layers)
    throw ShapeError("forward_recorded: parameter block count mismatch");

  ResidualStreamT<T> stream;
  stream.z0 = z0;
  stream.granularity = cfg.granularity;
  stream.layers = cfg.layers;

  TensorT<T> z = z0;
  for (int l = 0; l < cfg.layers; ++l) {
    const VitBlockParamsT<T>& b = params.blocks[static_cast<std::size_t>(l)];
    TensorT<T> msa_in =
        cfg.norm == NormMode::kPreNorm ? detail::layer_norm_cols(z, b.ln1_gamma, b.ln1_beta) : z;
    TensorT<T> msa_out = detail::msa(msa_in, b, cfg.heads);
    z = add(z, msa_out);
    TensorT<T> mlp_in =
        cfg.norm == NormMode::kPreNorm ? detail::layer_norm_cols(z, b.ln2_gamma, b.ln2_beta) : z;
    TensorT<T> mlp_out = detail::mlp(mlp_in, b);
    z = add(z, mlp_out);
    if (cfg.granularity == Granularity::kPerSublayer) {
      stream.contributions.push_back(msa_out);
      stream.contributions.push_back(mlp_out);
    } else {
      stream.contributions.push_back(add(msa_out, mlp_out));
    }
  }
  stream.final = z;
  return stream;
}

// [Z0, Layer1, ..., LayerL]; a per-sublayer recording is folded to block
// components by summing consecutive MSA/MLP pairs.
template <typename T>
std::vector<TensorT<T>> decompose(const ResidualStreamT<T>& stream) {
  const std::size_t expected =
      stream.granularity == Granularity::kPerSublayer ? 2u * stream.layers : stream.layers;
  if (stream.contributions.size() != expected)
    throw ContractError("decompose: contribution count does not match granularity");
  std::vector<TensorT<T>> out;
  out.reserve(static_cast<std::size_t>(stream.layers) + 1);
  out.push_back(stream.z0);
  if (stream.granularity == Granularity::kPerSublayer) {
    for (int l = 0; l < stream.layers; ++l)
      out.push_back(add(stream.contributions[static_cast<std::size_t>(2 * l)],
                        stream.contributions[static_cast<std::size_t>(2 * l + 1)]));
  } else {
    for (const TensorT<T>& c : stream.contributions) out.push_back(c);
  }
  return out;
}

// Elementwise sum with double accumulation per position.
template <typename T>
TensorT<T> reconstruct(const std::vector<TensorT<T>>& components) {
  if (components.empty()) throw ShapeError("reconstruct: empty component list");
  for (const TensorT<T>& c : components)
    if (c.dims() != components[0].dims()) throw ShapeError("reconstruct: extents differ");
  TensorT<T> out(components[0].dims());
  for (std::int64_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (const TensorT<T>& c : components) acc += static_cast<double>(c.at(i));
    out.at(i) = static_cast<T>(acc);
  }
  return out;
}

}  // namespace sdrc
