#pragma once

#include <string>
#include <vector>

#include "sdrc/errors.hpp"
#include "sdrc/init.hpp"
#include "sdrc/rng.hpp"
#include "sdrc/tensor.hpp"

// Orthogonal space decoupling: a low-rank bottleneck applied at every
// spatial position over channel-concatenated component features, with a
// Frobenius orthogonality penalty on the bottleneck activations.
// Activations are kept as [channels x N] matrices; N = n*n positions.

namespace sdrc {

template <typename T>
struct OsdParamsT {
  TensorT<T> w_in;    // [(L*d) x r]
  TensorT<T> w_orth;  // [r x r], a 1x1 convolution over positions
  TensorT<T> w_out;   // [r x (L*d)]
  int rank = 8;
};

using OsdParams = OsdParamsT<float>;

template <typename T>
OsdParamsT<T> init_osd_params(int layers, int dim, int rank, Rng& rng) {
  if (rank < 1) throw ContractError("init_osd_params: rank must be >= 1");
  const int ld = layers * dim;
  OsdParamsT<T> p;
  p.rank = rank;
  p.w_in = detail::fan_in_uniform<T>({ld, rank}, ld, rng);
  // The bottleneck map starts as the identity so decoupling begins from a
  // benign projection.
  p.w_orth = TensorT<T>::identity(rank);
  p.w_out = detail::fan_in_uniform<T>({rank, ld}, rank, rng);
  return p;
}

// Channel-stacks L component maps; component l occupies channel rows
// [l*d, (l+1)*d).
template <typename T>
TensorT<T> concat_components(const std::vector<TensorT<T>>& components) {
  if (components.empty()) throw ShapeError("concat_components: empty component list");
  for (const TensorT<T>& c : components) {
    if (c.rank() != 2) throw ShapeError("concat_components: components must be [d x N]");
    if (c.dims() != components[0].dims())
      throw ShapeError("concat_components: component extents differ");
  }
  return concat_rows(components);
}

// Exact inverse of concat_components.
template <typename T>
std::vector<TensorT<T>> split_components(const TensorT<T>& f_up, int dim) {
  if (f_up.rank() != 2) throw ShapeError("split_components: input must be [(L*d) x N]");
  if (dim < 1 || f_up.rows() % dim != 0)
    throw ShapeError("split_components: channel extent not divisible by d");
  const int layers = f_up.rows() / dim;
  std::vector<TensorT<T>> out;
  out.reserve(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) out.push_back(slice_rows(f_up, l * dim, (l + 1) * dim));
  return out;
}

template <typename T>
struct OsdActivationsT {
  TensorT<T> f_con;   // [(L*d) x N]
  TensorT<T> f_orth;  // [r x N]
  TensorT<T> f_up;    // [(L*d) x N]
};

using OsdActivations = OsdActivationsT<float>;

// All three maps act independently at every spatial position. The output
// replaces the component features; there is no residual path around the
// bottleneck.
template <typename T>
OsdActivationsT<T> osd_forward(const TensorT<T>& f_con, const OsdParamsT<T>& params) {
  if (f_con.rank() != 2) throw ShapeError("osd_forward: input must be [(L*d) x N]");
  if (f_con.rows() != params.w_in.rows())
    throw ShapeError("osd_forward: channel extent does not match w_in");
  OsdActivationsT<T> act;
  act.f_con = f_con;
  TensorT<T> f_down = matmul(transpose(params.w_in), f_con);
  act.f_orth = matmul(params.w_orth, f_down);
  act.f_up = matmul(transpose(params.w_out), act.f_orth);
  return act;
}

// || M M^T - I ||_F^2 with M the bottleneck activations reshaped to
// [r x n^2]; zero exactly when the rows are orthonormal.
template <typename T>
TensorT<T> orth_loss(const TensorT<T>& f_orth) {
  if (f_orth.rank() != 2) throw ShapeError("orth_loss: input must be [r x N]");
  TensorT<T> gram = matmul(f_orth, transpose(f_orth));
  TensorT<T> delta = sub(gram, TensorT<T>::identity(f_orth.rows()));
  return sum(mul(delta, delta));
}

}  // namespace sdrc
