#pragma once

#include <cmath>
#include <vector>

#include "sdrc/rng.hpp"
#include "sdrc/tensor.hpp"

namespace sdrc {
namespace detail {

template <typename T>
TensorT<T> fan_in_uniform(std::vector<int> dims, int fan_in, Rng& rng) {
  TensorT<T> t(dims);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.at(i) = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail
}  // namespace sdrc
