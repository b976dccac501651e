#pragma once

#include <cstddef>
#include <utility>

#include "autoadr/random.hpp"
#include "autoadr/tensor.hpp"

namespace autoadr::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

// Each row keeps a random non-empty valid prefix.
inline Tensor random_mask(std::size_t batch, std::size_t len, Rng& rng) {
  Tensor m({batch, len}, 1.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t valid = 1 + uniform_index(rng, len);
    for (std::size_t t = valid; t < len; ++t) m[b * len + t] = 0.0;
  }
  return m;
}

}  // namespace autoadr::testing
