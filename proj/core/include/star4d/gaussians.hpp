#pragma once

#include <cstdint>
#include <vector>

#include "star4d/tensor.hpp"

namespace star4d {

// Plain-value Gaussian set for one timestep. Rotations are (w, x, y, z).
struct GaussianFrame {
  std::vector<float> positions;  // n*3
  std::vector<float> scales;     // n*3
  std::vector<float> rotations;  // n*4
  std::vector<float> opacities;  // n
  std::vector<float> colors;     // n*3

  int64_t count() const { return static_cast<int64_t>(opacities.size()); }
  void resize(int64_t n);
  void validate() const;
  bool operator==(const GaussianFrame&) const = default;
};

// The same Gaussian set as autograd tensors ([n,3], [n,3], [n,4], [n,1], [n,3]).
struct GaussianParams {
  Tensor positions, scales, rotations, opacities, colors;

  int64_t count() const { return positions.dim(0); }
  static GaussianParams from_frame(const GaussianFrame& frame, bool requires_grad = false);
  GaussianFrame to_frame() const;
  // Concatenation [n, 14] in the order position, scale, rotation, opacity, color.
  Tensor packed() const;
};

inline constexpr int64_t kGaussianParamWidth = 14;

}  // namespace star4d
