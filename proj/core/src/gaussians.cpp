#include "star4d/gaussians.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace star4d {

void GaussianFrame::resize(int64_t n) {
  const auto un = static_cast<size_t>(n);
  positions.assign(un * 3, 0.0f);
  scales.assign(un * 3, 0.1f);
  rotations.assign(un * 4, 0.0f);
  for (size_t i = 0; i < un; ++i) rotations[i * 4] = 1.0f;
  opacities.assign(un, 1.0f);
  colors.assign(un * 3, 0.5f);
}

void GaussianFrame::validate() const {
  const auto n = static_cast<size_t>(count());
  if (positions.size() != n * 3 || scales.size() != n * 3 || rotations.size() != n * 4 ||
      colors.size() != n * 3) {
    throw std::invalid_argument("GaussianFrame: inconsistent array sizes");
  }
  for (size_t i = 0; i < n; ++i) {
    const std::string at = " at gaussian " + std::to_string(i);
    for (int k = 0; k < 3; ++k) {
      if (!std::isfinite(positions[i * 3 + k])) throw std::invalid_argument("non-finite position" + at);
      if (!(scales[i * 3 + k] > 0.0f)) throw std::invalid_argument("non-positive scale" + at);
      if (!(colors[i * 3 + k] >= 0.0f && colors[i * 3 + k] <= 1.0f)) {
        throw std::invalid_argument("color outside [0,1]" + at);
      }
    }
    double norm = 0.0;
    for (int k = 0; k < 4; ++k) norm += static_cast<double>(rotations[i * 4 + k]) * rotations[i * 4 + k];
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-5) throw std::invalid_argument("rotation not unit" + at);
    if (!(opacities[i] >= 0.0f && opacities[i] <= 1.0f)) {
      throw std::invalid_argument("opacity outside [0,1]" + at);
    }
  }
}

GaussianParams GaussianParams::from_frame(const GaussianFrame& frame, bool requires_grad) {
  const int64_t n = frame.count();
  return {Tensor::from({n, 3}, frame.positions, requires_grad),
          Tensor::from({n, 3}, frame.scales, requires_grad),
          Tensor::from({n, 4}, frame.rotations, requires_grad),
          Tensor::from({n, 1}, frame.opacities, requires_grad),
          Tensor::from({n, 3}, frame.colors, requires_grad)};
}

GaussianFrame GaussianParams::to_frame() const {
  GaussianFrame f;
  f.positions = positions.to_vector();
  f.scales = scales.to_vector();
  f.rotations = rotations.to_vector();
  f.opacities = opacities.to_vector();
  f.colors = colors.to_vector();
  return f;
}

Tensor GaussianParams::packed() const {
  return ops::concat_cols({positions, scales, rotations, opacities, colors});
}

}  // namespace star4d
