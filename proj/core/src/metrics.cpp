#include "star4d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace star4d::metrics {

double psnr(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: size mismatch");
  double total = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    total += d * d;
  }
  const double mse = total / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(std::span<const float> a, std::span<const float> b, int height, int width) {
  const size_t n = static_cast<size_t>(height) * width * 3;
  if (a.size() != n || b.size() != n) throw std::invalid_argument("ssim: size mismatch");
  constexpr int kRadius = 5;
  constexpr double kSigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int radius = std::min({kRadius, (height - 1) / 2, (width - 1) / 2});
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) ksum += (kernel[i + radius] = std::exp(-0.5 * i * i / (kSigma * kSigma)));
  for (double& k : kernel) k /= ksum;

  double total = 0.0;
  int count = 0;
  for (int y = radius; y < height - radius; ++y) {
    for (int x = radius; x < width - radius; ++x) {
      for (int c = 0; c < 3; ++c) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            const double w = kernel[dy + radius] * kernel[dx + radius];
            const size_t idx = (static_cast<size_t>(y + dy) * width + (x + dx)) * 3 + c;
            const double va = a[idx], vb = b[idx];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++count;
      }
    }
  }
  return count > 0 ? total / count : 1.0;
}

std::vector<float> warp(std::span<const float> image, std::span<const float> flow, int height, int width) {
  std::vector<float> out(image.size());
  auto sample = [&](int y, int x, int c) {
    y = std::clamp(y, 0, height - 1);
    x = std::clamp(x, 0, width - 1);
    return image[(static_cast<size_t>(y) * width + x) * 3 + c];
  };
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const size_t p = static_cast<size_t>(y) * width + x;
      const double sx = x + flow[p * 2], sy = y + flow[p * 2 + 1];
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * sample(y0, x0, c) + fx * sample(y0, x0 + 1, c)) +
                         fy * ((1 - fx) * sample(y0 + 1, x0, c) + fx * sample(y0 + 1, x0 + 1, c));
        out[p * 3 + c] = static_cast<float>(v);
      }
    }
  }
  return out;
}

double temporal_consistency(const SpatioTemporalMatrix& frames, const FlowField& flow) {
  if (flow.views != frames.views || flow.height != frames.height || flow.width != frames.width ||
      flow.timesteps != frames.timesteps) {
    throw std::invalid_argument("temporal_consistency: flow does not match frames");
  }
  if (frames.timesteps < 2) return 1.0;
  double total = 0.0;
  int count = 0;
  for (int t = 0; t + 1 < frames.timesteps; ++t) {
    for (int v = 0; v < frames.views; ++v) {
      const auto warped = warp(frames.frame(t + 1, v), flow.frame(t, v), frames.height, frames.width);
      total += ssim(warped, frames.frame(t, v), frames.height, frames.width);
      ++count;
    }
  }
  return total / count;
}

ReconstructionScores score(const SpatioTemporalMatrix& rendered, const SpatioTemporalMatrix& truth,
                           const FlowField& truth_flow) {
  if (rendered.pixels.size() != truth.pixels.size()) throw std::invalid_argument("score: shape mismatch");
  ReconstructionScores s;
  s.psnr = psnr(rendered.pixels, truth.pixels);
  double total = 0.0;
  for (int t = 0; t < truth.timesteps; ++t) {
    for (int v = 0; v < truth.views; ++v) total += ssim(rendered.frame(t, v), truth.frame(t, v), truth.height, truth.width);
  }
  s.ssim = total / (truth.timesteps * truth.views);
  s.temporal_consistency = temporal_consistency(rendered, truth_flow);
  return s;
}

}  // namespace star4d::metrics
