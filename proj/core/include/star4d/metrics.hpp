#pragma once

#include <span>

#include "star4d/scene_synth.hpp"

namespace star4d::metrics {

// Images are H x W x 3 in [0, 1]. Returns +inf for identical images.
double psnr(std::span<const float> a, std::span<const float> b);

// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5) evaluated
// at every position where the window fits inside the image.
double ssim(std::span<const float> a, std::span<const float> b, int height, int width);

// Backward warp: out(p) = image(p + flow(p)), bilinear with edge clamping.
std::vector<float> warp(std::span<const float> image, std::span<const float> flow, int height, int width);

// Mean SSIM between frame t and frame t+1 warped by the ground-truth flow,
// averaged over every view and consecutive pair. Returns 1 when T == 1.
double temporal_consistency(const SpatioTemporalMatrix& frames, const FlowField& flow);

struct ReconstructionScores {
  double psnr = 0.0;
  double ssim = 0.0;
  double temporal_consistency = 0.0;
};

// PSNR over the whole matrix, SSIM averaged over frames, temporal consistency of `rendered`.
ReconstructionScores score(const SpatioTemporalMatrix& rendered, const SpatioTemporalMatrix& truth,
                           const FlowField& truth_flow);

}  // namespace star4d::metrics
