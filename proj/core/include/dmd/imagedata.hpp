#pragma once

#include <cstdint>
#include <utility>

#include "dmd/image.hpp"

namespace dmd {

/// Variance of the 3x3 Laplacian response of the luma image, using
/// reflect-101 borders.
double laplacian_sharpness(const Image& img);

struct AugmentParams {
    bool flip = false;
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
};

/// Flip with probability 0.5 and jitter factors uniform in [0.9, 1.1].
AugmentParams sample_augment(std::uint64_t seed);

Image flip_horizontal(const Image& img);
/// x' = W - x with left/right landmark indices swapped.
LandmarkSet flip_landmarks(const LandmarkSet& lm, int width);

/// Brightness scales intensities, contrast scales around the mean luma,
/// saturation scales around the per-pixel luma. Clamped after every step.
Image color_jitter(const Image& img, double brightness, double contrast, double saturation);

std::pair<Image, LandmarkSet> augment_with(const Image& img, const LandmarkSet& lm,
                                           const AugmentParams& params);
std::pair<Image, LandmarkSet> augment(const Image& img, const LandmarkSet& lm, std::uint64_t seed);

}  // namespace dmd
