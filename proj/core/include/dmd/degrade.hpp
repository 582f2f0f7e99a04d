#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "dmd/image.hpp"

namespace dmd {

enum class Task { X4, X8, Random };

std::string_view task_name(Task t);
Task parse_task(std::string_view name);

/// Blur std (pixels), downsample factor, noise std (8-bit units), JPEG quality.
struct DegradationParams {
    double rho = 1.0;
    double r = 1.0;
    double sigma = 0.0;
    int q = 100;
    bool operator==(const DegradationParams&) const = default;
};

/// rho on {1:0.1:3}, r on {1:0.1:10}, sigma on {0:1:15}, q on {50:1:100}.
bool on_parameter_grid(const DegradationParams& p);

/// Uniform over the grids; r is pinned to 4 or 8 for the evaluation tasks.
DegradationParams sample_params(std::uint64_t seed, Task task);

struct Kernel {
    int radius = 0;
    std::vector<double> weights;  // (2r+1)^2 row-major

    int side() const { return 2 * radius + 1; }
    double at(int dy, int dx) const { return weights[(dy + radius) * side() + (dx + radius)]; }
};

/// Side 2*ceil(3*rho)+1, isotropic Gaussian, normalized to sum 1.
Kernel gaussian_kernel(double rho);

/// Convolution with reflect-101 padding.
Image gaussian_blur(const Image& img, double rho);

/// Half-pixel-centred bilinear resampling with edge clamping (no antialiasing).
Image resize_bilinear(const Image& img, int out_h, int out_w);

/// round(size / r), at least one pixel.
int downsampled_size(int size, double r);

/// Quantizes to 8 bits, adds N(0, sigma^2) in 8-bit units per sample, clamps.
Image add_noise(const Image& img, double sigma, std::uint64_t seed);

/// Baseline JPEG encode + decode at quality q (libjpeg defaults otherwise).
Image jpeg_roundtrip(const Image& img, int q);

struct DegradationStages {
    Image blurred;
    Image downsampled;
    Image noisy;
    Image compressed;
    Image output;
};

/// blur -> bilinear downsample by r -> noise -> JPEG -> bilinear resize back to output_size.
DegradationStages degrade_stages(const Image& hq, const DegradationParams& p, std::uint64_t seed,
                                 int output_size);
Image apply_degradation(const Image& hq, const DegradationParams& p, std::uint64_t seed, int output_size);

}  // namespace dmd
