#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/types.h>

namespace dmd {

/// Three-channel planar image with intensities in [0,1].
class Image {
public:
    static constexpr int kChannels = 3;

    Image() = default;
    Image(int height, int width, float fill = 0.0f);

    int height() const { return height_; }
    int width() const { return width_; }
    bool empty() const { return data_.empty(); }
    std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }
    std::size_t numel() const { return data_.size(); }

    float& at(int c, int y, int x) { return data_[(c * plane_size()) + static_cast<std::size_t>(y) * width_ + x]; }
    float at(int c, int y, int x) const { return data_[(c * plane_size()) + static_cast<std::size_t>(y) * width_ + x]; }

    std::span<float> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<const float> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    void clamp();

    bool operator==(const Image&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

/// Luma with weights 0.299/0.587/0.114, row-major H*W.
std::vector<double> grayscale(const Image& img);

torch::Tensor to_tensor(const Image& img);  // [3,H,W] float32
Image from_tensor(const torch::Tensor& chw);  // clamps into [0,1]
torch::Tensor stack_images(std::span<const Image> images);  // [B,3,H,W]

Image load_png(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);

/// Loads a pre-aligned face crop. Throws DecodeError / SizeError.
Image load_aligned_image(const std::filesystem::path& path, int expected_size);

/// 8-bit quantized view, interleaved RGB.
std::vector<std::uint8_t> to_rgb8(const Image& img);
Image from_rgb8(std::span<const std::uint8_t> rgb, int height, int width);

struct Point {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const Point&) const = default;
};

/// 68-point landmarks in continuous pixel coordinates (pixel i spans [i, i+1)).
struct LandmarkSet {
    static constexpr int kCount = 68;
    std::array<Point, kCount> points{};
    bool operator==(const LandmarkSet&) const = default;
};

LandmarkSet load_landmarks(const std::filesystem::path& path);
void save_landmarks(const LandmarkSet& lm, const std::filesystem::path& path);

/// Throws BoundsError when any point falls outside [0,width]x[0,height].
void validate_landmarks(const LandmarkSet& lm, int width, int height);

}  // namespace dmd
