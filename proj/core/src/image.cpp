#include "dmd/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <png.h>
#include <torch/torch.h>

#include "dmd/errors.hpp"

namespace dmd {

Image::Image(int height, int width, float fill)
    : height_(height), width_(width),
      data_(static_cast<std::size_t>(kChannels) * height * width, fill) {
    if (height <= 0 || width <= 0) {
        throw SizeError("image dimensions must be positive");
    }
}

void Image::clamp() {
    for (float& v : data_) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
}

std::vector<double> grayscale(const Image& img) {
    std::vector<double> gray(img.plane_size());
    auto r = img.plane(0);
    auto g = img.plane(1);
    auto b = img.plane(2);
    for (std::size_t i = 0; i < gray.size(); ++i) {
        gray[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    }
    return gray;
}

torch::Tensor to_tensor(const Image& img) {
    auto t = torch::empty({Image::kChannels, img.height(), img.width()}, torch::kFloat32);
    std::copy(img.data().begin(), img.data().end(), t.data_ptr<float>());
    return t;
}

Image from_tensor(const torch::Tensor& chw) {
    if (chw.dim() != 3 || chw.size(0) != Image::kChannels) {
        throw ShapeMismatchError("expected a [3,H,W] tensor");
    }
    auto t = chw.detach().to(torch::kCPU, torch::kFloat32).clamp(0.0, 1.0).contiguous();
    Image img(static_cast<int>(t.size(1)), static_cast<int>(t.size(2)));
    std::copy_n(t.data_ptr<float>(), img.numel(), img.data().begin());
    return img;
}

torch::Tensor stack_images(std::span<const Image> images) {
    std::vector<torch::Tensor> ts;
    ts.reserve(images.size());
    for (const auto& img : images) {
        ts.push_back(to_tensor(img));
    }
    return torch::stack(ts);
}

std::vector<std::uint8_t> to_rgb8(const Image& img) {
    std::vector<std::uint8_t> out(img.numel());
    const std::size_t n = img.plane_size();
    for (int c = 0; c < Image::kChannels; ++c) {
        auto p = img.plane(c);
        for (std::size_t i = 0; i < n; ++i) {
            const float v = std::clamp(p[i], 0.0f, 1.0f);
            out[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
    return out;
}

Image from_rgb8(std::span<const std::uint8_t> rgb, int height, int width) {
    Image img(height, width);
    const std::size_t n = img.plane_size();
    if (rgb.size() != n * 3) {
        throw SizeError("rgb buffer does not match image size");
    }
    for (int c = 0; c < Image::kChannels; ++c) {
        auto p = img.plane(c);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = static_cast<float>(rgb[i * 3 + c]) / 255.0f;
        }
    }
    return img;
}

Image load_png(const std::filesystem::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str())) {
        throw DecodeError("cannot decode " + path.string() + ": " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw DecodeError("cannot decode " + path.string() + ": " + msg);
    }
    return from_rgb8(buffer, static_cast<int>(png.height), static_cast<int>(png.width));
}

void save_png(const Image& img, const std::filesystem::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width());
    png.height = static_cast<png_uint_32>(img.height());
    png.format = PNG_FORMAT_RGB;
    const auto rgb = to_rgb8(img);
    if (!png_image_write_to_file(&png, path.c_str(), 0, rgb.data(), 0, nullptr)) {
        throw EncodeError("cannot write " + path.string() + ": " + png.message);
    }
}

Image load_aligned_image(const std::filesystem::path& path, int expected_size) {
    Image img = load_png(path);
    if (img.height() != expected_size || img.width() != expected_size) {
        throw SizeError(path.string() + " is " + std::to_string(img.width()) + "x" +
                        std::to_string(img.height()) + ", expected " +
                        std::to_string(expected_size) + "x" + std::to_string(expected_size));
    }
    return img;
}

LandmarkSet load_landmarks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DecodeError("cannot open landmark file " + path.string());
    }
    LandmarkSet lm;
    std::string line;
    int count = 0;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        if (count >= LandmarkSet::kCount) {
            throw DecodeError(path.string() + ": more than 68 landmarks");
        }
        std::istringstream ls(line);
        Point p;
        if (!(ls >> p.x >> p.y)) {
            throw DecodeError(path.string() + ": malformed landmark line '" + line + "'");
        }
        lm.points[count++] = p;
    }
    if (count != LandmarkSet::kCount) {
        throw DecodeError(path.string() + ": expected 68 landmarks, got " + std::to_string(count));
    }
    return lm;
}

void save_landmarks(const LandmarkSet& lm, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw EncodeError("cannot write landmark file " + path.string());
    }
    out.precision(17);
    for (const auto& p : lm.points) {
        out << p.x << ' ' << p.y << '\n';
    }
}

void validate_landmarks(const LandmarkSet& lm, int width, int height) {
    for (std::size_t i = 0; i < lm.points.size(); ++i) {
        const auto& p = lm.points[i];
        if (!(p.x >= 0.0 && p.x <= width && p.y >= 0.0 && p.y <= height)) {
            throw BoundsError("landmark " + std::to_string(i) + " outside image bounds");
        }
    }
}

}  // namespace dmd
