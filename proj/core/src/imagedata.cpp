#include "dmd/imagedata.hpp"

#include <algorithm>
#include <random>

#include "dmd/geometry.hpp"

namespace dmd {

namespace {

int reflect101(int i, int n) {
    if (n == 1) {
        return 0;
    }
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) {
        i += period;
    }
    return i < n ? i : period - i;
}

}  // namespace

double laplacian_sharpness(const Image& img) {
    const auto gray = grayscale(img);
    const int h = img.height();
    const int w = img.width();
    auto px = [&](int y, int x) { return gray[static_cast<std::size_t>(reflect101(y, h)) * w + reflect101(x, w)]; };
    double sum = 0.0;
    double sum_sq = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double lap = px(y - 1, x) + px(y + 1, x) + px(y, x - 1) + px(y, x + 1) - 4.0 * px(y, x);
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    const double n = static_cast<double>(h) * w;
    const double mean = sum / n;
    return std::max(0.0, sum_sq / n - mean * mean);
}

AugmentParams sample_augment(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    AugmentParams p;
    p.flip = std::bernoulli_distribution(0.5)(rng);
    p.brightness = jitter(rng);
    p.contrast = jitter(rng);
    p.saturation = jitter(rng);
    return p;
}

Image flip_horizontal(const Image& img) {
    Image out(img.height(), img.width());
    for (int c = 0; c < Image::kChannels; ++c) {
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x) {
                out.at(c, y, x) = img.at(c, y, img.width() - 1 - x);
            }
        }
    }
    return out;
}

LandmarkSet flip_landmarks(const LandmarkSet& lm, int width) {
    const auto& mirror = landmark_mirror_map();
    LandmarkSet out;
    for (int i = 0; i < LandmarkSet::kCount; ++i) {
        const auto& p = lm.points[mirror[i]];
        out.points[i] = {static_cast<double>(width) - p.x, p.y};
    }
    return out;
}

Image color_jitter(const Image& img, double brightness, double contrast, double saturation) {
    Image out = img;
    if (brightness != 1.0) {
        for (float& v : out.data()) {
            v = static_cast<float>(v * brightness);
        }
        out.clamp();
    }
    if (contrast != 1.0) {
        const auto gray = grayscale(out);
        double mean = 0.0;
        for (double g : gray) {
            mean += g;
        }
        mean /= static_cast<double>(gray.size());
        for (float& v : out.data()) {
            v = static_cast<float>((v - mean) * contrast + mean);
        }
        out.clamp();
    }
    if (saturation != 1.0) {
        const auto gray = grayscale(out);
        for (int c = 0; c < Image::kChannels; ++c) {
            auto p = out.plane(c);
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] = static_cast<float>((p[i] - gray[i]) * saturation + gray[i]);
            }
        }
        out.clamp();
    }
    return out;
}

std::pair<Image, LandmarkSet> augment_with(const Image& img, const LandmarkSet& lm,
                                           const AugmentParams& params) {
    Image out = params.flip ? flip_horizontal(img) : img;
    LandmarkSet out_lm = params.flip ? flip_landmarks(lm, img.width()) : lm;
    out = color_jitter(out, params.brightness, params.contrast, params.saturation);
    return {std::move(out), out_lm};
}

std::pair<Image, LandmarkSet> augment(const Image& img, const LandmarkSet& lm, std::uint64_t seed) {
    return augment_with(img, lm, sample_augment(seed));
}

}  // namespace dmd
