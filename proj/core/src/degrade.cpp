#include "dmd/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <random>

#include <jpeglib.h>

#include "dmd/errors.hpp"

namespace dmd {

std::string_view task_name(Task t) {
    switch (t) {
    case Task::X4: return "x4";
    case Task::X8: return "x8";
    case Task::Random: return "random";
    }
    return "random";
}

Task parse_task(std::string_view name) {
    if (name == "x4") return Task::X4;
    if (name == "x8") return Task::X8;
    if (name == "random") return Task::Random;
    throw UsageError("unknown task '" + std::string(name) + "' (expected x4, x8 or random)");
}

namespace {

bool on_grid(double v, double lo, double hi, double step) {
    if (v < lo - 1e-9 || v > hi + 1e-9) {
        return false;
    }
    const double k = (v - lo) / step;
    return std::abs(k - std::round(k)) < 1e-6;
}

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

bool on_parameter_grid(const DegradationParams& p) {
    return on_grid(p.rho, 1.0, 3.0, 0.1) && on_grid(p.r, 1.0, 10.0, 0.1) && on_grid(p.sigma, 0.0, 15.0, 1.0) &&
           p.q >= 50 && p.q <= 100;
}

DegradationParams sample_params(std::uint64_t seed, Task task) {
    std::mt19937_64 rng(seed);
    auto pick = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    DegradationParams p;
    p.rho = 1.0 + 0.1 * pick(0, 20);
    const int r_index = pick(0, 90);
    p.sigma = pick(0, 15);
    p.q = pick(50, 100);
    switch (task) {
    case Task::X4: p.r = 4.0; break;
    case Task::X8: p.r = 8.0; break;
    case Task::Random: p.r = 1.0 + 0.1 * r_index; break;
    }
    return p;
}

Kernel gaussian_kernel(double rho) {
    if (!(rho > 0.0)) {
        throw std::invalid_argument("gaussian_kernel: rho must be positive");
    }
    Kernel k;
    k.radius = static_cast<int>(std::ceil(3.0 * rho));
    const int side = k.side();
    k.weights.resize(static_cast<std::size_t>(side) * side);
    double total = 0.0;
    for (int dy = -k.radius; dy <= k.radius; ++dy) {
        for (int dx = -k.radius; dx <= k.radius; ++dx) {
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * rho * rho));
            k.weights[(dy + k.radius) * side + (dx + k.radius)] = v;
            total += v;
        }
    }
    for (double& v : k.weights) {
        v /= total;
    }
    return k;
}

Image gaussian_blur(const Image& img, double rho) {
    const Kernel k = gaussian_kernel(rho);
    const int h = img.height();
    const int w = img.width();
    Image out(h, w);
    for (int c = 0; c < Image::kChannels; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int dy = -k.radius; dy <= k.radius; ++dy) {
                    const int sy = reflect101(y + dy, h);
                    for (int dx = -k.radius; dx <= k.radius; ++dx) {
                        acc += k.at(dy, dx) * img.at(c, sy, reflect101(x + dx, w));
                    }
                }
                out.at(c, y, x) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h == img.height() && out_w == img.width()) {
        return img;
    }
    struct Tap {
        int lo;
        int hi;
        double frac;
    };
    auto taps = [](int in, int out) {
        std::vector<Tap> t(out);
        const double scale = static_cast<double>(in) / out;
        for (int i = 0; i < out; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const int lo = static_cast<int>(std::floor(src));
            t[i] = {lo, std::min(lo + 1, in - 1), src - lo};
        }
        return t;
    };
    const auto ty = taps(img.height(), out_h);
    const auto tx = taps(img.width(), out_w);
    Image out(out_h, out_w);
    for (int c = 0; c < Image::kChannels; ++c) {
        for (int y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            for (int x = 0; x < out_w; ++x) {
                const auto& b = tx[x];
                const double top = (1.0 - b.frac) * img.at(c, a.lo, b.lo) + b.frac * img.at(c, a.lo, b.hi);
                const double bot = (1.0 - b.frac) * img.at(c, a.hi, b.lo) + b.frac * img.at(c, a.hi, b.hi);
                out.at(c, y, x) = static_cast<float>((1.0 - a.frac) * top + a.frac * bot);
            }
        }
    }
    return out;
}

int downsampled_size(int size, double r) {
    return std::max(1, static_cast<int>(std::lround(size / r)));
}

Image add_noise(const Image& img, double sigma, std::uint64_t seed) {
    Image out(img.height(), img.width());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma > 0.0 ? sigma : 1.0);
    auto src = img.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        double v = std::round(std::clamp(src[i], 0.0f, 1.0f) * 255.0);
        if (sigma > 0.0) {
            v += noise(rng);
        }
        dst[i] = static_cast<float>(std::clamp(v, 0.0, 255.0) / 255.0);
    }
    return out;
}

namespace {

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

std::vector<unsigned char> jpeg_encode(const std::vector<std::uint8_t>& rgb, int h, int w, int q) {
    jpeg_compress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    unsigned char* buffer = nullptr;
    unsigned long size = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        std::free(buffer);
        throw EncodeError(std::string("jpeg encode failed: ") + err.message);
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buffer, &size);
    cinfo.image_width = static_cast<JDIMENSION>(w);
    cinfo.image_height = static_cast<JDIMENSION>(h);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, q, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = const_cast<JSAMPROW>(rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * w * 3);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::vector<unsigned char> out(buffer, buffer + size);
    std::free(buffer);
    return out;
}

std::vector<std::uint8_t> jpeg_decode(const std::vector<unsigned char>& bytes, int h, int w) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw DecodeError(std::string("jpeg decode failed: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    if (static_cast<int>(cinfo.output_width) != w || static_cast<int>(cinfo.output_height) != h ||
        cinfo.output_components != 3) {
        jpeg_destroy_decompress(&cinfo);
        throw DecodeError("jpeg decode produced unexpected geometry");
    }
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return rgb;
}

}  // namespace

Image jpeg_roundtrip(const Image& img, int q) {
    if (q < 1 || q > 100) {
        throw EncodeError("jpeg quality must be in [1, 100]");
    }
    if (img.empty()) {
        throw EncodeError("cannot encode an empty image");
    }
    const auto rgb = to_rgb8(img);
    const auto bytes = jpeg_encode(rgb, img.height(), img.width(), q);
    return from_rgb8(jpeg_decode(bytes, img.height(), img.width()), img.height(), img.width());
}

DegradationStages degrade_stages(const Image& hq, const DegradationParams& p, std::uint64_t seed,
                                 int output_size) {
    DegradationStages s;
    s.blurred = gaussian_blur(hq, p.rho);
    s.downsampled = resize_bilinear(s.blurred, downsampled_size(hq.height(), p.r), downsampled_size(hq.width(), p.r));
    s.noisy = add_noise(s.downsampled, p.sigma, seed);
    s.compressed = jpeg_roundtrip(s.noisy, p.q);
    s.output = resize_bilinear(s.compressed, output_size, output_size);
    s.output.clamp();
    return s;
}

Image apply_degradation(const Image& hq, const DegradationParams& p, std::uint64_t seed, int output_size) {
    return degrade_stages(hq, p, seed, output_size).output;
}

}  // namespace dmd
