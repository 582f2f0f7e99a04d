#include "dmd/toyfaces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace dmd::toy {

namespace {

constexpr double kPi = std::numbers::pi;

struct Rng {
    std::mt19937_64 engine;
    explicit Rng(std::uint64_t seed) : engine(seed) {}
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine); }
};

Grating random_grating(Rng& rng, double fmin, double fmax) {
    return {rng.uniform(fmin, fmax), rng.uniform(0.0, kPi), rng.uniform(0.0, 2.0 * kPi), rng.uniform(0.6, 1.0)};
}

double texture(const Grating (&g)[2], double a, double b) {
    double v = 0.0;
    double norm = 0.0;
    for (const auto& t : g) {
        v += t.amp * std::sin(2.0 * kPi * t.freq * (a * std::cos(t.angle) + b * std::sin(t.angle)) + t.phase);
        norm += t.amp;
    }
    return norm > 0.0 ? v / norm : 0.0;  // [-1, 1]
}

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

void blend(double (&dst)[3], const double (&src)[3], double alpha) {
    for (int c = 0; c < 3; ++c) {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

// Face-frame geometry shared by the renderer and the landmark generator.
struct Layout {
    double cx = 0.5, cy = 0.52;
    double eye_lx, eye_rx_pos, eye_y, eye_rx, eye_ry;
    double mouth_y, mouth_w, lip_h, open;
};

Layout layout(const IdentityStyle& s, const Pose& p) {
    Layout l;
    l.eye_lx = 0.5 - s.eye_dx;
    l.eye_rx_pos = 0.5 + s.eye_dx;
    l.eye_y = s.eye_y;
    l.eye_rx = s.eye_rx;
    l.eye_ry = s.eye_ry * p.eye_open;
    l.mouth_y = s.mouth_y;
    l.mouth_w = s.mouth_w;
    l.lip_h = s.lip_h;
    l.open = p.mouth_open;
    return l;
}

}  // namespace

IdentityStyle make_identity(std::uint64_t identity_seed) {
    Rng rng(identity_seed * 0x9E3779B97F4A7C15ULL + 17);
    IdentityStyle s;
    const double tone = rng.uniform(0.45, 0.92);
    s.skin[0] = tone;
    s.skin[1] = tone * rng.uniform(0.68, 0.86);
    s.skin[2] = s.skin[1] * rng.uniform(0.65, 0.92);
    const double hair = rng.uniform(0.05, 0.55);
    s.hair[0] = hair;
    s.hair[1] = hair * rng.uniform(0.6, 0.95);
    s.hair[2] = s.hair[1] * rng.uniform(0.5, 0.9);
    for (double& c : s.iris) c = rng.uniform(0.1, 0.8);
    s.lip[0] = rng.uniform(0.55, 0.9);
    s.lip[1] = rng.uniform(0.15, 0.45);
    s.lip[2] = rng.uniform(0.15, 0.45);
    const double brow = rng.uniform(0.05, 0.4);
    s.brow[0] = brow;
    s.brow[1] = brow * 0.85;
    s.brow[2] = brow * 0.7;
    s.face_rx = rng.uniform(0.30, 0.37);
    s.face_ry = rng.uniform(0.38, 0.45);
    s.hairline = rng.uniform(0.16, 0.26);
    s.eye_dx = rng.uniform(0.13, 0.17);
    s.eye_y = rng.uniform(0.40, 0.44);
    s.eye_rx = rng.uniform(0.07, 0.095);
    s.eye_ry = rng.uniform(0.032, 0.046);
    s.brow_gap = rng.uniform(0.025, 0.045);
    s.brow_thickness = rng.uniform(0.012, 0.026);
    s.brow_arch = rng.uniform(0.0, 0.02);
    s.nose_w = rng.uniform(0.04, 0.065);
    s.nose_bottom = rng.uniform(0.58, 0.63);
    s.mouth_y = rng.uniform(0.72, 0.78);
    s.mouth_w = rng.uniform(0.10, 0.14);
    s.lip_h = rng.uniform(0.025, 0.04);
    s.eye_tex[0] = random_grating(rng, 0.8, 1.6);
    s.eye_tex[1] = random_grating(rng, 2.0, 3.5);
    s.mouth_tex[0] = random_grating(rng, 0.8, 1.6);
    s.mouth_tex[1] = random_grating(rng, 2.0, 3.5);
    s.nose_tex[0] = random_grating(rng, 0.6, 1.2);
    s.nose_tex[1] = random_grating(rng, 1.5, 2.5);
    return s;
}

IdentityStyle mean_identity() {
    IdentityStyle s;
    for (int c = 0; c < 3; ++c) {
        s.skin[c] = 0.65 - 0.1 * c;
        s.hair[c] = 0.3 - 0.05 * c;
        s.iris[c] = 0.45;
        s.lip[c] = c == 0 ? 0.72 : 0.3;
        s.brow[c] = 0.2;
    }
    s.face_rx = 0.335;
    s.face_ry = 0.415;
    s.hairline = 0.21;
    s.eye_dx = 0.15;
    s.eye_y = 0.42;
    s.eye_rx = 0.0825;
    s.eye_ry = 0.039;
    s.nose_w = 0.0525;
    s.nose_bottom = 0.605;
    s.mouth_y = 0.75;
    s.mouth_w = 0.12;
    s.lip_h = 0.0325;
    return s;
}

Pose sample_pose(std::uint64_t image_seed) {
    Rng rng(image_seed * 0xD1B54A32D192ED03ULL + 5);
    Pose p;
    p.dx = rng.uniform(-0.025, 0.025);
    p.dy = rng.uniform(-0.025, 0.025);
    p.scale = rng.uniform(0.96, 1.04);
    p.eye_open = rng.uniform(0.85, 1.1);
    p.mouth_open = rng.uniform(0.0, 0.025);
    p.light_gain = rng.uniform(0.88, 1.12);
    p.light_dir = rng.uniform(0.0, 2.0 * kPi);
    p.light_strength = rng.uniform(0.0, 0.12);
    const double bg = rng.uniform(0.2, 0.9);
    p.background[0] = bg * rng.uniform(0.8, 1.0);
    p.background[1] = bg * rng.uniform(0.8, 1.0);
    p.background[2] = bg * rng.uniform(0.8, 1.0);
    return p;
}

Pose neutral_pose() {
    return Pose{};
}

LandmarkSet face_landmarks(const IdentityStyle& s, const Pose& p, int size) {
    const Layout l = layout(s, p);
    LandmarkSet lm;
    auto put = [&](int i, double fu, double fv) {
        const double u = (fu - 0.5) * p.scale + 0.5 + p.dx;
        const double v = (fv - 0.5) * p.scale + 0.5 + p.dy;
        lm.points[i] = {std::clamp(u * size, 0.0, static_cast<double>(size)),
                        std::clamp(v * size, 0.0, static_cast<double>(size))};
    };
    for (int i = 0; i <= 16; ++i) {
        const double th = kPi - i * kPi / 16.0;
        put(i, l.cx + s.face_rx * std::cos(th), l.cy + s.face_ry * std::sin(th) * 0.95 + 0.02);
    }
    const double brow_y = l.eye_y - s.eye_ry - s.brow_gap;
    for (int k = 0; k < 5; ++k) {
        const double t = -1.1 + k * 0.55;  // outer -> inner for the left brow
        put(17 + k, l.eye_lx + t * l.eye_rx, brow_y - s.brow_arch * (1.0 - t * t / 1.21));
        put(26 - k, l.eye_rx_pos - t * l.eye_rx, brow_y - s.brow_arch * (1.0 - t * t / 1.21));
    }
    for (int k = 0; k < 4; ++k) {
        put(27 + k, 0.5, l.eye_y + (s.nose_bottom - 0.02 - l.eye_y) * k / 3.0);
    }
    for (int k = 0; k < 5; ++k) {
        const double t = -1.0 + k * 0.5;
        put(31 + k, 0.5 + t * s.nose_w, s.nose_bottom + 0.01 * (1.0 - std::abs(t)));
    }
    const double ey = 0.943 * l.eye_ry;
    // left eye: 36 outer corner, 39 inner corner
    put(36, l.eye_lx - l.eye_rx, l.eye_y);
    put(37, l.eye_lx - l.eye_rx / 3.0, l.eye_y - ey);
    put(38, l.eye_lx + l.eye_rx / 3.0, l.eye_y - ey);
    put(39, l.eye_lx + l.eye_rx, l.eye_y);
    put(40, l.eye_lx + l.eye_rx / 3.0, l.eye_y + ey);
    put(41, l.eye_lx - l.eye_rx / 3.0, l.eye_y + ey);
    // right eye: 42 inner corner, 45 outer corner
    put(42, l.eye_rx_pos - l.eye_rx, l.eye_y);
    put(43, l.eye_rx_pos - l.eye_rx / 3.0, l.eye_y - ey);
    put(44, l.eye_rx_pos + l.eye_rx / 3.0, l.eye_y - ey);
    put(45, l.eye_rx_pos + l.eye_rx, l.eye_y);
    put(46, l.eye_rx_pos + l.eye_rx / 3.0, l.eye_y + ey);
    put(47, l.eye_rx_pos - l.eye_rx / 3.0, l.eye_y + ey);
    const double top = l.lip_h + 0.5 * l.open;
    for (int k = 0; k <= 6; ++k) {
        const double th = kPi - k * kPi / 6.0;
        put(48 + k, 0.5 + l.mouth_w * std::cos(th), l.mouth_y - top * std::sin(th));
    }
    for (int k = 1; k <= 5; ++k) {
        const double th = k * kPi / 6.0;
        put(54 + k, 0.5 + l.mouth_w * std::cos(th), l.mouth_y + top * std::sin(th));
    }
    const double iw = 0.8 * l.mouth_w;
    const double io = 0.5 * l.open;
    put(60, 0.5 - iw, l.mouth_y);
    put(61, 0.5 - 0.5 * iw, l.mouth_y - io);
    put(62, 0.5, l.mouth_y - io);
    put(63, 0.5 + 0.5 * iw, l.mouth_y - io);
    put(64, 0.5 + iw, l.mouth_y);
    put(65, 0.5 + 0.5 * iw, l.mouth_y + io);
    put(66, 0.5, l.mouth_y + io);
    put(67, 0.5 - 0.5 * iw, l.mouth_y + io);
    return lm;
}

LandmarkSet mean_landmarks(int size) {
    return face_landmarks(mean_identity(), neutral_pose(), size);
}

namespace {

void shade(const IdentityStyle& s, const Pose& p, const Layout& l, double fu, double fv, double (&out)[3]) {
    for (int c = 0; c < 3; ++c) {
        out[c] = p.background[c] * (0.9 + 0.2 * fv);
    }
    // hair mass behind the face
    {
        const double a = (fu - l.cx) / (s.face_rx + 0.05);
        const double b = (fv - l.cy + 0.04) / (s.face_ry + 0.05);
        const double r = a * a + b * b;
        if (r < 1.0 && fv < l.cy + 0.1) {
            blend(out, s.hair, smoothstep(1.0, 0.9, r));
        }
    }
    // face ellipse
    const double fa = (fu - l.cx) / s.face_rx;
    const double fb = (fv - l.cy) / s.face_ry;
    const double fr = fa * fa + fb * fb;
    if (fr < 1.05) {
        double skin[3];
        const double shading = 1.0 - 0.18 * fr;
        for (int c = 0; c < 3; ++c) skin[c] = s.skin[c] * shading;
        blend(out, skin, smoothstep(1.05, 0.95, fr));
        if (fv < s.hairline + 0.04 * fa * fa) {
            blend(out, s.hair, smoothstep(s.hairline + 0.04 * fa * fa, s.hairline - 0.02 + 0.04 * fa * fa, fv));
        }
    }
    // brows
    const double brow_y = l.eye_y - s.eye_ry - s.brow_gap;
    for (int side = 0; side < 2; ++side) {
        const double ex = side == 0 ? l.eye_lx : l.eye_rx_pos;
        const double t = (fu - ex) / (1.1 * l.eye_rx);
        if (std::abs(t) < 1.0) {
            const double centre = brow_y - s.brow_arch * (1.0 - t * t);
            const double d = std::abs(fv - centre) / s.brow_thickness;
            if (d < 1.0) {
                blend(out, s.brow, smoothstep(1.0, 0.6, d) * smoothstep(1.0, 0.8, std::abs(t)));
            }
        }
    }
    // eyes: sclera, textured iris, pupil, lid line
    for (int side = 0; side < 2; ++side) {
        const double ex = side == 0 ? l.eye_lx : l.eye_rx_pos;
        const double a = (fu - ex) / l.eye_rx * (side == 0 ? 1.0 : -1.0);
        const double b = (fv - l.eye_y) / l.eye_ry;
        const double r = a * a + b * b;
        if (r < 1.15) {
            const double lid[3] = {0.12, 0.08, 0.07};
            blend(out, lid, smoothstep(1.15, 1.0, r));
            if (r < 1.0) {
                const double sclera[3] = {0.93, 0.92, 0.9};
                blend(out, sclera, smoothstep(1.0, 0.85, r));
                const double ia = (fu - ex) / l.eye_ry;
                const double ir = std::sqrt(ia * ia + b * b);
                if (ir < 1.1) {
                    const double t = texture(s.eye_tex, a, b);
                    double iris[3];
                    for (int c = 0; c < 3; ++c) iris[c] = std::clamp(s.iris[c] * (1.0 + 0.6 * t), 0.0, 1.0);
                    blend(out, iris, smoothstep(1.1, 0.95, ir) * smoothstep(1.0, 0.85, r));
                    if (ir < 0.4) {
                        const double pupil[3] = {0.03, 0.03, 0.04};
                        blend(out, pupil, smoothstep(0.4, 0.3, ir));
                    }
                }
            }
        }
    }
    // nose: shaded bridge, textured tip, nostrils
    {
        const double a = (fu - 0.5) / s.nose_w;
        const double b = (fv - (l.eye_y + s.nose_bottom) * 0.5) / ((s.nose_bottom - l.eye_y) * 0.5);
        if (std::abs(a) < 1.3 && b > -1.0 && b < 1.2) {
            const double t = texture(s.nose_tex, a, b);
            const double side_shadow = smoothstep(0.3, 1.0, std::abs(a)) * smoothstep(1.3, 1.0, std::abs(a));
            const double k = (1.0 - 0.25 * side_shadow) * (1.0 + 0.22 * t * smoothstep(-1.0, -0.2, b));
            for (double& c : out) c = std::clamp(c * k, 0.0, 1.0);
        }
        for (int side = -1; side <= 1; side += 2) {
            const double na = (fu - (0.5 + side * 0.55 * s.nose_w)) / (0.32 * s.nose_w);
            const double nb = (fv - s.nose_bottom) / (0.012);
            const double r = na * na + nb * nb;
            if (r < 1.0) {
                const double nostril[3] = {0.15, 0.07, 0.06};
                blend(out, nostril, smoothstep(1.0, 0.5, r) * 0.85);
            }
        }
    }
    // mouth: textured lips and an opening
    {
        const double top = l.lip_h + 0.5 * l.open;
        const double a = (fu - 0.5) / l.mouth_w;
        const double b = (fv - l.mouth_y) / top;
        const double r = a * a + b * b;
        if (r < 1.0) {
            const double t = texture(s.mouth_tex, a, b);
            double lip[3];
            for (int c = 0; c < 3; ++c) lip[c] = std::clamp(s.lip[c] * (1.0 + 0.5 * t), 0.0, 1.0);
            blend(out, lip, smoothstep(1.0, 0.8, r));
            const double ia = (fu - 0.5) / (0.8 * l.mouth_w);
            const double ib = (fv - l.mouth_y) / std::max(0.004, 0.5 * l.open + 0.003);
            const double ir = ia * ia + ib * ib;
            if (ir < 1.0) {
                const double inner[3] = {0.18, 0.04, 0.05};
                blend(out, inner, smoothstep(1.0, 0.6, ir));
            }
        }
    }
    const double lx = std::cos(p.light_dir) * (fu - 0.5) + std::sin(p.light_dir) * (fv - 0.5);
    const double gain = p.light_gain * (1.0 + p.light_strength * 2.0 * lx);
    for (double& c : out) c = std::clamp(c * gain, 0.0, 1.0);
}

}  // namespace

ToyFace render_face(const IdentityStyle& s, const Pose& p, int size) {
    const Layout l = layout(s, p);
    ToyFace face{Image(size, size), face_landmarks(s, p, size)};
    constexpr int kSuper = 3;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double acc[3] = {0.0, 0.0, 0.0};
            for (int sy = 0; sy < kSuper; ++sy) {
                for (int sx = 0; sx < kSuper; ++sx) {
                    const double u = (x + (sx + 0.5) / kSuper) / size;
                    const double v = (y + (sy + 0.5) / kSuper) / size;
                    const double fu = (u - 0.5 - p.dx) / p.scale + 0.5;
                    const double fv = (v - 0.5 - p.dy) / p.scale + 0.5;
                    double px[3];
                    shade(s, p, l, fu, fv, px);
                    for (int c = 0; c < 3; ++c) acc[c] += px[c];
                }
            }
            for (int c = 0; c < 3; ++c) {
                face.image.at(c, y, x) = static_cast<float>(acc[c] / (kSuper * kSuper));
            }
        }
    }
    return face;
}

void write_corpus(const std::filesystem::path& root, const CorpusSpec& spec) {
    std::filesystem::create_directories(root);
    for (int id = 0; id < spec.identities; ++id) {
        char name[32];
        std::snprintf(name, sizeof(name), "id_%04d", id);
        const auto dir = root / name;
        std::filesystem::create_directories(dir);
        const std::uint64_t id_seed = spec.seed * 1000003ULL + static_cast<std::uint64_t>(id);
        const IdentityStyle style = make_identity(id_seed);
        for (int k = 0; k < spec.images_per_identity; ++k) {
            const Pose pose = sample_pose(id_seed * 131ULL + static_cast<std::uint64_t>(k));
            const ToyFace face = render_face(style, pose, spec.size);
            char file[32];
            std::snprintf(file, sizeof(file), "img_%02d", k);
            save_png(face.image, dir / (std::string(file) + ".png"));
            save_landmarks(face.landmarks, dir / (std::string(file) + ".lm"));
        }
    }
}

}  // namespace dmd::toy
