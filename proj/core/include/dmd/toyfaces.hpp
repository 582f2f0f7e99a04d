#pragma once

#include <cstdint>
#include <filesystem>

#include "dmd/image.hpp"

// Procedural aligned face crops with stable per-identity component detail.
// Used as the desk-scale corpus for tests, acceptance runs and demos.
namespace dmd::toy {

struct Grating {
    double freq = 1.0;  // cycles per unit of component-local coordinate
    double angle = 0.0;
    double phase = 0.0;
    double amp = 0.0;
};

struct IdentityStyle {
    double skin[3]{};
    double hair[3]{};
    double iris[3]{};
    double lip[3]{};
    double brow[3]{};
    double face_rx = 0.34, face_ry = 0.42, hairline = 0.22;
    double eye_dx = 0.15, eye_y = 0.42, eye_rx = 0.08, eye_ry = 0.038;
    double brow_gap = 0.035, brow_thickness = 0.018, brow_arch = 0.01;
    double nose_w = 0.05, nose_bottom = 0.60;
    double mouth_y = 0.75, mouth_w = 0.12, lip_h = 0.03;
    Grating eye_tex[2];
    Grating mouth_tex[2];
    Grating nose_tex[2];
};

struct Pose {
    double dx = 0.0, dy = 0.0, scale = 1.0;
    double eye_open = 1.0, mouth_open = 0.0;
    double light_gain = 1.0, light_dir = 0.0, light_strength = 0.0;
    double background[3]{0.5, 0.5, 0.5};
};

struct ToyFace {
    Image image;
    LandmarkSet landmarks;
};

IdentityStyle make_identity(std::uint64_t identity_seed);
IdentityStyle mean_identity();
Pose sample_pose(std::uint64_t image_seed);
Pose neutral_pose();

ToyFace render_face(const IdentityStyle& style, const Pose& pose, int size);
LandmarkSet face_landmarks(const IdentityStyle& style, const Pose& pose, int size);
LandmarkSet mean_landmarks(int size);

struct CorpusSpec {
    int identities = 80;
    int images_per_identity = 4;
    int size = 64;
    std::uint64_t seed = 1;
};

/// Writes root/id_XXXX/img_YY.png with img_YY.lm sidecars.
void write_corpus(const std::filesystem::path& root, const CorpusSpec& spec);

}  // namespace dmd::toy
