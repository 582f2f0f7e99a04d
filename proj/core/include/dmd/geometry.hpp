#pragma once

#include <array>
#include <string_view>

#include "dmd/image.hpp"

namespace dmd {

enum class Component : int { LeftEye = 0, RightEye = 1, Nose = 2, Mouth = 3 };

inline constexpr int kNumComponents = 4;
inline constexpr std::array<Component, kNumComponents> kComponents = {
    Component::LeftEye, Component::RightEye, Component::Nose, Component::Mouth};

std::string_view component_name(Component c);
inline int index_of(Component c) { return static_cast<int>(c); }

struct Box {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    bool operator==(const Box&) const = default;
};

struct CanonicalSize {
    int h = 0;
    int w = 0;
    bool operator==(const CanonicalSize&) const = default;
};

/// Per-component RoIAlign output sizes. Sizes are given at the coarsest level
/// and double for every finer level.
struct CanonicalSizes {
    std::array<CanonicalSize, kNumComponents> coarsest = {
        CanonicalSize{8, 16}, CanonicalSize{8, 16}, CanonicalSize{16, 16}, CanonicalSize{8, 16}};

    /// level 0 is the finest feature level; num_levels-1 the coarsest.
    CanonicalSize at(Component c, int level, int num_levels) const;
};

/// Box of one component in the coordinates of a feature map downscaled by
/// scale_factor from the aligned image.
struct ComponentROI {
    Component component = Component::LeftEye;
    Box box;
    int scale_factor = 1;
};

using RoiSet = std::array<ComponentROI, kNumComponents>;

/// Landmark index ranges (inclusive) of the 68-point convention.
struct LandmarkRange {
    int first;
    int last;
};
LandmarkRange landmark_range(Component c);

/// Tight box of the component's landmarks grown by 25% per side, clipped to the
/// image and divided by scale_factor. Throws DegenerateBoxError on zero area.
RoiSet landmarks_to_rois(const LandmarkSet& lm, int image_size, int scale_factor);

/// Same boxes rescaled to another feature scale.
RoiSet rescale_rois(const RoiSet& rois, int scale_factor);

/// Mirror partner of every landmark index under a horizontal flip.
const std::array<int, LandmarkSet::kCount>& landmark_mirror_map();

/// Mean toy-face landmarks, used when no landmark file is available.
LandmarkSet template_landmarks(int image_size);

}  // namespace dmd
