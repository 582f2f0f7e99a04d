#include "dmd/geometry.hpp"

#include <algorithm>
#include <limits>

#include "dmd/errors.hpp"
#include "dmd/toyfaces.hpp"

namespace dmd {

std::string_view component_name(Component c) {
    switch (c) {
    case Component::LeftEye: return "left_eye";
    case Component::RightEye: return "right_eye";
    case Component::Nose: return "nose";
    case Component::Mouth: return "mouth";
    }
    return "unknown";
}

CanonicalSize CanonicalSizes::at(Component c, int level, int num_levels) const {
    const auto base = coarsest[index_of(c)];
    const int factor = 1 << (num_levels - 1 - level);
    return {base.h * factor, base.w * factor};
}

LandmarkRange landmark_range(Component c) {
    switch (c) {
    case Component::LeftEye: return {36, 41};
    case Component::RightEye: return {42, 47};
    case Component::Nose: return {27, 35};
    case Component::Mouth: return {48, 67};
    }
    return {0, -1};
}

RoiSet landmarks_to_rois(const LandmarkSet& lm, int image_size, int scale_factor) {
    if (scale_factor <= 0 || image_size % scale_factor != 0) {
        throw SizeError("scale factor must divide the image size");
    }
    validate_landmarks(lm, image_size, image_size);
    const double limit = image_size;
    RoiSet rois;
    for (Component c : kComponents) {
        const auto range = landmark_range(c);
        double x0 = std::numeric_limits<double>::max(), y0 = x0;
        double x1 = std::numeric_limits<double>::lowest(), y1 = x1;
        for (int i = range.first; i <= range.last; ++i) {
            const auto& p = lm.points[i];
            x0 = std::min(x0, p.x);
            y0 = std::min(y0, p.y);
            x1 = std::max(x1, p.x);
            y1 = std::max(y1, p.y);
        }
        const double mx = 0.25 * (x1 - x0);
        const double my = 0.25 * (y1 - y0);
        Box b{std::clamp(x0 - mx, 0.0, limit), std::clamp(y0 - my, 0.0, limit),
              std::clamp(x1 + mx, 0.0, limit), std::clamp(y1 + my, 0.0, limit)};
        if (!(b.width() > 0.0 && b.height() > 0.0)) {
            throw DegenerateBoxError(std::string(component_name(c)) + " box has zero area");
        }
        const double s = scale_factor;
        rois[index_of(c)] = {c, {b.x0 / s, b.y0 / s, b.x1 / s, b.y1 / s}, scale_factor};
    }
    return rois;
}

RoiSet rescale_rois(const RoiSet& rois, int scale_factor) {
    RoiSet out = rois;
    for (auto& roi : out) {
        const double k = static_cast<double>(roi.scale_factor) / scale_factor;
        roi.box = {roi.box.x0 * k, roi.box.y0 * k, roi.box.x1 * k, roi.box.y1 * k};
        roi.scale_factor = scale_factor;
    }
    return out;
}

const std::array<int, LandmarkSet::kCount>& landmark_mirror_map() {
    static const std::array<int, LandmarkSet::kCount> map = [] {
        std::array<int, LandmarkSet::kCount> m{};
        for (int i = 0; i < LandmarkSet::kCount; ++i) {
            m[i] = i;
        }
        auto pair = [&m](int a, int b) {
            m[a] = b;
            m[b] = a;
        };
        for (int i = 0; i < 8; ++i) {
            pair(i, 16 - i);  // jaw
        }
        for (int i = 0; i < 5; ++i) {
            pair(17 + i, 26 - i);  // brows
        }
        pair(31, 35);
        pair(32, 34);
        pair(36, 45);
        pair(37, 44);
        pair(38, 43);
        pair(39, 42);
        pair(40, 47);
        pair(41, 46);
        pair(48, 54);
        pair(49, 53);
        pair(50, 52);
        pair(55, 59);
        pair(56, 58);
        pair(60, 64);
        pair(61, 63);
        pair(65, 67);
        return m;
    }();
    return map;
}

LandmarkSet template_landmarks(int image_size) {
    return toy::mean_landmarks(image_size);
}

}  // namespace dmd
