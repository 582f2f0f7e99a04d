#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dmd {

enum class Split { Train, Val, Test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

inline constexpr int kMinReferences = 2;
inline constexpr int kMaxReferences = 21;

struct ReferenceImage {
    std::filesystem::path image_path;
    std::filesystem::path landmark_path;
    double sharpness = 0.0;
};

struct IdentityRecord {
    std::string identity_id;
    std::vector<ReferenceImage> images;
};

struct ReferenceManifest {
    Split split = Split::Train;
    std::vector<IdentityRecord> identities;

    std::size_t image_count() const;
    const IdentityRecord* find(std::string_view identity_id) const;
};

struct SplitCounts {
    int train = 0;
    int val = 0;
    int test = 0;
};

struct ManifestSet {
    ReferenceManifest train{Split::Train, {}};
    ReferenceManifest val{Split::Val, {}};
    ReferenceManifest test{Split::Test, {}};
};

/// Scans root/<identity>/<name>.png with <name>.lm sidecars. Images below
/// min_sharpness are dropped, each identity keeps its 21 sharpest images and
/// identities with fewer than two survivors are excluded. Whole identities are
/// assigned to splits after a seeded shuffle.
ManifestSet build_reference_manifest(const std::filesystem::path& root, double min_sharpness,
                                     SplitCounts counts, std::uint64_t seed);

/// Throws OverlapError when an identity appears in two splits.
void check_disjoint(const ManifestSet& set);

/// One JSON object per line, fields in the order
/// identity_id, split, image_path, landmark_path, sharpness.
void write_manifest(const ReferenceManifest& manifest, const std::filesystem::path& path);
ReferenceManifest read_manifest(const std::filesystem::path& path);

}  // namespace dmd
