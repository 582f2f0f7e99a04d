#include "dmd/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

#include "dmd/errors.hpp"
#include "dmd/image.hpp"
#include "dmd/imagedata.hpp"

namespace fs = std::filesystem;

namespace dmd {

std::string_view split_name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw DataError("unknown split '" + std::string(name) + "'");
}

std::size_t ReferenceManifest::image_count() const {
    std::size_t n = 0;
    for (const auto& id : identities) {
        n += id.images.size();
    }
    return n;
}

const IdentityRecord* ReferenceManifest::find(std::string_view identity_id) const {
    for (const auto& id : identities) {
        if (id.identity_id == identity_id) {
            return &id;
        }
    }
    return nullptr;
}

ManifestSet build_reference_manifest(const fs::path& root, double min_sharpness, SplitCounts counts,
                                     std::uint64_t seed) {
    if (!fs::is_directory(root)) {
        throw EmptyDatasetError(root.string() + " is not a directory");
    }
    std::vector<fs::path> identity_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) {
            identity_dirs.push_back(entry.path());
        }
    }
    std::sort(identity_dirs.begin(), identity_dirs.end());

    std::vector<IdentityRecord> kept;
    for (const auto& dir : identity_dirs) {
        std::vector<fs::path> pngs;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") {
                pngs.push_back(entry.path());
            }
        }
        std::sort(pngs.begin(), pngs.end());

        IdentityRecord rec{dir.filename().string(), {}};
        for (const auto& png : pngs) {
            fs::path lm = png;
            lm.replace_extension(".lm");
            if (!fs::exists(lm)) {
                continue;
            }
            const double s = laplacian_sharpness(load_png(png));
            if (s < min_sharpness) {
                continue;
            }
            rec.images.push_back({png, lm, s});
        }
        std::stable_sort(rec.images.begin(), rec.images.end(),
                         [](const ReferenceImage& a, const ReferenceImage& b) { return a.sharpness > b.sharpness; });
        if (rec.images.size() > static_cast<std::size_t>(kMaxReferences)) {
            rec.images.resize(kMaxReferences);
        }
        if (rec.images.size() >= static_cast<std::size_t>(kMinReferences)) {
            std::sort(rec.images.begin(), rec.images.end(),
                      [](const ReferenceImage& a, const ReferenceImage& b) { return a.image_path < b.image_path; });
            kept.push_back(std::move(rec));
        }
    }
    if (kept.empty()) {
        throw EmptyDatasetError("no identity under " + root.string() + " has two usable images");
    }
    const std::size_t wanted = static_cast<std::size_t>(counts.train) + counts.val + counts.test;
    if (counts.train < 0 || counts.val < 0 || counts.test < 0 || wanted > kept.size()) {
        throw DataError("requested " + std::to_string(wanted) + " identities but only " +
                        std::to_string(kept.size()) + " are usable");
    }

    std::mt19937_64 rng(seed);
    std::shuffle(kept.begin(), kept.end(), rng);

    ManifestSet set;
    std::size_t i = 0;
    for (; i < static_cast<std::size_t>(counts.train); ++i) set.train.identities.push_back(kept[i]);
    for (; i < static_cast<std::size_t>(counts.train + counts.val); ++i) set.val.identities.push_back(kept[i]);
    for (; i < wanted; ++i) set.test.identities.push_back(kept[i]);
    check_disjoint(set);
    return set;
}

void check_disjoint(const ManifestSet& set) {
    const ReferenceManifest* parts[] = {&set.train, &set.val, &set.test};
    for (int a = 0; a < 3; ++a) {
        std::set<std::string> ids;
        for (const auto& id : parts[a]->identities) {
            ids.insert(id.identity_id);
        }
        for (int b = a + 1; b < 3; ++b) {
            for (const auto& id : parts[b]->identities) {
                if (ids.count(id.identity_id)) {
                    throw OverlapError("identity " + id.identity_id + " appears in " +
                                       std::string(split_name(parts[a]->split)) + " and " +
                                       std::string(split_name(parts[b]->split)));
                }
            }
        }
    }
}

void write_manifest(const ReferenceManifest& manifest, const fs::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw EncodeError("cannot write manifest " + path.string());
    }
    for (const auto& id : manifest.identities) {
        for (const auto& img : id.images) {
            nlohmann::ordered_json rec;
            rec["identity_id"] = id.identity_id;
            rec["split"] = split_name(manifest.split);
            rec["image_path"] = img.image_path.string();
            rec["landmark_path"] = img.landmark_path.string();
            rec["sharpness"] = img.sharpness;
            out << rec.dump() << '\n';
        }
    }
}

ReferenceManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open manifest " + path.string());
    }
    ReferenceManifest m;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed manifest line in " + path.string() + ": " + e.what());
        }
        const Split split = parse_split(rec.at("split").get<std::string>());
        if (first) {
            m.split = split;
            first = false;
        } else if (split != m.split) {
            throw DataError(path.string() + " mixes splits");
        }
        const std::string id = rec.at("identity_id").get<std::string>();
        if (m.identities.empty() || m.identities.back().identity_id != id) {
            if (m.find(id) != nullptr) {
                throw DataError(path.string() + ": identity " + id + " is not contiguous");
            }
            m.identities.push_back({id, {}});
        }
        m.identities.back().images.push_back({rec.at("image_path").get<std::string>(),
                                              rec.at("landmark_path").get<std::string>(),
                                              rec.at("sharpness").get<double>()});
    }
    if (m.identities.empty()) {
        throw EmptyDatasetError(path.string() + " has no records");
    }
    return m;
}

}  // namespace dmd
