#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "dmd/image.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("dmd_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline dmd::Image random_image(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    dmd::Image img(h, w);
    for (auto& v : img.data()) v = u(rng);
    return img;
}

inline dmd::Image constant_image(int h, int w, float value) { return dmd::Image(h, w, value); }

}  // namespace testing

#include <torch/torch.h>

#include "dmd/dictionary.hpp"

namespace testing {

inline std::vector<dmd::LevelShape> small_shapes(int levels = 2, int channels = 3) {
    std::vector<dmd::LevelShape> shapes(levels);
    for (int l = 0; l < levels; ++l) {
        shapes[l].channels = channels << l;
        for (int c = 0; c < dmd::kNumComponents; ++c) shapes[l].sizes[c] = {2 + c % 2, 3};
    }
    return shapes;
}

inline dmd::DictionarySet random_set(dmd::DictKind kind, const std::vector<dmd::LevelShape>& shapes, int n,
                                     std::uint64_t seed) {
    torch::manual_seed(seed);
    dmd::DictionarySet set(kind, shapes);
    for (int l = 0; l < set.num_levels(); ++l) {
        for (dmd::Component c : dmd::kComponents) {
            auto& d = set.at(l, c);
            const auto sz = shapes[l].sizes[dmd::index_of(c)];
            d.keys = torch::randn({n, dmd::kKeyDim});
            d.values = torch::randn({n, shapes[l].channels, sz.h, sz.w});
        }
    }
    return set;
}

}  // namespace testing

#include "dmd/manifest.hpp"
#include "dmd/toyfaces.hpp"
#include "dmd/training.hpp"

namespace testing {

inline dmd::RestorerConfig tiny_model() {
    dmd::RestorerConfig c;
    c.base_channels = 4;
    c.num_scales = 2;
    c.dict_size = 3;
    c.input_size = 32;
    c.canonical.coarsest = {dmd::CanonicalSize{2, 4}, dmd::CanonicalSize{2, 4}, dmd::CanonicalSize{4, 4},
                            dmd::CanonicalSize{2, 4}};
    return c;
}

inline dmd::TrainConfig tiny_train() {
    dmd::TrainConfig c;
    c.model = tiny_model();
    c.batch_size = 2;
    c.steps_per_epoch = 2;
    c.epochs = 2;
    c.max_refs = 2;
    return c;
}

/// Toy corpus on disk split into train/val/test manifests.
struct ToySplits {
    dmd::ManifestSet manifests;
    dmd::Corpus train, val, test;
};

inline ToySplits toy_splits(const std::filesystem::path& root, int identities, int images, int size,
                            dmd::SplitCounts counts) {
    dmd::toy::write_corpus(root, {identities, images, size, 3});
    ToySplits s;
    s.manifests = dmd::build_reference_manifest(root, 0.0, counts, 5);
    s.train = dmd::Corpus::load(s.manifests.train, size);
    s.val = dmd::Corpus::load(s.manifests.val, size);
    s.test = dmd::Corpus::load(s.manifests.test, size);
    return s;
}

}  // namespace testing
