#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dmd/dictionary.hpp"
#include "dmd/geometry.hpp"
#include "dmd/image.hpp"
#include "dmd/transform.hpp"

namespace dmd {

struct RestorerConfig {
    int base_channels = 32;
    int num_scales = 3;
    int dict_size = 16;  // Y; 0 disables every dictionary path
    int input_size = 64;
    CanonicalSizes canonical;
    int transform_count = -1;  // modules in decoder order (coarsest first); -1 = all
    bool use_generic = true;
    bool use_specific = true;
    ReadMode read_mode = ReadMode::Attention;

    bool dictionaries_enabled() const { return dict_size > 0; }
    /// C * 2^level, doubled when dictionaries are disabled.
    int channels_at(int level) const;
    /// Downscaling of feature level l relative to the image: 2^(l+1).
    int scale_factor(int level) const { return 1 << (level + 1); }
    int active_transforms() const;
    bool transform_active(int level) const;
    std::vector<LevelShape> level_shapes() const;
    /// Throws SizeError for inconsistent settings.
    void validate() const;
};

std::string config_to_json(const RestorerConfig& config);
RestorerConfig config_from_json(const std::string& text);

/// Strided-convolution encoder: full-resolution stem then one stride-2 stage per level.
struct EncoderImpl : torch::nn::Module {
    explicit EncoderImpl(const RestorerConfig& config);
    /// Level 0 first (finest).
    std::vector<torch::Tensor> forward(const torch::Tensor& x);

    torch::nn::Conv2d stem{nullptr};
    std::vector<torch::nn::Conv2d> down;
    std::vector<torch::nn::Conv2d> refine;
};
TORCH_MODULE(Encoder);

/// ROIs of every sample at every feature level.
std::vector<std::vector<RoiSet>> feature_rois(const RestorerConfig& config, std::span<const LandmarkSet> landmarks);

struct RestoreBatch {
    torch::Tensor lq;  // [B,3,H,W]
    std::span<const LandmarkSet> landmarks;
    const DictionarySet* generic = nullptr;
    std::span<const DictionarySet* const> specific;  // empty or one slot per sample
};

/// U-Net whose skip connections pass through dictionary transform modules
/// and enter the decoder through SFT modulation. Output in [0,1].
struct RestorerImpl : torch::nn::Module {
    explicit RestorerImpl(const RestorerConfig& config);
    torch::Tensor forward(const RestoreBatch& batch, ReadTrace* trace = nullptr);

    RestorerConfig config;
    Encoder encoder{nullptr};
    torch::nn::Conv2d bottleneck1{nullptr}, bottleneck2{nullptr};
    std::vector<DictionaryTransform> transforms;  // per level, null when inactive
    std::vector<SFTHead> sft;
    std::vector<torch::nn::Conv2d> decode;
    std::vector<torch::nn::Conv2d> up;
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(Restorer);

/// Encoder clone plus one key head per (level, component).
struct FeatureExtractorImpl : torch::nn::Module {
    explicit FeatureExtractorImpl(const RestorerConfig& config);
    /// One entry per image, in input order.
    DictionarySet extract(const torch::Tensor& images, std::span<const LandmarkSet> landmarks, DictKind kind);

    RestorerConfig config;
    Encoder encoder{nullptr};
    std::vector<torch::nn::Linear> key_heads;  // level * 4 + component
};
TORCH_MODULE(FeatureExtractor);

/// Generic entries from Y images of Y distinct identities. Throws IdentityCollisionError.
DictionarySet init_generic(FeatureExtractor& extractor, const torch::Tensor& images,
                           std::span<const LandmarkSet> landmarks, std::span<const std::string> identities);

/// Specific entries from 0..21 references of one identity. Throws TooManyRefsError.
DictionarySet build_specific(FeatureExtractor& extractor, const torch::Tensor& images,
                             std::span<const LandmarkSet> landmarks);

/// Conv2d whose weight is divided by a power-iteration estimate of its
/// largest singular value.
struct SNConv2dImpl : torch::nn::Module {
    SNConv2dImpl(int in, int out, int kernel, int stride, int padding);
    torch::Tensor forward(const torch::Tensor& x);
    torch::Tensor normalized_weight();

    torch::Tensor weight, bias, u;
    int stride, padding;
};
TORCH_MODULE(SNConv2d);

/// Four spectrally normalized convolutions; the score is the spatial mean of the last map.
struct DiscriminatorImpl : torch::nn::Module {
    DiscriminatorImpl();
    torch::Tensor forward(const torch::Tensor& x);  // [B]

    std::vector<SNConv2d> layers;
};
TORCH_MODULE(Discriminator);

inline constexpr std::array<int, 3> kDiscriminatorScales = {1, 2, 4};

struct MultiScaleDiscriminatorImpl : torch::nn::Module {
    MultiScaleDiscriminatorImpl();
    /// Scores of the r = 1, 2, 4 discriminators on the image downsampled by r.
    std::array<torch::Tensor, 3> forward(const torch::Tensor& images);
    torch::Tensor discriminate(const torch::Tensor& images, int r);

    std::array<Discriminator, 3> nets{nullptr, nullptr, nullptr};
};
TORCH_MODULE(MultiScaleDiscriminator);

/// Copies parameters and buffers of src into dst; both must share an architecture.
void copy_module_state(torch::nn::Module& src, torch::nn::Module& dst);

/// Every trainable network of the method plus the generic dictionary state.
struct DmdModel {
    DmdModel(const RestorerConfig& config, std::uint64_t seed);

    RestorerConfig config;
    Restorer restorer{nullptr};
    FeatureExtractor generic_extractor{nullptr};
    FeatureExtractor specific_extractor{nullptr};
    MultiScaleDiscriminator discriminator{nullptr};
    GenericDictionary generic;

    void train(bool on);
};

/// Restores one aligned LQ face. specific may be null or empty (generic-only
/// path). Throws MissingDictionaryError without generic entries and
/// SizeError for inputs of the wrong size.
Image restore(DmdModel& model, const Image& lq, const LandmarkSet& lm, const DictionarySet* specific,
              ReadTrace* trace = nullptr);

/// Batched form of restore on [B,3,H,W] inputs, no gradient.
torch::Tensor restore_batch(DmdModel& model, const torch::Tensor& lq, std::span<const LandmarkSet> landmarks,
                            std::span<const DictionarySet* const> specific);

}  // namespace dmd
