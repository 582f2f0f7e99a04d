#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "dmd/dictionary.hpp"
#include "dmd/geometry.hpp"

namespace dmd {

/// Bilinear RoIAlign of one box per sample. level is [B,C,H,W], boxes are in
/// the level's pixel coordinates; returns [B,C,h,w]. One sample per output
/// cell, taken at the bin centre. Throws BoundsError for boxes outside the map.
torch::Tensor roi_align_extract(const torch::Tensor& level, std::span<const Box> boxes, CanonicalSize size);

/// Bilinearly resizes enhanced [B,C,h,w] onto each box and overwrites the
/// covered pixels (those whose centres fall inside the box). Everything else is
/// returned unchanged.
torch::Tensor reverse_roi_paste(const torch::Tensor& level, std::span<const Box> boxes, const torch::Tensor& enhanced);

struct ReadOutput {
    torch::Tensor read;     // [B,C,h,w]
    torch::Tensor weights;  // [B,n], in the dictionary's own entry order
};

/// Attention read: softmax(q k^T / 8) V with q [B,64], keys [n,64],
/// values [n,C,h,w]. Entries are visited in a canonical order so that
/// permuting the dictionary leaves the result bit-identical.
ReadOutput dictionary_read(const torch::Tensor& query, const torch::Tensor& keys, const torch::Tensor& values);

/// Value of the entry with the largest q.k per sample (ties to the lowest index).
ReadOutput best_match_read(const torch::Tensor& query, const torch::Tensor& keys, const torch::Tensor& values);

/// m*s + (1-m)*g with m broadcast from [B].
torch::Tensor identity_blend(const torch::Tensor& score, const torch::Tensor& generic_read, const torch::Tensor& specific_read);

/// f + read * c.
torch::Tensor confidence_combine(const torch::Tensor& f_lq, const torch::Tensor& read, const torch::Tensor& confidence);

/// alpha * x + beta.
torch::Tensor sft_modulate(const torch::Tensor& x, const torch::Tensor& alpha, const torch::Tensor& beta);

/// Two 3x3 conv blocks, global average pool, linear projection to 64.
struct QueryHeadImpl : torch::nn::Module {
    explicit QueryHeadImpl(int channels);
    torch::Tensor forward(const torch::Tensor& f);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(QueryHead);

/// Scalar identity score from the pooled concatenation of (f, generic, specific).
struct IdentityHeadImpl : torch::nn::Module {
    explicit IdentityHeadImpl(int channels);
    torch::Tensor forward(const torch::Tensor& f, const torch::Tensor& g, const torch::Tensor& s);  // [B]

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(IdentityHead);

/// Two 3x3 convolutions and a sigmoid on the residual read - f.
struct ConfidenceHeadImpl : torch::nn::Module {
    explicit ConfidenceHeadImpl(int channels);
    torch::Tensor forward(const torch::Tensor& residual);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ConfidenceHead);

/// Elementwise scale and shift predicted from the fused skip feature.
struct SFTHeadImpl : torch::nn::Module {
    explicit SFTHeadImpl(int channels);
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& skip);

    torch::nn::Conv2d shared{nullptr}, scale{nullptr}, shift{nullptr};
};
TORCH_MODULE(SFTHead);

struct FuseResult {
    torch::Tensor fused;                 // [B,C,h,w]
    std::optional<torch::Tensor> score;  // [B], absent without specific reads
};

/// With no specific read the fused result is the generic read. has_specific
/// marks the samples whose specific read is meaningful; forced_score bypasses
/// the head.
FuseResult identity_fuse(IdentityHead& head, const torch::Tensor& f_lq, const torch::Tensor& generic_read,
                         const std::optional<torch::Tensor>& specific_read,
                         const std::optional<torch::Tensor>& has_specific = std::nullopt,
                         const std::optional<torch::Tensor>& forced_score = std::nullopt);

torch::Tensor confidence_fuse(ConfidenceHead& head, const torch::Tensor& f_lq, const torch::Tensor& read,
                              const std::optional<torch::Tensor>& forced_confidence = std::nullopt);

torch::Tensor sft_apply(SFTHead& head, const torch::Tensor& decoder_feat, const torch::Tensor& skip);

enum class ReadMode { Attention, BestMatch };

struct TransformOptions {
    bool use_generic = true;
    bool use_specific = true;
    ReadMode read_mode = ReadMode::Attention;
};

/// Attention weights and identity scores of one forward pass, per sample.
struct ComponentTrace {
    int level = 0;
    Component component = Component::LeftEye;
    std::vector<std::vector<float>> generic_weights;
    std::vector<std::vector<float>> specific_weights;
    std::vector<std::optional<float>> identity_score;
};
using ReadTrace = std::vector<ComponentTrace>;

/// Per-sample inputs to one transform module. specific[b] may be null or empty.
struct TransformInputs {
    std::span<const RoiSet> rois;  // at this level's scale
    const DictionarySet* generic = nullptr;
    std::span<const DictionarySet* const> specific;
};

/// Skip-connection block of one level: extract, read, fuse and paste each
/// component, then modulate the decoder feature with the result.
struct DictionaryTransformImpl : torch::nn::Module {
    DictionaryTransformImpl(int level, int channels, std::array<CanonicalSize, kNumComponents> sizes);

    /// Enhanced skip feature with the same shape as level_feat.
    torch::Tensor enhance(const torch::Tensor& level_feat, const TransformInputs& in, const TransformOptions& opt,
                          ReadTrace* trace = nullptr);

    int level;
    int channels;
    std::array<CanonicalSize, kNumComponents> sizes;
    std::vector<QueryHead> query;
    std::vector<IdentityHead> identity;
    std::vector<ConfidenceHead> confidence;
};
TORCH_MODULE(DictionaryTransform);

}  // namespace dmd
