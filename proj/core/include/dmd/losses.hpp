#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace dmd {

struct LossWeights {
    double mse = 300.0;
    double perc = 1.0;
    double style = 0.1;
    std::array<double, 3> adv = {4.0, 1.0, 0.5};  // r = 1, 2, 4
};

/// Any feature extractor exposing tap layers.
using FeatureTaps = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;

/// Mean of squared differences over every element. Throws ShapeMismatchError.
torch::Tensor mse_loss(const torch::Tensor& pred, const torch::Tensor& gt);

/// Sum over taps of mean squared feature differences.
torch::Tensor perceptual_loss(const torch::Tensor& pred, const torch::Tensor& gt, const FeatureTaps& phi);

/// [B,C,H,W] -> [B,C,C] = F F^T with F the spatially flattened features.
torch::Tensor gram_matrix(const torch::Tensor& features);

/// Sum over taps of ||G(pred) - G(gt)||^2 / (C H W), averaged over the batch.
torch::Tensor style_loss(const torch::Tensor& pred, const torch::Tensor& gt, const FeatureTaps& phi);

using ScaleScores = std::array<torch::Tensor, 3>;

/// The discriminator's maximized hinge objective
/// sum_r E[min(0, D(real)-1)] + E[min(0, -1-D(fake))].
torch::Tensor hinge_objective(const ScaleScores& real, const ScaleScores& fake);

/// Negated hinge objective, minimized by the discriminator.
torch::Tensor discriminator_loss(const ScaleScores& real, const ScaleScores& fake);

/// -sum_r lambda_r E[D_r(fake)].
torch::Tensor generator_loss(const ScaleScores& fake, const LossWeights& weights = {});

struct LossTerms {
    torch::Tensor mse, perc, style, adv;  // raw, unweighted
};

struct LossBreakdown {
    torch::Tensor total;
    std::vector<std::pair<std::string, double>> terms;  // raw values, then total
};

/// lambda_mse*mse + lambda_perc*perc + lambda_style*style + adv.
LossBreakdown total_loss(const LossTerms& terms, const LossWeights& weights = {});

/// Frozen four-block convolutional extractor with fixed-seed weights,
/// tapped after each block.
struct PerceptualNetImpl : torch::nn::Module {
    explicit PerceptualNetImpl(std::uint64_t seed = 20240607);
    std::vector<torch::Tensor> forward(const torch::Tensor& x);

    std::vector<torch::nn::Conv2d> convs;
};
TORCH_MODULE(PerceptualNet);

FeatureTaps taps_of(PerceptualNet net);

}  // namespace dmd
