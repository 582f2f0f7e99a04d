#include "dmd/losses.hpp"

#include "dmd/errors.hpp"

namespace dmd {

namespace {

namespace F = torch::nn::functional;

void check_same(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) {
        throw ShapeMismatchError("loss inputs differ in shape");
    }
}

}  // namespace

torch::Tensor mse_loss(const torch::Tensor& pred, const torch::Tensor& gt) {
    check_same(pred, gt);
    return (pred - gt).square().mean();
}

torch::Tensor perceptual_loss(const torch::Tensor& pred, const torch::Tensor& gt, const FeatureTaps& phi) {
    check_same(pred, gt);
    const auto fp = phi(pred);
    const auto fg = phi(gt);
    auto loss = torch::zeros({}, pred.options());
    for (std::size_t i = 0; i < fp.size(); ++i) {
        loss = loss + (fp[i] - fg[i]).square().mean();
    }
    return loss;
}

torch::Tensor gram_matrix(const torch::Tensor& features) {
    const auto f = features.flatten(2);
    return f.matmul(f.transpose(1, 2));
}

torch::Tensor style_loss(const torch::Tensor& pred, const torch::Tensor& gt, const FeatureTaps& phi) {
    check_same(pred, gt);
    const auto fp = phi(pred);
    const auto fg = phi(gt);
    auto loss = torch::zeros({}, pred.options());
    for (std::size_t i = 0; i < fp.size(); ++i) {
        const auto chw = static_cast<double>(fp[i].size(1) * fp[i].size(2) * fp[i].size(3));
        const auto diff = gram_matrix(fp[i]) - gram_matrix(fg[i]);
        loss = loss + diff.square().sum({1, 2}).mean() / chw;
    }
    return loss;
}

torch::Tensor hinge_objective(const ScaleScores& real, const ScaleScores& fake) {
    auto total = torch::zeros({}, real[0].options());
    for (std::size_t r = 0; r < real.size(); ++r) {
        total = total + torch::clamp_max(real[r] - 1, 0).mean() + torch::clamp_max(-1 - fake[r], 0).mean();
    }
    return total;
}

torch::Tensor discriminator_loss(const ScaleScores& real, const ScaleScores& fake) {
    return -hinge_objective(real, fake);
}

torch::Tensor generator_loss(const ScaleScores& fake, const LossWeights& weights) {
    auto total = torch::zeros({}, fake[0].options());
    for (std::size_t r = 0; r < fake.size(); ++r) {
        total = total - weights.adv[r] * fake[r].mean();
    }
    return total;
}

LossBreakdown total_loss(const LossTerms& t, const LossWeights& w) {
    LossBreakdown out;
    out.total = w.mse * t.mse + w.perc * t.perc + w.style * t.style + t.adv;
    out.terms = {{"mse", t.mse.item<double>()},
                 {"perc", t.perc.item<double>()},
                 {"style", t.style.item<double>()},
                 {"adv_g", t.adv.item<double>()},
                 {"total", out.total.item<double>()}};
    return out;
}

PerceptualNetImpl::PerceptualNetImpl(std::uint64_t seed) {
    torch::manual_seed(seed);
    const std::array<std::pair<int, int>, 4> chans = {{{3, 16}, {16, 32}, {32, 64}, {64, 64}}};
    for (std::size_t i = 0; i < chans.size(); ++i) {
        convs.push_back(register_module(
            "conv" + std::to_string(i),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(chans[i].first, chans[i].second, 3).padding(1))));
    }
    for (auto& p : parameters()) {
        p.requires_grad_(false);
    }
}

std::vector<torch::Tensor> PerceptualNetImpl::forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> taps;
    auto h = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
        if (i > 0) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
        h = torch::relu(convs[i](h));
        taps.push_back(h);
    }
    return taps;
}

FeatureTaps taps_of(PerceptualNet net) {
    return [net](const torch::Tensor& x) mutable { return net->forward(x); };
}

}  // namespace dmd
