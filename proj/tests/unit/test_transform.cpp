#include <cmath>
#include <numeric>

#include "doctest_torch.hpp"

#include "dmd/errors.hpp"
#include "dmd/transform.hpp"
#include "helpers.hpp"

using namespace dmd;

namespace {

auto f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

// Scalar softmax(q.k / 8) V evaluated entry by entry.
std::vector<double> scalar_read(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
    const auto n = k.size(0);
    const auto flat = v.reshape({n, -1});
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < kKeyDim; ++j) s += q[j].item<double>() * k[i][j].item<double>();
        logits[i] = s / 8.0;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    std::vector<double> out(static_cast<std::size_t>(flat.size(1)), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < flat.size(1); ++j) out[j] += logits[i] / z * flat[i][j].item<double>();
    return out;
}

}  // namespace

TEST_CASE("attention read matches a scalar evaluation") {
    torch::manual_seed(1);
    const auto q = torch::randn({2, kKeyDim}, f64());
    const auto k = torch::randn({5, kKeyDim}, f64());
    const auto v = torch::randn({5, 2, 2, 3}, f64());
    const auto r = dictionary_read(q, k, v);
    CHECK(r.read.sizes() == torch::IntArrayRef({2, 2, 2, 3}));
    for (int b = 0; b < 2; ++b) {
        const auto expected = scalar_read(q[b], k, v);
        const auto got = r.read[b].reshape({-1});
        for (std::size_t j = 0; j < expected.size(); ++j) CHECK(got[j].item<double>() == doctest::Approx(expected[j]).epsilon(1e-12));
        CHECK(r.weights[b].sum().item<double>() == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("attention weights follow entry order and the read is permutation invariant") {
    torch::manual_seed(2);
    const auto q = torch::randn({3, kKeyDim});
    const auto k = torch::randn({7, kKeyDim});
    const auto v = torch::randn({7, 4, 2, 2});
    const auto perm = torch::randperm(7);
    const auto a = dictionary_read(q, k, v);
    const auto b = dictionary_read(q, k.index_select(0, perm), v.index_select(0, perm));
    CHECK(torch::equal(a.read, b.read));
    CHECK(torch::allclose(a.weights.index_select(1, perm), b.weights));
    const auto logits = q.matmul(k.t()) / 8.0;
    CHECK(torch::allclose(a.weights, torch::softmax(logits, 1), 1e-5, 1e-7));
}

TEST_CASE("single entry reads return the value exactly") {
    torch::manual_seed(3);
    const auto v = torch::randn({1, 3, 2, 2});
    const auto r = dictionary_read(torch::randn({2, kKeyDim}) * 100.0, torch::randn({1, kKeyDim}), v);
    CHECK(torch::equal(r.read[0], v[0]));
    CHECK(torch::equal(r.read[1], v[0]));
}

TEST_CASE("reads reject empty or malformed dictionaries") {
    const auto q = torch::randn({1, kKeyDim});
    CHECK_THROWS_AS(dictionary_read(q, torch::zeros({0, kKeyDim}), torch::zeros({0, 1, 1, 1})), EmptyDictionaryError);
    CHECK_THROWS_AS(dictionary_read(q, torch::zeros({2, 3}), torch::zeros({2, 1, 1, 1})), ShapeMismatchError);
    CHECK_THROWS_AS(best_match_read(q, torch::zeros({2, kKeyDim}), torch::zeros({3, 1, 1, 1})), ShapeMismatchError);
}

TEST_CASE("best match read picks the largest dot product") {
    torch::manual_seed(4);
    const auto q = torch::randn({4, kKeyDim});
    const auto k = torch::randn({9, kKeyDim});
    const auto v = torch::randn({9, 2, 1, 1});
    const auto r = best_match_read(q, k, v);
    for (int b = 0; b < 4; ++b) {
        int best = 0;
        for (int i = 1; i < 9; ++i) {
            if (q[b].dot(k[i]).item<float>() > q[b].dot(k[best]).item<float>()) best = i;
        }
        CHECK(torch::equal(r.read[b], v[best]));
        CHECK(r.weights[b][best].item<float>() == 1.0f);
        CHECK(r.weights[b].sum().item<float>() == 1.0f);
    }
}

TEST_CASE("roi align over the whole map at full size is the identity") {
    const auto level = torch::randn({2, 3, 6, 5});
    const std::vector<Box> boxes(2, Box{0, 0, 5, 6});
    CHECK(torch::allclose(roi_align_extract(level, boxes, {6, 5}), level, 1e-6, 1e-6));
}

TEST_CASE("roi align reproduces a linear ramp at the bin centres") {
    auto level = torch::zeros({1, 1, 12, 16}, f64());
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 16; ++x) level[0][0][y][x] = 0.5 * x - 0.25 * y + 1.0;
    const Box box{2.3, 1.7, 11.9, 9.1};
    const auto out = roi_align_extract(level, std::span<const Box>(&box, 1), {4, 6});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) {
            const double py = box.y0 + (i + 0.5) * box.height() / 4 - 0.5;
            const double px = box.x0 + (j + 0.5) * box.width() / 6 - 0.5;
            CHECK(out[0][0][i][j].item<double>() == doctest::Approx(0.5 * px - 0.25 * py + 1.0).epsilon(1e-12));
        }
}

TEST_CASE("roi align rejects boxes outside the map") {
    const auto level = torch::zeros({1, 1, 8, 8});
    const Box bad{-1, 0, 4, 4};
    CHECK_THROWS_AS(roi_align_extract(level, std::span<const Box>(&bad, 1), {2, 2}), BoundsError);
    const Box flat{1, 1, 1, 4};
    CHECK_THROWS_AS(roi_align_extract(level, std::span<const Box>(&flat, 1), {2, 2}), BoundsError);
}

TEST_CASE("reverse paste overwrites covered pixels only") {
    const auto level = torch::randn({1, 2, 10, 10});
    const Box box{2.2, 3.0, 6.8, 7.4};
    const auto enhanced = torch::randn({1, 2, 4, 4});
    const auto out = reverse_roi_paste(level, std::span<const Box>(&box, 1), enhanced);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            const bool inside = y + 0.5 >= box.y0 && y + 0.5 < box.y1 && x + 0.5 >= box.x0 && x + 0.5 < box.x1;
            const bool same = torch::equal(out[0].select(1, y).select(1, x), level[0].select(1, y).select(1, x));
            CHECK(same != inside);
        }
}

TEST_CASE("pasting a full-map box at full size reproduces the pasted map") {
    const auto level = torch::randn({1, 2, 6, 6});
    const auto enhanced = torch::randn({1, 2, 6, 6});
    const Box box{0, 0, 6, 6};
    CHECK(torch::allclose(reverse_roi_paste(level, std::span<const Box>(&box, 1), enhanced), enhanced, 1e-6, 1e-6));
}

TEST_CASE("fusion endpoints are exact") {
    torch::manual_seed(5);
    const auto g = torch::randn({2, 3, 4, 4});
    const auto s = torch::randn({2, 3, 4, 4});
    CHECK(torch::equal(identity_blend(torch::ones({2}), g, s), s));
    CHECK(torch::equal(identity_blend(torch::zeros({2}), g, s), g));
    const auto f = torch::randn({2, 3, 4, 4});
    CHECK(torch::equal(confidence_combine(f, g, torch::zeros({2, 3, 4, 4})), f));
    CHECK(torch::equal(sft_modulate(f, torch::ones_like(f), torch::zeros_like(f)), f));
}

TEST_CASE("identity fuse falls back to the generic read") {
    IdentityHead head(3);
    const auto f = torch::randn({2, 3, 4, 4});
    const auto g = torch::randn({2, 3, 4, 4});
    const auto s = torch::randn({2, 3, 4, 4});
    const auto none = identity_fuse(head, f, g, std::nullopt);
    CHECK(torch::equal(none.fused, g));
    CHECK_FALSE(none.score.has_value());
    const auto mask = torch::tensor({1, 0}, torch::kLong).to(torch::kBool);
    const auto partial = identity_fuse(head, f, g, s, mask);
    CHECK(torch::equal(partial.fused[1], g[1]));
    REQUIRE(partial.score.has_value());
    CHECK(partial.score->sizes() == torch::IntArrayRef({2}));
    CHECK((*partial.score >= 0).all().item<bool>());
    CHECK((*partial.score <= 1).all().item<bool>());
    const auto forced = identity_fuse(head, f, g, s, std::nullopt, torch::ones({2}));
    CHECK(torch::equal(forced.fused, s));
}

TEST_CASE("heads produce the documented shapes") {
    QueryHead q(4);
    CHECK(q->forward(torch::randn({3, 4, 8, 16})).sizes() == torch::IntArrayRef({3, kKeyDim}));
    ConfidenceHead c(4);
    const auto conf = c->forward(torch::randn({3, 4, 8, 16}));
    CHECK(conf.size(0) == 3);
    CHECK(conf.size(2) == 8);
    CHECK((conf >= 0).all().item<bool>());
    SFTHead sft(4);
    const auto [alpha, beta] = sft->forward(torch::randn({3, 4, 8, 8}));
    CHECK(alpha.sizes() == torch::IntArrayRef({3, 4, 8, 8}));
    CHECK(beta.sizes() == alpha.sizes());
    CHECK(sft_apply(sft, torch::randn({3, 4, 8, 8}), torch::randn({3, 4, 8, 8})).sizes() == alpha.sizes());
    CHECK_THROWS_AS(sft_apply(sft, torch::randn({3, 4, 8, 8}), torch::randn({3, 4, 4, 4})), ShapeMismatchError);
}

TEST_CASE("transform module enhances features in place") {
    const int channels = 3;
    std::array<CanonicalSize, kNumComponents> sizes{};
    for (auto& s : sizes) s = {2, 3};
    DictionaryTransform t(0, channels, sizes);
    std::vector<LevelShape> shapes(1);
    shapes[0].channels = channels;
    shapes[0].sizes = sizes;
    const auto generic = testing::random_set(DictKind::Generic, shapes, 4, 1);
    const auto specific = testing::random_set(DictKind::Specific, shapes, 2, 2);
    const auto rois = landmarks_to_rois(template_landmarks(64), 64, 4);
    const std::vector<RoiSet> roi_batch(2, rois);
    const std::vector<const DictionarySet*> spec = {&specific, nullptr};
    const auto feat = torch::randn({2, channels, 16, 16});
    ReadTrace trace;
    const auto out = t->enhance(feat, {roi_batch, &generic, spec}, {}, &trace);
    CHECK(out.sizes() == feat.sizes());
    REQUIRE(trace.size() == kNumComponents);
    CHECK(trace[0].generic_weights.size() == 2);
    CHECK(trace[0].generic_weights[0].size() == 4);
    CHECK(trace[0].specific_weights[0].size() == 2);
    CHECK(trace[0].specific_weights[1].empty());
    CHECK(trace[0].identity_score[0].has_value());
    CHECK_FALSE(trace[0].identity_score[1].has_value());
    CHECK_THROWS_AS(t->enhance(feat, {roi_batch, nullptr, spec}, {}), MissingDictionaryError);
    const auto specific_only = t->enhance(feat, {roi_batch, nullptr, {}}, {false, true, ReadMode::Attention});
    CHECK(specific_only.sizes() == feat.sizes());
    CHECK(torch::isfinite(specific_only).all().item<bool>());
}
