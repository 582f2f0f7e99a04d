#include "dmd/transform.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dmd/errors.hpp"

namespace dmd {

namespace {

namespace F = torch::nn::functional;

constexpr double kBoxTolerance = 1e-6;
constexpr double kLeak = 0.2;

void check_box(const Box& b, std::int64_t height, std::int64_t width) {
    if (!(b.x0 >= -kBoxTolerance && b.y0 >= -kBoxTolerance && b.x1 <= width + kBoxTolerance &&
          b.y1 <= height + kBoxTolerance && b.x1 > b.x0 && b.y1 > b.y0)) {
        throw BoundsError("roi (" + std::to_string(b.x0) + ", " + std::to_string(b.y0) + ", " + std::to_string(b.x1) +
                          ", " + std::to_string(b.y1) + ") outside a " + std::to_string(height) + "x" +
                          std::to_string(width) + " map");
    }
}

void add_bilinear(double* row, double pos, std::int64_t n) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    const auto lo = static_cast<std::int64_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(lo);
    row[lo] += 1.0 - frac;
    if (frac > 0.0 && lo + 1 < n) {
        row[lo + 1] += frac;
    }
}

// [out, n]: row i samples the centre of bin i of [b0, b1).
void fill_sample_matrix(double* m, double b0, double b1, std::int64_t out, std::int64_t n) {
    const double bin = (b1 - b0) / static_cast<double>(out);
    for (std::int64_t i = 0; i < out; ++i) {
        add_bilinear(m + i * n, b0 + (static_cast<double>(i) + 0.5) * bin - 0.5, n);
    }
}

// [n, c]: row y resamples the c-cell canonical grid at pixel centre y + 0.5
// when it lies in [b0, b1). mask[y] marks those rows.
void fill_paste_matrix(double* m, double* mask, double b0, double b1, std::int64_t c, std::int64_t n) {
    const auto start = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(b0 - 0.5)), 0, n);
    const auto end = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(b1 - 0.5)), 0, n);
    for (std::int64_t y = start; y < end; ++y) {
        const double u = ((static_cast<double>(y) + 0.5) - b0) / (b1 - b0) * static_cast<double>(c) - 0.5;
        add_bilinear(m + y * c, u, c);
        mask[y] = 1.0;
    }
}

torch::TensorOptions options_like(const torch::Tensor& t) {
    return torch::TensorOptions().dtype(t.scalar_type()).device(t.device());
}

// Lexicographic by key, then by value, over the exact stored numbers.
std::vector<std::int64_t> canonical_order(const torch::Tensor& keys, const torch::Tensor& values) {
    const auto n = keys.size(0);
    const auto k = keys.detach().to(torch::kCPU, torch::kFloat64).contiguous();
    const auto d = k.size(1);
    const double* kp = k.data_ptr<double>();
    torch::Tensor v;
    const double* vp = nullptr;
    std::int64_t vd = 0;
    auto values_ptr = [&]() {
        if (vp == nullptr) {
            v = values.detach().to(torch::kCPU, torch::kFloat64).reshape({n, -1}).contiguous();
            vp = v.data_ptr<double>();
            vd = v.size(1);
        }
    };
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        for (std::int64_t j = 0; j < d; ++j) {
            const double x = kp[a * d + j];
            const double y = kp[b * d + j];
            if (x != y) return x < y;
        }
        values_ptr();
        for (std::int64_t j = 0; j < vd; ++j) {
            const double x = vp[a * vd + j];
            const double y = vp[b * vd + j];
            if (x != y) return x < y;
        }
        return false;
    });
    return order;
}

void check_dictionary(const torch::Tensor& query, const torch::Tensor& keys, const torch::Tensor& values) {
    if (!keys.defined() || keys.size(0) == 0) {
        throw EmptyDictionaryError("dictionary read on an empty dictionary");
    }
    if (keys.dim() != 2 || keys.size(1) != kKeyDim || query.dim() != 2 || query.size(1) != kKeyDim) {
        throw ShapeMismatchError("keys and queries must be " + std::to_string(kKeyDim) + "-dimensional");
    }
    if (values.size(0) != keys.size(0)) {
        throw ShapeMismatchError("dictionary has different key and value counts");
    }
}

}  // namespace

torch::Tensor roi_align_extract(const torch::Tensor& level, std::span<const Box> boxes, CanonicalSize size) {
    const auto batch = level.size(0);
    const auto height = level.size(2);
    const auto width = level.size(3);
    if (static_cast<std::int64_t>(boxes.size()) != batch) {
        throw ShapeMismatchError("one roi per sample expected");
    }
    auto ay = torch::zeros({batch, size.h, height}, torch::kFloat64);
    auto ax = torch::zeros({batch, size.w, width}, torch::kFloat64);
    for (std::int64_t b = 0; b < batch; ++b) {
        const Box& box = boxes[b];
        check_box(box, height, width);
        fill_sample_matrix(ay[b].data_ptr<double>(), box.y0, box.y1, size.h, height);
        fill_sample_matrix(ax[b].data_ptr<double>(), box.x0, box.x1, size.w, width);
    }
    const auto opts = options_like(level);
    return ay.to(opts).unsqueeze(1).matmul(level).matmul(ax.to(opts).transpose(1, 2).unsqueeze(1));
}

torch::Tensor reverse_roi_paste(const torch::Tensor& level, std::span<const Box> boxes, const torch::Tensor& enhanced) {
    const auto batch = level.size(0);
    const auto height = level.size(2);
    const auto width = level.size(3);
    const auto ch = enhanced.size(2);
    const auto cw = enhanced.size(3);
    if (static_cast<std::int64_t>(boxes.size()) != batch || enhanced.size(0) != batch ||
        enhanced.size(1) != level.size(1)) {
        throw ShapeMismatchError("pasted feature does not match the level");
    }
    auto py = torch::zeros({batch, height, ch}, torch::kFloat64);
    auto px = torch::zeros({batch, width, cw}, torch::kFloat64);
    auto my = torch::zeros({batch, height}, torch::kFloat64);
    auto mx = torch::zeros({batch, width}, torch::kFloat64);
    for (std::int64_t b = 0; b < batch; ++b) {
        const Box& box = boxes[b];
        check_box(box, height, width);
        fill_paste_matrix(py[b].data_ptr<double>(), my[b].data_ptr<double>(), box.y0, box.y1, ch, height);
        fill_paste_matrix(px[b].data_ptr<double>(), mx[b].data_ptr<double>(), box.x0, box.x1, cw, width);
    }
    const auto opts = options_like(level);
    const auto mask = (my.unsqueeze(2) * mx.unsqueeze(1)).to(opts).unsqueeze(1);
    const auto resized = py.to(opts).unsqueeze(1).matmul(enhanced).matmul(px.to(opts).transpose(1, 2).unsqueeze(1));
    return level * (1 - mask) + resized;
}

ReadOutput dictionary_read(const torch::Tensor& query, const torch::Tensor& keys, const torch::Tensor& values) {
    check_dictionary(query, keys, values);
    const auto n = keys.size(0);
    const auto order = canonical_order(keys, values);
    std::vector<std::int64_t> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        inverse[static_cast<std::size_t>(order[i])] = static_cast<std::int64_t>(i);
    }
    const auto idx = torch::tensor(order, torch::kLong).to(keys.device());
    const auto inv = torch::tensor(inverse, torch::kLong).to(keys.device());
    const auto sorted_keys = keys.index_select(0, idx);
    const auto sorted_values = values.index_select(0, idx).reshape({n, -1});
    const auto logits = query.matmul(sorted_keys.t()) / std::sqrt(static_cast<double>(kKeyDim));
    const auto w = torch::softmax(logits, 1);
    auto shape = values.sizes().vec();
    shape[0] = query.size(0);
    return {w.matmul(sorted_values).reshape(shape), w.index_select(1, inv)};
}

ReadOutput best_match_read(const torch::Tensor& query, const torch::Tensor& keys, const torch::Tensor& values) {
    check_dictionary(query, keys, values);
    const auto scores = query.detach().matmul(keys.detach().t());
    const auto best = scores.argmax(1);
    auto weights = torch::zeros_like(scores).scatter_(1, best.unsqueeze(1), 1.0);
    return {values.index_select(0, best), weights};
}

torch::Tensor identity_blend(const torch::Tensor& score, const torch::Tensor& generic_read,
                             const torch::Tensor& specific_read) {
    const auto m = score.reshape({-1, 1, 1, 1});
    return m * specific_read + (1 - m) * generic_read;
}

torch::Tensor confidence_combine(const torch::Tensor& f_lq, const torch::Tensor& read, const torch::Tensor& confidence) {
    return f_lq + read * confidence;
}

torch::Tensor sft_modulate(const torch::Tensor& x, const torch::Tensor& alpha, const torch::Tensor& beta) {
    return alpha * x + beta;
}

QueryHeadImpl::QueryHeadImpl(int channels)
    : conv1(register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))),
      conv2(register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))),
      proj(register_module("proj", torch::nn::Linear(channels, kKeyDim))) {}

torch::Tensor QueryHeadImpl::forward(const torch::Tensor& f) {
    auto x = F::leaky_relu(conv1(f), F::LeakyReLUFuncOptions().negative_slope(kLeak));
    x = F::leaky_relu(conv2(x), F::LeakyReLUFuncOptions().negative_slope(kLeak));
    return proj(x.mean({2, 3}));
}

IdentityHeadImpl::IdentityHeadImpl(int channels)
    : fc1(register_module("fc1", torch::nn::Linear(3 * channels, 32))),
      fc2(register_module("fc2", torch::nn::Linear(32, 1))) {}

torch::Tensor IdentityHeadImpl::forward(const torch::Tensor& f, const torch::Tensor& g, const torch::Tensor& s) {
    const auto pooled = torch::cat({f.mean({2, 3}), g.mean({2, 3}), s.mean({2, 3})}, 1);
    const auto h = F::leaky_relu(fc1(pooled), F::LeakyReLUFuncOptions().negative_slope(kLeak));
    return torch::sigmoid(fc2(h)).reshape({-1});
}

ConfidenceHeadImpl::ConfidenceHeadImpl(int channels)
    : conv1(register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))),
      conv2(register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))) {}

torch::Tensor ConfidenceHeadImpl::forward(const torch::Tensor& residual) {
    const auto h = F::leaky_relu(conv1(residual), F::LeakyReLUFuncOptions().negative_slope(kLeak));
    return torch::sigmoid(conv2(h));
}

SFTHeadImpl::SFTHeadImpl(int channels)
    : shared(register_module("shared", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))),
      scale(register_module("scale", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))),
      shift(register_module("shift", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))) {}

std::pair<torch::Tensor, torch::Tensor> SFTHeadImpl::forward(const torch::Tensor& skip) {
    const auto h = F::leaky_relu(shared(skip), F::LeakyReLUFuncOptions().negative_slope(kLeak));
    return {1 + scale(h), shift(h)};
}

FuseResult identity_fuse(IdentityHead& head, const torch::Tensor& f_lq, const torch::Tensor& generic_read,
                         const std::optional<torch::Tensor>& specific_read,
                         const std::optional<torch::Tensor>& has_specific,
                         const std::optional<torch::Tensor>& forced_score) {
    if (f_lq.sizes() != generic_read.sizes()) {
        throw ShapeMismatchError("generic read does not match the component feature");
    }
    if (!specific_read) {
        return {generic_read, std::nullopt};
    }
    if (specific_read->sizes() != generic_read.sizes()) {
        throw ShapeMismatchError("specific read does not match the generic read");
    }
    const auto m = forced_score ? *forced_score : head->forward(f_lq, generic_read, *specific_read);
    auto fused = identity_blend(m, generic_read, *specific_read);
    if (has_specific) {
        fused = torch::where(has_specific->reshape({-1, 1, 1, 1}), fused, generic_read);
    }
    return {fused, m};
}

torch::Tensor confidence_fuse(ConfidenceHead& head, const torch::Tensor& f_lq, const torch::Tensor& read,
                              const std::optional<torch::Tensor>& forced_confidence) {
    if (f_lq.sizes() != read.sizes()) {
        throw ShapeMismatchError("read does not match the component feature");
    }
    const auto c = forced_confidence ? *forced_confidence : head->forward(read - f_lq);
    return confidence_combine(f_lq, read, c);
}

torch::Tensor sft_apply(SFTHead& head, const torch::Tensor& decoder_feat, const torch::Tensor& skip) {
    if (decoder_feat.dim() != 4 || skip.dim() != 4 || decoder_feat.size(0) != skip.size(0) ||
        decoder_feat.size(2) != skip.size(2) || decoder_feat.size(3) != skip.size(3)) {
        throw ShapeMismatchError("decoder feature and skip differ in size");
    }
    const auto [alpha, beta] = head->forward(skip);
    return sft_modulate(decoder_feat, alpha, beta);
}

DictionaryTransformImpl::DictionaryTransformImpl(int level_, int channels_,
                                                 std::array<CanonicalSize, kNumComponents> sizes_)
    : level(level_), channels(channels_), sizes(sizes_) {
    for (Component c : kComponents) {
        const std::string name(component_name(c));
        query.push_back(register_module("query_" + name, QueryHead(channels)));
        identity.push_back(register_module("identity_" + name, IdentityHead(channels)));
        confidence.push_back(register_module("confidence_" + name, ConfidenceHead(channels)));
    }
}

namespace {

std::vector<float> row_to_vector(const torch::Tensor& row) {
    const auto r = row.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    return {r.data_ptr<float>(), r.data_ptr<float>() + r.numel()};
}

}  // namespace

torch::Tensor DictionaryTransformImpl::enhance(const torch::Tensor& level_feat, const TransformInputs& in,
                                               const TransformOptions& opt, ReadTrace* trace) {
    const auto batch = level_feat.size(0);
    if (static_cast<std::int64_t>(in.rois.size()) != batch) {
        throw ShapeMismatchError("one roi set per sample expected");
    }
    if (!in.specific.empty() && static_cast<std::int64_t>(in.specific.size()) != batch) {
        throw ShapeMismatchError("one specific dictionary slot per sample expected");
    }
    if (opt.use_generic && (in.generic == nullptr || in.generic->empty())) {
        throw MissingDictionaryError("generic dictionary required");
    }

    std::array<std::vector<Box>, kNumComponents> boxes;
    std::array<torch::Tensor, kNumComponents> features;
    for (Component c : kComponents) {
        auto& bx = boxes[index_of(c)];
        for (const auto& set : in.rois) {
            bx.push_back(set[index_of(c)].box);
        }
        features[index_of(c)] = roi_align_extract(level_feat, bx, sizes[index_of(c)]);
    }

    auto read_fn = opt.read_mode == ReadMode::Attention ? dictionary_read : best_match_read;
    auto out = level_feat;
    for (Component c : kComponents) {
        const int p = index_of(c);
        const auto& f = features[p];
        const auto q = query[p]->forward(f);
        ComponentTrace ct{level, c, {}, {}, {}};

        torch::Tensor generic_read;
        if (opt.use_generic) {
            const auto& d = in.generic->at(level, c);
            auto r = read_fn(q, d.keys, d.values);
            generic_read = r.read;
            if (trace != nullptr) {
                for (std::int64_t b = 0; b < batch; ++b) ct.generic_weights.push_back(row_to_vector(r.weights[b]));
            }
        }

        std::optional<torch::Tensor> specific_read;
        std::optional<torch::Tensor> has_specific;
        std::vector<bool> has(static_cast<std::size_t>(batch), false);
        if (opt.use_specific && !in.specific.empty()) {
            std::vector<torch::Tensor> reads;
            bool any = false;
            for (std::int64_t b = 0; b < batch; ++b) {
                const DictionarySet* s = in.specific[b];
                if (s != nullptr && !s->empty()) {
                    const auto& d = s->at(level, c);
                    auto r = read_fn(q.slice(0, b, b + 1), d.keys, d.values);
                    reads.push_back(r.read);
                    has[b] = true;
                    any = true;
                    if (trace != nullptr) ct.specific_weights.push_back(row_to_vector(r.weights[0]));
                } else {
                    reads.push_back(torch::zeros_like(f.slice(0, b, b + 1)));
                    if (trace != nullptr) ct.specific_weights.emplace_back();
                }
            }
            if (any) {
                specific_read = torch::cat(reads, 0);
                std::vector<std::int64_t> flags(has.begin(), has.end());
                has_specific = torch::tensor(flags, torch::kLong).to(f.device(), torch::kBool);
            }
        }

        torch::Tensor fused;
        if (opt.use_generic) {
            auto fr = identity_fuse(identity[p], f, generic_read, specific_read, has_specific);
            fused = fr.fused;
            if (trace != nullptr) {
                for (std::int64_t b = 0; b < batch; ++b) {
                    if (fr.score && has[b]) {
                        ct.identity_score.emplace_back((*fr.score)[b].item<float>());
                    } else {
                        ct.identity_score.emplace_back(std::nullopt);
                    }
                }
            }
        } else {
            fused = specific_read ? *specific_read : torch::zeros_like(f);
            if (trace != nullptr) ct.identity_score.assign(static_cast<std::size_t>(batch), std::nullopt);
        }

        const auto enhanced = confidence_fuse(confidence[p], f, fused);
        out = reverse_roi_paste(out, boxes[p], enhanced);
        if (trace != nullptr) trace->push_back(std::move(ct));
    }
    return out;
}

}  // namespace dmd
