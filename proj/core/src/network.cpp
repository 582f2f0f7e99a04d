#include "dmd/network.hpp"

#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "dmd/errors.hpp"
#include "dmd/manifest.hpp"

namespace dmd {

namespace {

namespace F = torch::nn::functional;

torch::Tensor lrelu(const torch::Tensor& x) {
    return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
}

torch::nn::Conv2d conv3(int in, int out) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

}  // namespace

int RestorerConfig::channels_at(int level) const {
    return base_channels * (1 << level) * (dictionaries_enabled() ? 1 : 2);
}

int RestorerConfig::active_transforms() const {
    if (!dictionaries_enabled()) return 0;
    return transform_count < 0 ? num_scales : std::min(transform_count, num_scales);
}

bool RestorerConfig::transform_active(int level) const {
    return (num_scales - 1 - level) < active_transforms();
}

std::vector<LevelShape> RestorerConfig::level_shapes() const {
    std::vector<LevelShape> shapes(static_cast<std::size_t>(num_scales));
    for (int l = 0; l < num_scales; ++l) {
        shapes[l].channels = channels_at(l);
        for (Component c : kComponents) {
            shapes[l].sizes[index_of(c)] = canonical.at(c, l, num_scales);
        }
    }
    return shapes;
}

void RestorerConfig::validate() const {
    if (base_channels < 1 || num_scales < 1 || dict_size < 0) {
        throw SizeError("base_channels and num_scales must be positive, dict_size non-negative");
    }
    if (input_size <= 0 || input_size % (1 << num_scales) != 0) {
        throw SizeError("input_size " + std::to_string(input_size) + " is not divisible by 2^" +
                        std::to_string(num_scales));
    }
    if (transform_count < -1 || transform_count > num_scales) {
        throw SizeError("transform_count must lie in [-1, num_scales]");
    }
    for (const auto& s : canonical.coarsest) {
        if (s.h < 1 || s.w < 1) throw SizeError("canonical sizes must be positive");
    }
}

std::string config_to_json(const RestorerConfig& c) {
    nlohmann::ordered_json j;
    j["base_channels"] = c.base_channels;
    j["num_scales"] = c.num_scales;
    j["dict_size"] = c.dict_size;
    j["input_size"] = c.input_size;
    auto sizes = nlohmann::ordered_json::array();
    for (const auto& s : c.canonical.coarsest) sizes.push_back({s.h, s.w});
    j["canonical_sizes"] = sizes;
    j["transform_count"] = c.transform_count;
    j["use_generic"] = c.use_generic;
    j["use_specific"] = c.use_specific;
    j["read_mode"] = c.read_mode == ReadMode::Attention ? "attention" : "best_match";
    return j.dump();
}

RestorerConfig config_from_json(const std::string& text) {
    RestorerConfig c;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
        c.base_channels = j.value("base_channels", c.base_channels);
        c.num_scales = j.value("num_scales", c.num_scales);
        c.dict_size = j.value("dict_size", c.dict_size);
        c.input_size = j.value("input_size", c.input_size);
        if (j.contains("canonical_sizes")) {
            const auto& s = j.at("canonical_sizes");
            if (!s.is_array() || s.size() != kNumComponents) throw DataError("canonical_sizes needs four entries");
            for (std::size_t i = 0; i < kNumComponents; ++i) {
                c.canonical.coarsest[i] = {s[i].at(0).get<int>(), s[i].at(1).get<int>()};
            }
        }
        c.transform_count = j.value("transform_count", c.transform_count);
        c.use_generic = j.value("use_generic", c.use_generic);
        c.use_specific = j.value("use_specific", c.use_specific);
        const auto mode = j.value("read_mode", std::string("attention"));
        if (mode == "attention") {
            c.read_mode = ReadMode::Attention;
        } else if (mode == "best_match") {
            c.read_mode = ReadMode::BestMatch;
        } else {
            throw DataError("unknown read_mode '" + mode + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad restorer config: ") + e.what());
    }
    c.validate();
    return c;
}

EncoderImpl::EncoderImpl(const RestorerConfig& config) {
    stem = register_module("stem", conv3(3, config.channels_at(0)));
    int in = config.channels_at(0);
    for (int l = 0; l < config.num_scales; ++l) {
        const int out = config.channels_at(l);
        down.push_back(register_module("down" + std::to_string(l),
                                       torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1))));
        refine.push_back(register_module("refine" + std::to_string(l), conv3(out, out)));
        in = out;
    }
}

std::vector<torch::Tensor> EncoderImpl::forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> levels;
    auto h = lrelu(stem(x));
    for (std::size_t l = 0; l < down.size(); ++l) {
        h = lrelu(down[l](h));
        h = lrelu(refine[l](h));
        levels.push_back(h);
    }
    return levels;
}

std::vector<std::vector<RoiSet>> feature_rois(const RestorerConfig& config, std::span<const LandmarkSet> landmarks) {
    std::vector<std::vector<RoiSet>> out(static_cast<std::size_t>(config.num_scales));
    for (int l = 0; l < config.num_scales; ++l) {
        for (const auto& lm : landmarks) {
            out[l].push_back(landmarks_to_rois(lm, config.input_size, config.scale_factor(l)));
        }
    }
    return out;
}

RestorerImpl::RestorerImpl(const RestorerConfig& cfg) : config(cfg) {
    config.validate();
    encoder = register_module("encoder", Encoder(config));
    const int deepest = config.channels_at(config.num_scales - 1);
    bottleneck1 = register_module("bottleneck1", conv3(deepest, deepest));
    bottleneck2 = register_module("bottleneck2", conv3(deepest, deepest));
    const auto shapes = config.level_shapes();
    for (int l = 0; l < config.num_scales; ++l) {
        const int c = config.channels_at(l);
        const std::string s = std::to_string(l);
        if (config.transform_active(l)) {
            transforms.push_back(register_module("transform" + s, DictionaryTransform(l, c, shapes[l].sizes)));
        } else {
            transforms.push_back(nullptr);
        }
        sft.push_back(register_module("sft" + s, SFTHead(c)));
        decode.push_back(register_module("decode" + s, conv3(c, c)));
        up.push_back(register_module("up" + s, conv3(c, l == 0 ? c : config.channels_at(l - 1))));
    }
    head = register_module("head", conv3(config.channels_at(0), 3));
}

torch::Tensor RestorerImpl::forward(const RestoreBatch& batch, ReadTrace* trace) {
    const auto& x_in = batch.lq;
    if (x_in.dim() != 4 || x_in.size(1) != 3 || x_in.size(2) != config.input_size ||
        x_in.size(3) != config.input_size) {
        throw SizeError("restorer expects [B,3," + std::to_string(config.input_size) + "," +
                        std::to_string(config.input_size) + "] input");
    }
    const auto levels = encoder->forward(x_in);
    std::vector<std::vector<RoiSet>> rois;
    if (config.active_transforms() > 0) {
        if (static_cast<std::int64_t>(batch.landmarks.size()) != x_in.size(0)) {
            throw ShapeMismatchError("one landmark set per sample expected");
        }
        rois = feature_rois(config, batch.landmarks);
    }
    const TransformOptions opt{config.use_generic, config.use_specific, config.read_mode};

    auto x = lrelu(bottleneck2(lrelu(bottleneck1(levels.back()))));
    for (int l = config.num_scales - 1; l >= 0; --l) {
        torch::Tensor skip = levels[l];
        if (config.transform_active(l)) {
            const TransformInputs in{rois[l], batch.generic, batch.specific};
            skip = transforms[l]->enhance(levels[l], in, opt, trace);
        }
        x = sft_apply(sft[l], x, skip);
        x = lrelu(decode[l](x));
        x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
        x = lrelu(up[l](x));
    }
    return (torch::tanh(head(x)) + 1) / 2;
}

FeatureExtractorImpl::FeatureExtractorImpl(const RestorerConfig& cfg) : config(cfg) {
    config.validate();
    encoder = register_module("encoder", Encoder(config));
    for (int l = 0; l < config.num_scales; ++l) {
        for (Component c : kComponents) {
            key_heads.push_back(register_module("key" + std::to_string(l) + "_" + std::string(component_name(c)),
                                                torch::nn::Linear(config.channels_at(l), kKeyDim)));
        }
    }
}

DictionarySet FeatureExtractorImpl::extract(const torch::Tensor& images, std::span<const LandmarkSet> landmarks,
                                            DictKind kind) {
    DictionarySet set(kind, config.level_shapes());
    if (!images.defined() || images.size(0) == 0) {
        return set;
    }
    if (images.size(2) != config.input_size || images.size(3) != config.input_size) {
        throw SizeError("extractor expects " + std::to_string(config.input_size) + " px images");
    }
    if (static_cast<std::int64_t>(landmarks.size()) != images.size(0)) {
        throw ShapeMismatchError("one landmark set per image expected");
    }
    const auto levels = encoder->forward(images);
    const auto rois = feature_rois(config, landmarks);
    const auto shapes = config.level_shapes();
    for (int l = 0; l < config.num_scales; ++l) {
        for (Component c : kComponents) {
            std::vector<Box> boxes;
            for (const auto& r : rois[l]) boxes.push_back(r[index_of(c)].box);
            auto& d = set.at(l, c);
            d.values = roi_align_extract(levels[l], boxes, shapes[l].sizes[index_of(c)]);
            d.keys = key_heads[l * kNumComponents + index_of(c)]->forward(d.values.mean({2, 3}));
        }
    }
    return set;
}

DictionarySet init_generic(FeatureExtractor& extractor, const torch::Tensor& images,
                           std::span<const LandmarkSet> landmarks, std::span<const std::string> identities) {
    std::set<std::string> seen;
    for (const auto& id : identities) {
        if (!seen.insert(id).second) {
            throw IdentityCollisionError("identity '" + id + "' appears twice in the generic set");
        }
    }
    if (static_cast<std::int64_t>(identities.size()) != images.size(0)) {
        throw ShapeMismatchError("one identity per generic image expected");
    }
    return extractor->extract(images, landmarks, DictKind::Generic);
}

DictionarySet build_specific(FeatureExtractor& extractor, const torch::Tensor& images,
                             std::span<const LandmarkSet> landmarks) {
    const auto n = images.defined() ? images.size(0) : 0;
    if (n > kMaxReferences) {
        throw TooManyRefsError(std::to_string(n) + " references exceed the limit of " + std::to_string(kMaxReferences));
    }
    return extractor->extract(images, landmarks, DictKind::Specific);
}

SNConv2dImpl::SNConv2dImpl(int in, int out, int kernel, int stride_, int padding_)
    : stride(stride_), padding(padding_) {
    weight = register_parameter("weight", torch::empty({out, in, kernel, kernel}));
    torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    bias = register_parameter("bias", torch::empty({out}).uniform_(-bound, bound));
    u = register_buffer("u", F::normalize(torch::randn({out}), F::NormalizeFuncOptions().dim(0)));
}

torch::Tensor SNConv2dImpl::normalized_weight() {
    const auto w = weight.reshape({weight.size(0), -1});
    const auto opts = F::NormalizeFuncOptions().dim(0).eps(1e-12);
    torch::Tensor v;
    {
        torch::NoGradGuard guard;
        v = F::normalize(w.t().matmul(u), opts);
        if (is_training()) {
            u.copy_(F::normalize(w.matmul(v), opts));
            v = F::normalize(w.t().matmul(u), opts);
        }
    }
    const auto sigma = u.clone().dot(w.matmul(v));
    return weight / sigma;
}

torch::Tensor SNConv2dImpl::forward(const torch::Tensor& x) {
    return F::conv2d(x, normalized_weight(), F::Conv2dFuncOptions().bias(bias).stride(stride).padding(padding));
}

DiscriminatorImpl::DiscriminatorImpl() {
    const std::array<std::array<int, 5>, 4> spec = {{{3, 32, 4, 2, 1}, {32, 64, 4, 2, 1}, {64, 128, 4, 2, 1}, {128, 1, 3, 1, 1}}};
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const auto& s = spec[i];
        layers.push_back(register_module("sn" + std::to_string(i), SNConv2d(s[0], s[1], s[2], s[3], s[4])));
    }
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
    auto h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i]->forward(h);
        if (i + 1 < layers.size()) h = lrelu(h);
    }
    return h.mean({1, 2, 3});
}

MultiScaleDiscriminatorImpl::MultiScaleDiscriminatorImpl() {
    for (std::size_t i = 0; i < kDiscriminatorScales.size(); ++i) {
        nets[i] = register_module("d" + std::to_string(kDiscriminatorScales[i]), Discriminator());
    }
}

torch::Tensor MultiScaleDiscriminatorImpl::discriminate(const torch::Tensor& images, int r) {
    for (std::size_t i = 0; i < kDiscriminatorScales.size(); ++i) {
        if (kDiscriminatorScales[i] == r) {
            const auto x = r == 1 ? images : F::avg_pool2d(images, F::AvgPool2dFuncOptions(r));
            return nets[i]->forward(x);
        }
    }
    throw SizeError("no discriminator for scale " + std::to_string(r));
}

std::array<torch::Tensor, 3> MultiScaleDiscriminatorImpl::forward(const torch::Tensor& images) {
    return {discriminate(images, 1), discriminate(images, 2), discriminate(images, 4)};
}

void copy_module_state(torch::nn::Module& src, torch::nn::Module& dst) {
    torch::NoGradGuard guard;
    auto src_params = src.named_parameters(true);
    for (auto& p : dst.named_parameters(true)) {
        const auto* s = src_params.find(p.key());
        if (s == nullptr || s->sizes() != p.value().sizes()) {
            throw ShapeMismatchError("parameter '" + p.key() + "' has no counterpart");
        }
        p.value().copy_(*s);
    }
    auto src_buffers = src.named_buffers(true);
    for (auto& b : dst.named_buffers(true)) {
        const auto* s = src_buffers.find(b.key());
        if (s == nullptr || s->sizes() != b.value().sizes()) {
            throw ShapeMismatchError("buffer '" + b.key() + "' has no counterpart");
        }
        b.value().copy_(*s);
    }
}

DmdModel::DmdModel(const RestorerConfig& cfg, std::uint64_t seed) : config(cfg) {
    config.validate();
    torch::manual_seed(seed);
    restorer = Restorer(config);
    generic_extractor = FeatureExtractor(config);
    copy_module_state(*restorer->encoder, *generic_extractor->encoder);
    specific_extractor = FeatureExtractor(config);
    copy_module_state(*generic_extractor, *specific_extractor);
    discriminator = MultiScaleDiscriminator();
    generic = GenericDictionary(config.level_shapes(), config.dict_size);
}

void DmdModel::train(bool on) {
    restorer->train(on);
    generic_extractor->train(on);
    specific_extractor->train(on);
    discriminator->train(on);
}

torch::Tensor restore_batch(DmdModel& model, const torch::Tensor& lq, std::span<const LandmarkSet> landmarks,
                            std::span<const DictionarySet* const> specific) {
    const auto& cfg = model.config;
    const bool needs_generic = cfg.active_transforms() > 0 && cfg.use_generic;
    if (needs_generic && model.generic.entries().empty()) {
        throw MissingDictionaryError("restoration needs a generic dictionary");
    }
    torch::NoGradGuard guard;
    const RestoreBatch batch{lq, landmarks, needs_generic ? &model.generic.entries() : nullptr, specific};
    return model.restorer->forward(batch);
}

Image restore(DmdModel& model, const Image& lq, const LandmarkSet& lm, const DictionarySet* specific,
              ReadTrace* trace) {
    const auto& cfg = model.config;
    if (lq.height() != cfg.input_size || lq.width() != cfg.input_size) {
        throw SizeError("restore expects a " + std::to_string(cfg.input_size) + " px aligned face");
    }
    const bool needs_generic = cfg.active_transforms() > 0 && cfg.use_generic;
    if (needs_generic && model.generic.entries().empty()) {
        throw MissingDictionaryError("restoration needs a generic dictionary");
    }
    torch::NoGradGuard guard;
    const std::array<LandmarkSet, 1> lms{lm};
    const std::array<const DictionarySet*, 1> spec{specific};
    const RestoreBatch batch{to_tensor(lq).unsqueeze(0), lms, needs_generic ? &model.generic.entries() : nullptr,
                             spec};
    return from_tensor(model.restorer->forward(batch, trace)[0]);
}

}  // namespace dmd
