#include "dmd/dictionary.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <zlib.h>

#include "bytes.hpp"
#include "dmd/errors.hpp"

namespace dmd {

namespace detail {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = ::crc32(crc, bytes.data() + off, chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw EncodeError("cannot write " + tmp);
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw EncodeError("short write to " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

std::string_view stage_name(Stage s) {
    switch (s) {
    case Stage::Init: return "INIT";
    case Stage::Forward: return "FORWARD";
    case Stage::Backward: return "BACKWARD";
    case Stage::Frozen: return "FROZEN";
    }
    return "INIT";
}

Stage parse_stage(std::string_view name) {
    if (name == "INIT") return Stage::Init;
    if (name == "FORWARD") return Stage::Forward;
    if (name == "BACKWARD") return Stage::Backward;
    if (name == "FROZEN") return Stage::Frozen;
    throw DataError("unknown stage '" + std::string(name) + "'");
}

DictionarySet::DictionarySet(DictKind kind, std::vector<LevelShape> shapes)
    : kind_(kind), shapes_(std::move(shapes)) {
    dicts_.reserve(shapes_.size() * kNumComponents);
    for (int level = 0; level < num_levels(); ++level) {
        const auto& shape = shapes_[level];
        for (Component c : kComponents) {
            const auto sz = shape.sizes[index_of(c)];
            dicts_.push_back({c, level, kind,
                              torch::zeros({0, kKeyDim}),
                              torch::zeros({0, shape.channels, sz.h, sz.w})});
        }
    }
}

std::int64_t DictionarySet::entries_per_dictionary() const {
    return dicts_.empty() ? 0 : dicts_.front().size();
}

DictionarySet DictionarySet::clone() const {
    DictionarySet out = *this;
    for (auto& d : out.dicts_) {
        d.keys = d.keys.detach().clone();
        d.values = d.values.detach().clone();
    }
    return out;
}

DictionarySet DictionarySet::permuted(const std::vector<std::int64_t>& order) const {
    DictionarySet out = *this;
    const auto idx = torch::tensor(order, torch::kLong);
    for (auto& d : out.dicts_) {
        d.keys = d.keys.index_select(0, idx);
        d.values = d.values.index_select(0, idx);
    }
    return out;
}

std::int64_t best_cosine_entry(const torch::Tensor& keys, const torch::Tensor& gt_key) {
    if (keys.size(0) == 0) {
        throw EmptyDictionaryError("cannot select from an empty dictionary");
    }
    const auto k = keys.detach().to(torch::kFloat64).contiguous();
    const auto g = gt_key.detach().to(torch::kFloat64).reshape({-1}).contiguous();
    const auto n = k.size(0);
    const auto d = k.size(1);
    const double* kp = k.data_ptr<double>();
    const double* gp = g.data_ptr<double>();
    double gnorm = 0.0;
    for (std::int64_t j = 0; j < d; ++j) gnorm += gp[j] * gp[j];
    gnorm = std::sqrt(gnorm);
    std::int64_t best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < n; ++i) {
        double dot = 0.0, norm = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            dot += kp[i * d + j] * gp[j];
            norm += kp[i * d + j] * kp[i * d + j];
        }
        const double denom = std::sqrt(norm) * gnorm;
        const double cos = denom > 0.0 ? dot / denom : 0.0;
        if (cos > best_cos) {
            best_cos = cos;
            best = i;
        }
    }
    return best;
}

namespace {

torch::Tensor replace_row(const torch::Tensor& t, std::int64_t row, const torch::Tensor& value) {
    return torch::cat({t.slice(0, 0, row), value.unsqueeze(0), t.slice(0, row + 1)});
}

}  // namespace

ComponentDictionary forward_update(const ComponentDictionary& dict, const torch::Tensor& gt_key,
                                   const torch::Tensor& gt_value, const torch::Tensor& gamma_k,
                                   const torch::Tensor& gamma_v, Stage stage) {
    if (stage != Stage::Forward) {
        throw StageError("forward update requires the FORWARD stage, dictionary is " +
                         std::string(stage_name(stage)));
    }
    if (dict.kind != DictKind::Generic) {
        throw StageError("forward update applies to generic dictionaries only");
    }
    const auto y = best_cosine_entry(dict.keys, gt_key);
    const auto key = gamma_k * dict.keys[y] + (1 - gamma_k) * gt_key.reshape({-1});
    const auto value = gamma_v * dict.values[y] + (1 - gamma_v) * gt_value.reshape(dict.values[y].sizes());
    ComponentDictionary out = dict;
    out.keys = replace_row(dict.keys, y, key);
    out.values = replace_row(dict.values, y, value);
    return out;
}

GenericDictionary::GenericDictionary(std::vector<LevelShape> shapes, int dict_size, double initial_gamma)
    : shapes_(std::move(shapes)), dict_size_(dict_size), entries_(DictKind::Generic, shapes_) {
    const double logit = std::log(initial_gamma / (1.0 - initial_gamma));
    for (std::size_t i = 0; i < shapes_.size() * kNumComponents; ++i) {
        gamma_k_logit_.push_back(torch::full({}, logit).requires_grad_(true));
        gamma_v_logit_.push_back(torch::full({}, logit).requires_grad_(true));
    }
}

void GenericDictionary::set_entries(const DictionarySet& live) {
    if (stage_ != Stage::Init) {
        throw StageError("entries are extractor outputs only during INIT");
    }
    if (live.entries_per_dictionary() != dict_size_) {
        throw SizeError("generic dictionary expects " + std::to_string(dict_size_) + " entries");
    }
    entries_ = live.clone();
}

void GenericDictionary::commit_forward(const DictionarySet& updated) {
    if (stage_ != Stage::Forward) {
        throw StageError("momentum updates are committed only during FORWARD");
    }
    entries_ = updated.clone();
}

void GenericDictionary::advance(Stage target) {
    if (static_cast<int>(target) != static_cast<int>(stage_) + 1) {
        throw IllegalTransitionError("cannot move generic dictionary from " + std::string(stage_name(stage_)) +
                                     " to " + std::string(stage_name(target)));
    }
    if (entries_.entries_per_dictionary() != dict_size_) {
        throw StageError("generic dictionary has no entries to carry into " + std::string(stage_name(target)));
    }
    switch (target) {
    case Stage::Forward:
        entries_ = entries_.clone();
        break;
    case Stage::Backward:
        entries_ = entries_.clone();
        for (auto& d : entries_.all()) {
            d.keys.requires_grad_(true);
            d.values.requires_grad_(true);
        }
        break;
    case Stage::Frozen:
        entries_ = entries_.clone();
        break;
    case Stage::Init:
        break;
    }
    stage_ = target;
}

torch::Tensor GenericDictionary::gamma_k(int level, Component c) const {
    return torch::sigmoid(gamma_k_logit_[level * kNumComponents + index_of(c)]);
}

torch::Tensor GenericDictionary::gamma_v(int level, Component c) const {
    return torch::sigmoid(gamma_v_logit_[level * kNumComponents + index_of(c)]);
}

std::vector<torch::Tensor> GenericDictionary::gamma_parameters() const {
    std::vector<torch::Tensor> out = gamma_k_logit_;
    out.insert(out.end(), gamma_v_logit_.begin(), gamma_v_logit_.end());
    return out;
}

std::vector<float> GenericDictionary::gamma_k_logits() const {
    std::vector<float> out;
    for (const auto& t : gamma_k_logit_) out.push_back(t.item<float>());
    return out;
}

std::vector<float> GenericDictionary::gamma_v_logits() const {
    std::vector<float> out;
    for (const auto& t : gamma_v_logit_) out.push_back(t.item<float>());
    return out;
}

void GenericDictionary::set_gamma_logits(std::span<const float> k, std::span<const float> v) {
    if (k.size() != gamma_k_logit_.size() || v.size() != gamma_v_logit_.size()) {
        throw SizeError("gamma count does not match the dictionary layout");
    }
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < k.size(); ++i) {
        gamma_k_logit_[i].fill_(k[i]);
        gamma_v_logit_[i].fill_(v[i]);
    }
}

std::vector<torch::Tensor> GenericDictionary::entry_parameters() const {
    std::vector<torch::Tensor> out;
    if (stage_ != Stage::Backward) {
        return out;
    }
    for (const auto& d : entries_.all()) {
        out.push_back(d.keys);
        out.push_back(d.values);
    }
    return out;
}

void GenericDictionary::backward_step() {
    if (stage_ != Stage::Backward) {
        throw StageError("gradient steps on dictionary entries require the BACKWARD stage");
    }
    torch::NoGradGuard guard;
    for (auto& d : entries_.all()) {
        for (torch::Tensor* p : {&d.keys, &d.values}) {
            auto& grad = p->mutable_grad();
            if (grad.defined()) {
                p->sub_(grad * eta_);
                grad = torch::Tensor();
            }
        }
    }
}

DictionarySet GenericDictionary::apply_forward_update(const DictionarySet& base, const DictionarySet& gt,
                                                      std::int64_t sample) const {
    if (stage_ != Stage::Forward) {
        throw StageError("forward update requires the FORWARD stage");
    }
    DictionarySet out = base;
    for (int level = 0; level < base.num_levels(); ++level) {
        for (Component c : kComponents) {
            const auto& g = gt.at(level, c);
            out.at(level, c) = forward_update(base.at(level, c), g.keys[sample], g.values[sample],
                                              gamma_k(level, c), gamma_v(level, c), stage_);
        }
    }
    return out;
}

void GenericDictionary::restore(Stage stage, const DictionarySet& entries) {
    entries_ = entries.clone();
    stage_ = stage;
    if (stage_ == Stage::Backward) {
        for (auto& d : entries_.all()) {
            d.keys.requires_grad_(true);
            d.values.requires_grad_(true);
        }
    }
}

namespace {

constexpr char kDictMagic[8] = {'D', 'M', 'D', 'D', 'I', 'C', 'T', '\0'};
constexpr std::uint32_t kDictVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize(const DictionaryBundle& bundle) {
    const auto& set = bundle.set;
    const int levels = set.num_levels();
    const auto n = set.entries_per_dictionary();
    detail::ByteWriter w;
    w.raw(kDictMagic, sizeof(kDictMagic));
    w.u32(kDictVersion);
    w.u8(static_cast<std::uint8_t>(set.kind()));
    w.u8(static_cast<std::uint8_t>(bundle.stage));
    w.u16(0);
    w.u32(kNumComponents);
    w.u32(static_cast<std::uint32_t>(levels));
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(kKeyDim);
    w.u32(static_cast<std::uint32_t>(kNumComponents * levels * n));
    w.f64(bundle.eta);
    for (const auto& shape : set.shapes()) {
        w.u32(static_cast<std::uint32_t>(shape.channels));
    }
    for (const auto& shape : set.shapes()) {
        for (const auto& sz : shape.sizes) {
            w.u32(static_cast<std::uint32_t>(sz.h));
            w.u32(static_cast<std::uint32_t>(sz.w));
        }
    }
    const std::size_t gamma_count = static_cast<std::size_t>(levels) * kNumComponents;
    for (std::size_t i = 0; i < gamma_count; ++i) {
        w.f32(i < bundle.gamma_k_logits.size() ? bundle.gamma_k_logits[i] : 0.0f);
        w.f32(i < bundle.gamma_v_logits.size() ? bundle.gamma_v_logits[i] : 0.0f);
    }
    for (const auto& d : set.all()) {
        const auto keys = d.keys.detach().to(torch::kFloat32).contiguous();
        const auto values = d.values.detach().to(torch::kFloat32).contiguous();
        const auto value_numel = n > 0 ? values.numel() / n : 0;
        for (std::int64_t i = 0; i < n; ++i) {
            w.f32_array(keys.data_ptr<float>() + i * kKeyDim, kKeyDim);
            w.f32_array(values.data_ptr<float>() + i * value_numel, static_cast<std::size_t>(value_numel));
        }
    }
    const auto crc = detail::crc32(w.buffer());
    w.u32(crc);
    return std::move(w.buffer());
}

DictionaryBundle deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof(kDictMagic) + 4) {
        throw ChecksumError("dictionary stream truncated");
    }
    if (std::memcmp(bytes.data(), kDictMagic, sizeof(kDictMagic)) != 0) {
        throw VersionError("not a dictionary file (bad magic)");
    }
    detail::ByteReader r(bytes);
    r.take(sizeof(kDictMagic));
    const auto version = r.u32();
    if (version != kDictVersion) {
        throw VersionError("unsupported dictionary version " + std::to_string(version));
    }
    if (bytes.size() < 4 + r.position()) {
        throw ChecksumError("dictionary stream truncated");
    }
    const auto body = bytes.first(bytes.size() - 4);
    detail::ByteReader tail(bytes.last(4));
    if (detail::crc32(body) != tail.u32()) {
        throw ChecksumError("dictionary checksum mismatch");
    }
    detail::ByteReader rb(body);
    rb.take(sizeof(kDictMagic) + 4);
    DictionaryBundle out;
    const auto kind = static_cast<DictKind>(rb.u8());
    out.stage = static_cast<Stage>(rb.u8());
    rb.u16();
    const auto components = rb.u32();
    const auto levels = rb.u32();
    const auto n = rb.u32();
    const auto key_dim = rb.u32();
    const auto total = rb.u32();
    if (components != kNumComponents || key_dim != kKeyDim || total != components * levels * n) {
        throw VersionError("dictionary header describes an unsupported layout");
    }
    out.eta = rb.f64();
    std::vector<LevelShape> shapes(levels);
    for (auto& s : shapes) {
        s.channels = static_cast<int>(rb.u32());
    }
    for (auto& s : shapes) {
        for (auto& sz : s.sizes) {
            sz.h = static_cast<int>(rb.u32());
            sz.w = static_cast<int>(rb.u32());
        }
    }
    for (std::uint32_t i = 0; i < levels * kNumComponents; ++i) {
        out.gamma_k_logits.push_back(rb.f32());
        out.gamma_v_logits.push_back(rb.f32());
    }
    out.set = DictionarySet(kind, shapes);
    for (auto& d : out.set.all()) {
        const auto sz = shapes[d.level].sizes[index_of(d.component)];
        auto keys = torch::empty({static_cast<std::int64_t>(n), kKeyDim});
        auto values = torch::empty({static_cast<std::int64_t>(n), shapes[d.level].channels, sz.h, sz.w});
        const auto value_numel = static_cast<std::size_t>(shapes[d.level].channels) * sz.h * sz.w;
        for (std::uint32_t i = 0; i < n; ++i) {
            rb.f32_array(keys.data_ptr<float>() + i * kKeyDim, kKeyDim);
            rb.f32_array(values.data_ptr<float>() + i * value_numel, value_numel);
        }
        d.keys = keys;
        d.values = values;
    }
    if (rb.remaining() != 0) {
        throw ChecksumError("trailing bytes after dictionary payload");
    }
    return out;
}

void save_dictionary(const DictionaryBundle& bundle, const std::filesystem::path& path) {
    detail::write_file_atomic(path.string(), serialize(bundle));
}

DictionaryBundle load_dictionary(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path.string());
    return deserialize(bytes);
}

std::uint64_t content_hash(const DictionarySet& set) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const torch::Tensor& t) {
        const auto c = t.detach().contiguous();
        const auto* p = static_cast<const std::uint8_t*>(c.data_ptr());
        const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& d : set.all()) {
        mix(d.keys);
        mix(d.values);
    }
    return h;
}

}  // namespace dmd
