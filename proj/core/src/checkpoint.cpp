#include "dmd/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include <json.hpp>

#include "bytes.hpp"
#include "dmd/errors.hpp"

namespace dmd {

namespace {

constexpr char kMagic[8] = {'D', 'M', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw EncodeError("unsupported tensor dtype in checkpoint");
    }
}

torch::ScalarType parse_dtype(const std::string& s) {
    if (s == "f32") return torch::kFloat32;
    if (s == "f64") return torch::kFloat64;
    if (s == "i64") return torch::kInt64;
    throw VersionError("unknown tensor dtype '" + s + "'");
}

}  // namespace

const torch::Tensor* Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return &t;
    }
    return nullptr;
}

const std::vector<std::uint8_t>* Checkpoint::blob(const std::string& name) const {
    for (const auto& [n, b] : blobs) {
        if (n == name) return &b;
    }
    return nullptr;
}

void Checkpoint::add_module(const std::string& prefix, torch::nn::Module& module) {
    for (const auto& p : module.named_parameters(true)) {
        tensors.emplace_back(prefix + p.key(), p.value().detach().clone());
    }
    for (const auto& b : module.named_buffers(true)) {
        tensors.emplace_back(prefix + b.key(), b.value().detach().clone());
    }
}

void Checkpoint::load_module(const std::string& prefix, torch::nn::Module& module) const {
    torch::NoGradGuard guard;
    auto copy = [&](const std::string& key, torch::Tensor& dst) {
        const auto* src = tensor(prefix + key);
        if (src == nullptr) {
            throw DataError("checkpoint lacks tensor '" + prefix + key + "'");
        }
        if (src->sizes() != dst.sizes()) {
            throw DataError("checkpoint tensor '" + prefix + key + "' has the wrong shape");
        }
        dst.copy_(*src);
    };
    for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::ordered_json header;
    try {
        header["meta"] = nlohmann::ordered_json::parse(ckpt.meta);
    } catch (const nlohmann::json::exception& e) {
        throw EncodeError(std::string("checkpoint metadata is not JSON: ") + e.what());
    }
    std::vector<torch::Tensor> contiguous;
    auto tensors = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        auto c = t.detach().to(torch::kCPU).contiguous();
        const auto nbytes = static_cast<std::uint64_t>(c.numel()) * c.element_size();
        tensors.push_back({{"name", name}, {"dtype", dtype_name(c.scalar_type())}, {"shape", c.sizes().vec()},
                           {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
        contiguous.push_back(std::move(c));
    }
    auto blobs = nlohmann::ordered_json::array();
    for (const auto& [name, b] : ckpt.blobs) {
        blobs.push_back({{"name", name}, {"offset", offset}, {"nbytes", b.size()}});
        offset += b.size();
    }
    header["tensors"] = tensors;
    header["blobs"] = blobs;
    const std::string text = header.dump();

    detail::ByteWriter w;
    w.raw(kMagic, sizeof(kMagic));
    w.u32(kVersion);
    w.u64(text.size());
    w.raw(text.data(), text.size());
    w.buffer().reserve(w.size() + offset + 4);
    for (const auto& c : contiguous) {
        w.raw(c.data_ptr(), static_cast<std::size_t>(c.numel()) * c.element_size());
    }
    for (const auto& [name, b] : ckpt.blobs) {
        w.bytes(b);
    }
    const auto crc = detail::crc32(w.buffer());
    w.u32(crc);
    return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw VersionError("not a checkpoint file (bad magic)");
    }
    detail::ByteReader r(bytes);
    r.take(sizeof(kMagic));
    const auto version = r.u32();
    if (version != kVersion) {
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    }
    if (bytes.size() < r.position() + 4) {
        throw ChecksumError("checkpoint truncated");
    }
    const auto body = bytes.first(bytes.size() - 4);
    detail::ByteReader tail(bytes.last(4));
    if (detail::crc32(body) != tail.u32()) {
        throw ChecksumError("checkpoint checksum mismatch");
    }
    detail::ByteReader rb(body);
    rb.take(sizeof(kMagic) + 4);
    const auto header_len = rb.u64();
    const auto header_bytes = rb.take(header_len);
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(header_bytes.begin(), header_bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ChecksumError(std::string("checkpoint header unreadable: ") + e.what());
    }
    const auto payload_start = rb.position();
    const auto payload = body.subspan(payload_start);
    Checkpoint out;
    out.meta = header.at("meta").dump();
    auto slice = [&](std::uint64_t offset, std::uint64_t nbytes) {
        if (offset > payload.size() || nbytes > payload.size() - offset) {
            throw ChecksumError("checkpoint entry exceeds the payload");
        }
        return payload.subspan(offset, nbytes);
    };
    for (const auto& t : header.at("tensors")) {
        const auto dtype = parse_dtype(t.at("dtype").get<std::string>());
        const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
        auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
        const auto src = slice(t.at("offset").get<std::uint64_t>(), t.at("nbytes").get<std::uint64_t>());
        if (src.size() != static_cast<std::size_t>(tensor.numel()) * tensor.element_size()) {
            throw ChecksumError("checkpoint tensor size disagrees with its shape");
        }
        std::memcpy(tensor.data_ptr(), src.data(), src.size());
        out.tensors.emplace_back(t.at("name").get<std::string>(), tensor);
    }
    for (const auto& b : header.at("blobs")) {
        const auto src = slice(b.at("offset").get<std::uint64_t>(), b.at("nbytes").get<std::uint64_t>());
        out.blobs.emplace_back(b.at("name").get<std::string>(), std::vector<std::uint8_t>(src.begin(), src.end()));
    }
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    detail::write_file_atomic(path.string(), serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(detail::read_file(path.string()));
}

std::vector<std::uint8_t> archive_bytes(torch::serialize::OutputArchive& archive) {
    std::ostringstream out;
    archive.save_to(out);
    const auto s = out.str();
    return {s.begin(), s.end()};
}

void load_archive(torch::serialize::InputArchive& archive, std::span<const std::uint8_t> bytes) {
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    archive.load_from(in);
}

}  // namespace dmd
