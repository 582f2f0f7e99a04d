#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace dmd {

/// Named tensors and opaque blobs with a JSON metadata document.
/// Byte layout is documented in docs/file-formats.md.
struct Checkpoint {
    std::string meta = "{}";  // JSON object
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> blobs;

    const torch::Tensor* tensor(const std::string& name) const;
    const std::vector<std::uint8_t>* blob(const std::string& name) const;

    /// Every parameter and buffer of module, stored as prefix + name.
    void add_module(const std::string& prefix, torch::nn::Module& module);
    /// Copies stored tensors into module. Throws DataError when one is missing.
    void load_module(const std::string& prefix, torch::nn::Module& module) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws VersionError on a foreign header and ChecksumError on damage.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

/// Written to a temporary file and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> archive_bytes(torch::serialize::OutputArchive& archive);
void load_archive(torch::serialize::InputArchive& archive, std::span<const std::uint8_t> bytes);

}  // namespace dmd
