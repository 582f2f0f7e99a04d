#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dmd/checkpoint.hpp"
#include "dmd/degrade.hpp"
#include "dmd/image.hpp"
#include "dmd/network.hpp"
#include "dmd/training.hpp"

namespace dmd {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / mse) over all channels, capped at 100 dB for mse < 1e-10.
double psnr(const Image& pred, const Image& gt);

/// Mean SSIM of the luma images over every valid 11x11 Gaussian window
/// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Image& pred, const Image& gt);

/// Four stride-2 convolutions and a global pool; the pooled vector is the
/// embedding, a linear layer on top classifies training identities.
struct IdentityEmbedderImpl : torch::nn::Module {
    explicit IdentityEmbedderImpl(int num_classes);
    torch::Tensor embed(const torch::Tensor& images);  // [B,64]
    torch::Tensor forward(const torch::Tensor& images);  // logits

    int num_classes;
    std::vector<torch::nn::Conv2d> convs;
    torch::nn::Linear classifier{nullptr};
};
TORCH_MODULE(IdentityEmbedder);

struct EmbedderTraining {
    int epochs = 40;
    int batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 7;
};

/// Central 80% crop used for the identity metric.
torch::Tensor face_region(const torch::Tensor& images);

/// Trains on augmented images of every identity in the corpus.
IdentityEmbedder train_embedder(const Corpus& corpus, const EmbedderTraining& opts = {});
void save_embedder(IdentityEmbedder& embedder, const std::filesystem::path& path);
IdentityEmbedder load_embedder(const std::filesystem::path& path);

/// Cosine similarity of the L2-normalized embeddings of the face regions.
double identity_cosine(const Image& pred, const Image& gt, IdentityEmbedder& embedder);

struct EvalRecord {
    std::string path;
    std::string identity;
    std::string variant;  // generic_only or full
    std::string task;
    double psnr_db = 0.0;
    double ssim = 0.0;
    std::optional<double> id_cosine;
    double lq_psnr_db = 0.0;
    int n_refs = 0;
};

struct EvalAggregate {
    std::string variant;
    std::string task;
    std::size_t count = 0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    std::optional<double> id_cosine;
    double lq_psnr_db = 0.0;
};

struct EvalReport {
    std::vector<EvalRecord> records;
    std::vector<EvalAggregate> aggregates;

    const EvalAggregate* aggregate(const std::string& variant, const std::string& task) const;
};

/// Arithmetic means of the records per (variant, task), in first-seen order.
std::vector<EvalAggregate> aggregate_records(const std::vector<EvalRecord>& records);

struct EvalOptions {
    Task task = Task::X4;
    std::uint64_t seed = 1;
    int max_refs = kMaxReferences;
};

/// Degrades every image with seeded per-image parameters, restores it with
/// and without a specific dictionary built from the identity's other images.
EvalReport evaluate(DmdModel& model, const Corpus& test, const EvalOptions& opts,
                    IdentityEmbedder* embedder = nullptr);

/// Header record, one record per image and variant, then the aggregates.
void write_report(const EvalReport& report, const std::filesystem::path& path);
std::string report_jsonl(const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);
std::string format_table(const EvalReport& report);

}  // namespace dmd
