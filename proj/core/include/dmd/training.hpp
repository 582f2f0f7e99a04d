#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmd/checkpoint.hpp"
#include "dmd/dictionary.hpp"
#include "dmd/losses.hpp"
#include "dmd/manifest.hpp"
#include "dmd/network.hpp"
#include "dmd/records.hpp"

namespace dmd {

struct LoadedImage {
    std::filesystem::path path;
    Image image;
    LandmarkSet landmarks;
};

struct LoadedIdentity {
    std::string id;
    std::vector<LoadedImage> images;
};

/// Images and landmarks of one split, held in memory.
struct Corpus {
    std::vector<LoadedIdentity> identities;

    static Corpus load(const ReferenceManifest& manifest, int image_size);
    std::size_t image_count() const;
};

struct TrainConfig {
    int batch_size = 4;
    double lr_theta = 2e-4;
    double lr_dict = 2e-6;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double lr_decay = 0.5;
    int plateau_patience = 5;
    double min_delta = 0.01;  // relative improvement
    Stage stage = Stage::Init;
    std::uint64_t seed = 1;
    int epochs = 30;
    int steps_per_epoch = 0;  // 0: one pass over the training images
    int max_refs = 8;
    bool adversarial = true;
    LossWeights weights;
    RestorerConfig model;
    std::string variant = "full";

    /// Throws DataError for out-of-range values.
    void validate() const;
};

std::string train_config_to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys raise DataError.
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);

/// True iff the best value has not improved by more than min_delta
/// (relative) for `patience` consecutive entries.
bool plateau_detector(std::span<const double> history, int patience, double min_delta);

/// full, generic_only, specific_only, no_transform, <k>T, Y<n>.
/// Throws UnknownVariantError.
TrainConfig ablation_variant(const std::string& name, TrainConfig base = {});
std::vector<std::string> ablation_names(int num_scales);

/// Independent 64-bit seed from a base seed and a list of indices.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts);

struct EpochSummary {
    int epoch = 0;
    Stage stage = Stage::Init;  // stage the epoch was trained in
    double val_rec = 0.0;
    double lr_theta = 0.0;
    std::vector<std::pair<std::string, double>> train_means;
    std::filesystem::path checkpoint;
    bool stage_advanced = false;
    bool lr_decayed = false;
};

class Trainer {
public:
    /// out_dir receives ckpt_epoch{N}.bin files and train_log.jsonl.
    Trainer(TrainConfig config, Corpus train, Corpus val, std::filesystem::path out_dir);
    ~Trainer();

    /// Continues from a checkpoint written by this class.
    void resume(const std::filesystem::path& checkpoint);

    EpochSummary run_epoch();
    std::vector<EpochSummary> run();

    /// One generator + discriminator update on the given training samples.
    std::vector<std::pair<std::string, double>> train_step(std::span<const std::size_t> samples,
                                                           std::uint64_t step_seed);

    /// Mean lambda_mse * mse + lambda_perc * perc over the validation split.
    double validate();

    DmdModel& model() { return *model_; }
    const TrainConfig& config() const { return config_; }
    int epoch() const { return epoch_; }
    std::int64_t global_step() const { return global_step_; }
    Stage stage() const { return model_->generic.stage(); }
    const std::vector<Stage>& visited() const { return visited_; }
    const std::vector<double>& val_history() const { return val_history_; }
    double lr_theta() const { return lr_theta_; }
    std::size_t train_sample_count() const { return samples_.size(); }

    Checkpoint make_checkpoint();

private:
    struct Sample {
        std::size_t identity;
        std::size_t image;
    };

    bool dictionary_stages_active() const;
    DictionarySet live_generic(std::uint64_t seed, bool with_grad);
    std::vector<DictionarySet> specific_for(std::span<const std::vector<const LoadedImage*>> refs);
    void set_lr(double lr);
    void advance_stage();
    ScalarLog& log();

    TrainConfig config_;
    Corpus train_;
    Corpus val_;
    std::filesystem::path out_dir_;
    std::unique_ptr<DmdModel> model_;
    PerceptualNet perceptual_{nullptr};
    std::unique_ptr<torch::optim::Adam> opt_g_;
    std::unique_ptr<torch::optim::Adam> opt_d_;
    ScalarLog log_;
    std::vector<Sample> samples_;
    int epoch_ = 0;
    std::int64_t global_step_ = 0;
    double lr_theta_ = 0.0;
    std::vector<double> stage_history_;
    std::vector<double> val_history_;
    std::vector<Stage> visited_;
    // Ground truth of the previous step, consumed by the FORWARD update.
    torch::Tensor prev_gt_;
    std::vector<LandmarkSet> prev_landmarks_;
};

/// Rebuilds the model stored in a training checkpoint.
std::unique_ptr<DmdModel> load_model(const std::filesystem::path& checkpoint);
std::unique_ptr<DmdModel> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dmd
