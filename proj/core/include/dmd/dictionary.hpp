#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "dmd/geometry.hpp"

namespace dmd {

inline constexpr int kKeyDim = 64;
inline constexpr double kBackwardLearningRate = 2e-6;

enum class DictKind : std::uint8_t { Generic = 0, Specific = 1 };

/// Lifecycle of the generic dictionary. Transitions only step forward by one.
enum class Stage : std::uint8_t { Init = 0, Forward = 1, Backward = 2, Frozen = 3 };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);

/// Entries of one facial component at one feature level.
struct ComponentDictionary {
    Component component = Component::LeftEye;
    int level = 0;
    DictKind kind = DictKind::Generic;
    torch::Tensor keys;    // [n, 64]
    torch::Tensor values;  // [n, C, h, w]

    std::int64_t size() const { return keys.defined() ? keys.size(0) : 0; }
};

/// Shape of the value maps stored at one level.
struct LevelShape {
    int channels = 0;
    std::array<CanonicalSize, kNumComponents> sizes{};
};

/// One ComponentDictionary per (level, component), level 0 finest.
class DictionarySet {
public:
    DictionarySet() = default;
    DictionarySet(DictKind kind, std::vector<LevelShape> shapes);

    DictKind kind() const { return kind_; }
    int num_levels() const { return static_cast<int>(shapes_.size()); }
    const std::vector<LevelShape>& shapes() const { return shapes_; }

    ComponentDictionary& at(int level, Component c) { return dicts_[level * kNumComponents + index_of(c)]; }
    const ComponentDictionary& at(int level, Component c) const { return dicts_[level * kNumComponents + index_of(c)]; }

    std::vector<ComponentDictionary>& all() { return dicts_; }
    const std::vector<ComponentDictionary>& all() const { return dicts_; }

    /// Entry count shared by all dictionaries of the set.
    std::int64_t entries_per_dictionary() const;
    bool empty() const { return entries_per_dictionary() == 0; }

    /// Detached deep copy.
    DictionarySet clone() const;

    /// Entries reordered by the given permutation at every (level, component).
    DictionarySet permuted(const std::vector<std::int64_t>& order) const;

private:
    DictKind kind_ = DictKind::Generic;
    std::vector<LevelShape> shapes_;
    std::vector<ComponentDictionary> dicts_;
};

/// Index of the entry whose key has the highest cosine similarity with
/// gt_key. Ties go to the lowest index.
std::int64_t best_cosine_entry(const torch::Tensor& keys, const torch::Tensor& gt_key);

/// Momentum update of the best-matching entry:
/// key* = g_k*key + (1-g_k)*gt_key, value* = g_v*value + (1-g_v)*gt_value.
/// Differentiable in the gammas and the ground-truth features.
/// Throws StageError unless stage is Forward.
ComponentDictionary forward_update(const ComponentDictionary& dict, const torch::Tensor& gt_key,
                                   const torch::Tensor& gt_value, const torch::Tensor& gamma_k,
                                   const torch::Tensor& gamma_v, Stage stage);

/// Generic dictionary state across the three training stages plus FROZEN.
class GenericDictionary {
public:
    GenericDictionary() = default;
    GenericDictionary(std::vector<LevelShape> shapes, int dict_size, double initial_gamma = 0.99);

    Stage stage() const { return stage_; }
    double eta() const { return eta_; }
    void set_eta(double eta) { eta_ = eta; }
    int dict_size() const { return dict_size_; }
    const std::vector<LevelShape>& shapes() const { return shapes_; }

    const DictionarySet& entries() const { return entries_; }

    /// Stores a snapshot of extractor outputs. Only legal in INIT.
    void set_entries(const DictionarySet& live);

    /// Replaces stored entries with detached copies of an updated set. Only legal in FORWARD.
    void commit_forward(const DictionarySet& updated);

    /// INIT->FORWARD->BACKWARD->FROZEN, one step at a time.
    void advance(Stage target);

    torch::Tensor gamma_k(int level, Component c) const;
    torch::Tensor gamma_v(int level, Component c) const;
    /// Unconstrained logits behind the gammas (trainable during FORWARD).
    std::vector<torch::Tensor> gamma_parameters() const;
    std::vector<float> gamma_k_logits() const;
    std::vector<float> gamma_v_logits() const;
    void set_gamma_logits(std::span<const float> k, std::span<const float> v);

    /// Keys and values that receive gradients during BACKWARD.
    std::vector<torch::Tensor> entry_parameters() const;

    /// entries -= eta * grad, then clears the gradients. Only legal in BACKWARD.
    void backward_step();

    /// Applies forward_update for every (level, component) with one
    /// ground-truth sample. Only legal in FORWARD.
    DictionarySet apply_forward_update(const DictionarySet& base, const DictionarySet& gt, std::int64_t sample) const;

    /// Restores a serialized state without the stage machine checks.
    void restore(Stage stage, const DictionarySet& entries);

private:
    std::vector<LevelShape> shapes_;
    int dict_size_ = 0;
    Stage stage_ = Stage::Init;
    double eta_ = kBackwardLearningRate;
    DictionarySet entries_;
    std::vector<torch::Tensor> gamma_k_logit_;
    std::vector<torch::Tensor> gamma_v_logit_;
};

struct DictionaryBundle {
    DictionarySet set;
    Stage stage = Stage::Frozen;
    double eta = kBackwardLearningRate;
    std::vector<float> gamma_k_logits;  // per (level, component), may be empty
    std::vector<float> gamma_v_logits;
};

/// Byte layout is documented in docs/file-formats.md.
std::vector<std::uint8_t> serialize(const DictionaryBundle& bundle);
DictionaryBundle deserialize(std::span<const std::uint8_t> bytes);

void save_dictionary(const DictionaryBundle& bundle, const std::filesystem::path& path);
DictionaryBundle load_dictionary(const std::filesystem::path& path);

/// FNV-1a over the raw float bytes of every key and value.
std::uint64_t content_hash(const DictionarySet& set);

}  // namespace dmd
