#include "dmd/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dmd/degrade.hpp"
#include "dmd/errors.hpp"
#include "dmd/imagedata.hpp"

namespace dmd {

namespace {

using ojson = nlohmann::ordered_json;

std::uint64_t splitmix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

ojson weights_json(const LossWeights& w) {
    ojson j;
    j["mse"] = w.mse;
    j["perc"] = w.perc;
    j["style"] = w.style;
    j["adv"] = w.adv;
    return j;
}

ojson config_json(const TrainConfig& c) {
    ojson j;
    j["batch_size"] = c.batch_size;
    j["lr_theta"] = c.lr_theta;
    j["lr_dict"] = c.lr_dict;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["lr_decay"] = c.lr_decay;
    j["plateau_patience"] = c.plateau_patience;
    j["min_delta"] = c.min_delta;
    j["stage"] = std::string(stage_name(c.stage));
    j["seed"] = c.seed;
    j["epochs"] = c.epochs;
    j["steps_per_epoch"] = c.steps_per_epoch;
    j["max_refs"] = c.max_refs;
    j["adversarial"] = c.adversarial;
    j["loss_weights"] = weights_json(c.weights);
    j["model"] = ojson::parse(config_to_json(c.model));
    j["variant"] = c.variant;
    return j;
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& item : j.items()) {
        if (!allowed.contains(item.key())) {
            throw DataError("unknown " + where + " key '" + item.key() + "'");
        }
    }
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(v.begin(), v.end(), rng);
    return v;
}

std::string stage_list_json(const std::vector<Stage>& stages) {
    ojson a = ojson::array();
    for (auto s : stages) a.push_back(std::string(stage_name(s)));
    return a.dump();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t x = splitmix(base);
    for (auto p : parts) {
        x = splitmix(x ^ splitmix(p + 0x632be59bd9b4e019ULL));
    }
    return x;
}

Corpus Corpus::load(const ReferenceManifest& manifest, int image_size) {
    Corpus c;
    for (const auto& rec : manifest.identities) {
        LoadedIdentity id{rec.identity_id, {}};
        for (const auto& img : rec.images) {
            LoadedImage li{img.image_path, load_aligned_image(img.image_path, image_size), load_landmarks(img.landmark_path)};
            validate_landmarks(li.landmarks, image_size, image_size);
            id.images.push_back(std::move(li));
        }
        c.identities.push_back(std::move(id));
    }
    return c;
}

std::size_t Corpus::image_count() const {
    std::size_t n = 0;
    for (const auto& id : identities) n += id.images.size();
    return n;
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw DataError("batch_size must be positive");
    if (!(lr_theta > 0) || !(lr_dict > 0)) throw DataError("learning rates must be positive");
    if (plateau_patience < 1) throw DataError("plateau_patience must be at least 1");
    if (min_delta < 0) throw DataError("min_delta must be non-negative");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw DataError("lr_decay must lie in (0, 1]");
    if (epochs < 0 || steps_per_epoch < 0) throw DataError("epochs and steps_per_epoch must be non-negative");
    if (max_refs < 0 || max_refs > kMaxReferences) throw DataError("max_refs must lie in [0, 21]");
    if (weights.mse < 0 || weights.perc < 0 || weights.style < 0 ||
        std::any_of(weights.adv.begin(), weights.adv.end(), [](double w) { return w < 0; })) {
        throw DataError("loss weights must be non-negative");
    }
    try {
        model.validate();
    } catch (const SizeError& e) {
        throw DataError(e.what());
    }
}

std::string train_config_to_json(const TrainConfig& config) {
    return config_json(config).dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    TrainConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        check_keys(j, {"batch_size", "lr_theta", "lr_dict", "adam_beta1", "adam_beta2", "lr_decay", "plateau_patience",
                       "min_delta", "stage", "seed", "epochs", "steps_per_epoch", "max_refs", "adversarial",
                       "loss_weights", "model", "variant"},
                   "config");
        read_key(j, "batch_size", c.batch_size);
        read_key(j, "lr_theta", c.lr_theta);
        read_key(j, "lr_dict", c.lr_dict);
        read_key(j, "adam_beta1", c.adam_beta1);
        read_key(j, "adam_beta2", c.adam_beta2);
        read_key(j, "lr_decay", c.lr_decay);
        read_key(j, "plateau_patience", c.plateau_patience);
        read_key(j, "min_delta", c.min_delta);
        if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
        read_key(j, "seed", c.seed);
        read_key(j, "epochs", c.epochs);
        read_key(j, "steps_per_epoch", c.steps_per_epoch);
        read_key(j, "max_refs", c.max_refs);
        read_key(j, "adversarial", c.adversarial);
        read_key(j, "variant", c.variant);
        if (j.contains("loss_weights")) {
            const auto& w = j.at("loss_weights");
            check_keys(w, {"mse", "perc", "style", "adv"}, "loss_weights");
            read_key(w, "mse", c.weights.mse);
            read_key(w, "perc", c.weights.perc);
            read_key(w, "style", c.weights.style);
            if (w.contains("adv")) c.weights.adv = w.at("adv").get<std::array<double, 3>>();
        }
        if (j.contains("model")) {
            check_keys(j.at("model"), {"base_channels", "num_scales", "dict_size", "input_size", "canonical_sizes",
                                       "transform_count", "use_generic", "use_specific", "read_mode"},
                       "model");
            c.model = config_from_json(j.at("model").dump());
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad training config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return train_config_from_json(ss.str());
}

bool plateau_detector(std::span<const double> history, int patience, double min_delta) {
    if (history.empty()) return false;
    double best = history[0];
    int since = 0;
    for (std::size_t i = 1; i < history.size(); ++i) {
        if (history[i] < best * (1.0 - min_delta)) {
            best = history[i];
            since = 0;
        } else {
            ++since;
        }
    }
    return since >= patience;
}

TrainConfig ablation_variant(const std::string& name, TrainConfig base) {
    base.variant = name;
    auto& m = base.model;
    if (name == "full") {
        return base;
    }
    if (name == "generic_only") {
        m.use_specific = false;
        return base;
    }
    if (name == "specific_only") {
        m.use_generic = false;
        return base;
    }
    if (name == "no_transform") {
        m.read_mode = ReadMode::BestMatch;
        return base;
    }
    auto all_digits = [](std::string_view s) {
        return !s.empty() && std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
    };
    if (name.size() >= 2 && name.back() == 'T' && all_digits(std::string_view(name).substr(0, name.size() - 1))) {
        const int k = std::stoi(name.substr(0, name.size() - 1));
        if (k < 1 || k > m.num_scales) throw UnknownVariantError("transform count out of range in '" + name + "'");
        m.transform_count = k;
        return base;
    }
    if (name.size() >= 2 && name.front() == 'Y' && all_digits(std::string_view(name).substr(1))) {
        m.dict_size = std::stoi(name.substr(1));
        return base;
    }
    throw UnknownVariantError("unknown ablation variant '" + name + "'");
}

std::vector<std::string> ablation_names(int num_scales) {
    std::vector<std::string> names = {"full", "generic_only", "specific_only", "no_transform"};
    for (int k = 1; k < num_scales; ++k) names.push_back(std::to_string(k) + "T");
    for (int y : {0, 4, 8, 16, 32}) names.push_back("Y" + std::to_string(y));
    return names;
}

Trainer::Trainer(TrainConfig config, Corpus train, Corpus val, std::filesystem::path out_dir)
    : config_(std::move(config)), train_(std::move(train)), val_(std::move(val)), out_dir_(std::move(out_dir)) {
    config_.validate();
    if (train_.image_count() == 0) throw EmptyDatasetError("training split is empty");
    if (val_.image_count() == 0) throw EmptyDatasetError("validation split is empty");
    model_ = std::make_unique<DmdModel>(config_.model, config_.seed);
    model_->generic.set_eta(config_.lr_dict);
    perceptual_ = PerceptualNet();
    if (dictionary_stages_active() && static_cast<int>(train_.identities.size()) < config_.model.dict_size) {
        throw DataError("generic dictionary of size " + std::to_string(config_.model.dict_size) + " needs as many training identities");
    }
    for (std::size_t i = 0; i < train_.identities.size(); ++i) {
        for (std::size_t j = 0; j < train_.identities[i].images.size(); ++j) samples_.push_back({i, j});
    }

    std::vector<torch::Tensor> g_params;
    for (auto* m : std::initializer_list<torch::nn::Module*>{model_->restorer.get(), model_->generic_extractor.get(),
                                                             model_->specific_extractor.get()}) {
        for (auto& p : m->parameters()) g_params.push_back(p);
    }
    for (auto& p : model_->generic.gamma_parameters()) g_params.push_back(p);
    const auto opts = torch::optim::AdamOptions(config_.lr_theta).betas({config_.adam_beta1, config_.adam_beta2});
    opt_g_ = std::make_unique<torch::optim::Adam>(g_params, opts);
    opt_d_ = std::make_unique<torch::optim::Adam>(model_->discriminator->parameters(), opts);
    lr_theta_ = config_.lr_theta;

    visited_.push_back(Stage::Init);
    if (dictionary_stages_active() && config_.stage != Stage::Init) {
        model_->generic.set_entries(live_generic(derive_seed(config_.seed, {0x5eed}), false));
        while (model_->generic.stage() != config_.stage) {
            model_->generic.advance(static_cast<Stage>(static_cast<int>(model_->generic.stage()) + 1));
            visited_.push_back(model_->generic.stage());
        }
    }
    std::filesystem::create_directories(out_dir_);
}

Trainer::~Trainer() = default;

ScalarLog& Trainer::log() {
    if (!log_.is_open()) log_ = ScalarLog(out_dir_ / "train_log.jsonl");
    return log_;
}

bool Trainer::dictionary_stages_active() const {
    const auto& m = config_.model;
    return m.dictionaries_enabled() && m.use_generic && m.active_transforms() > 0;
}

DictionarySet Trainer::live_generic(std::uint64_t seed, bool with_grad) {
    const int y = config_.model.dict_size;
    const auto ids = shuffled(train_.identities.size(), seed);
    std::mt19937_64 rng(derive_seed(seed, {1}));
    std::vector<Image> images;
    std::vector<LandmarkSet> lms;
    std::vector<std::string> names;
    for (int i = 0; i < y; ++i) {
        const auto& id = train_.identities[ids[i]];
        std::uniform_int_distribution<std::size_t> pick(0, id.images.size() - 1);
        const auto& li = id.images[pick(rng)];
        images.push_back(li.image);
        lms.push_back(li.landmarks);
        names.push_back(id.id);
    }
    std::optional<torch::NoGradGuard> guard;
    if (!with_grad) guard.emplace();
    return init_generic(model_->generic_extractor, stack_images(images), lms, names);
}

std::vector<DictionarySet> Trainer::specific_for(std::span<const std::vector<const LoadedImage*>> refs) {
    const auto shapes = config_.model.level_shapes();
    std::vector<DictionarySet> out(refs.size(), DictionarySet(DictKind::Specific, shapes));
    std::vector<Image> images;
    std::vector<LandmarkSet> lms;
    for (const auto& r : refs) {
        for (const auto* li : r) {
            images.push_back(li->image);
            lms.push_back(li->landmarks);
        }
    }
    if (images.empty()) return out;
    const auto all = model_->specific_extractor->extract(stack_images(images), lms, DictKind::Specific);
    std::int64_t offset = 0;
    for (std::size_t b = 0; b < refs.size(); ++b) {
        const auto k = static_cast<std::int64_t>(refs[b].size());
        if (k == 0) continue;
        for (int l = 0; l < all.num_levels(); ++l) {
            for (Component c : kComponents) {
                out[b].at(l, c).keys = all.at(l, c).keys.slice(0, offset, offset + k);
                out[b].at(l, c).values = all.at(l, c).values.slice(0, offset, offset + k);
            }
        }
        offset += k;
    }
    return out;
}

void Trainer::set_lr(double lr) {
    lr_theta_ = lr;
    for (auto* opt : {opt_g_.get(), opt_d_.get()}) {
        for (auto& group : opt->param_groups()) {
            static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
        }
    }
}

void Trainer::advance_stage() {
    const auto next = static_cast<Stage>(static_cast<int>(model_->generic.stage()) + 1);
    model_->generic.advance(next);
    visited_.push_back(next);
    stage_history_.clear();
    prev_gt_ = torch::Tensor();
    prev_landmarks_.clear();
    log().write(global_step_, "stage", static_cast<double>(next));
}

std::vector<std::pair<std::string, double>> Trainer::train_step(std::span<const std::size_t> batch,
                                                                std::uint64_t step_seed) {
    const int size = config_.model.input_size;
    model_->train(true);
    std::vector<Image> lqs, gts;
    std::vector<LandmarkSet> lms;
    std::vector<std::vector<const LoadedImage*>> refs(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& sample = samples_.at(batch[i]);
        const auto& id = train_.identities[sample.identity];
        const auto& li = id.images[sample.image];
        const auto s = derive_seed(step_seed, {i});
        auto [img, lm] = augment(li.image, li.landmarks, derive_seed(s, {1}));
        const auto params = sample_params(derive_seed(s, {2}), Task::Random);
        lqs.push_back(apply_degradation(img, params, derive_seed(s, {3}), size));
        gts.push_back(std::move(img));
        lms.push_back(lm);

        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < id.images.size(); ++j) {
            if (j != sample.image) others.push_back(j);
        }
        std::mt19937_64 rng(derive_seed(s, {4}));
        std::shuffle(others.begin(), others.end(), rng);
        const auto cap = std::min<std::size_t>(static_cast<std::size_t>(config_.max_refs), others.size());
        std::uniform_int_distribution<std::size_t> count(0, cap);
        const auto k = count(rng);
        for (std::size_t j = 0; j < k; ++j) refs[i].push_back(&id.images[others[j]]);
    }
    const auto lq = stack_images(lqs);
    const auto gt = stack_images(gts);

    auto& generic = model_->generic;
    const Stage stage = generic.stage();
    const bool uses_generic = dictionary_stages_active();
    DictionarySet generic_step;
    if (uses_generic) {
        switch (stage) {
        case Stage::Init:
            generic_step = live_generic(derive_seed(step_seed, {5}), true);
            break;
        case Stage::Forward:
            generic_step = generic.entries();
            if (prev_gt_.defined()) {
                const auto gt_set = model_->generic_extractor->extract(prev_gt_, prev_landmarks_, DictKind::Generic);
                for (std::int64_t b = 0; b < prev_gt_.size(0); ++b) {
                    generic_step = generic.apply_forward_update(generic_step, gt_set, b);
                }
            }
            break;
        case Stage::Backward:
        case Stage::Frozen:
            generic_step = generic.entries();
            break;
        }
    }
    std::vector<DictionarySet> specific;
    std::vector<const DictionarySet*> specific_ptrs;
    if (config_.model.use_specific && config_.model.active_transforms() > 0) {
        specific = specific_for(refs);
        for (const auto& s : specific) specific_ptrs.push_back(&s);
    }

    const RestoreBatch rb{lq, lms, uses_generic ? &generic_step : nullptr, specific_ptrs};
    const auto pred = model_->restorer->forward(rb);
    const auto taps = taps_of(perceptual_);
    LossTerms terms;
    terms.mse = dmd::mse_loss(pred, gt);
    terms.perc = perceptual_loss(pred, gt, taps);
    terms.style = style_loss(pred, gt, taps);
    terms.adv = config_.adversarial ? generator_loss(model_->discriminator->forward(pred), config_.weights)
                                    : torch::zeros({});
    auto lb = total_loss(terms, config_.weights);
    const double total = lb.terms.back().second;
    if (!std::isfinite(total)) {
        throw DivergenceError("loss became non-finite at step " + std::to_string(global_step_ + 1) +
                              "; last good checkpoint: " +
                              (out_dir_ / ("ckpt_epoch" + std::to_string(epoch_) + ".bin")).string());
    }
    opt_g_->zero_grad();
    opt_d_->zero_grad();
    lb.total.backward();
    opt_g_->step();
    if (uses_generic) {
        if (stage == Stage::Init) generic.set_entries(generic_step);
        if (stage == Stage::Forward) generic.commit_forward(generic_step);
        if (stage == Stage::Backward) generic.backward_step();
    }
    prev_gt_ = gt;
    prev_landmarks_ = lms;

    auto out = lb.terms;
    if (config_.adversarial) {
        opt_d_->zero_grad();
        const auto real = model_->discriminator->forward(gt);
        const auto fake = model_->discriminator->forward(pred.detach());
        const auto d_loss = discriminator_loss(real, fake);
        d_loss.backward();
        opt_d_->step();
        out.emplace_back("adv_d", d_loss.item<double>());
    }
    ++global_step_;
    for (const auto& [term, value] : out) log().write(global_step_, term, value);
    return out;
}

double Trainer::validate() {
    const int size = config_.model.input_size;
    model_->train(false);
    torch::NoGradGuard guard;
    const bool uses_generic = dictionary_stages_active();
    const auto taps = taps_of(perceptual_);
    std::vector<Image> lqs, gts;
    std::vector<LandmarkSet> lms;
    std::vector<std::vector<const LoadedImage*>> refs;
    double sum = 0.0;
    std::size_t count = 0;
    auto flush = [&]() {
        if (lqs.empty()) return;
        std::vector<DictionarySet> specific;
        std::vector<const DictionarySet*> ptrs;
        if (config_.model.use_specific && config_.model.active_transforms() > 0) {
            specific = specific_for(refs);
            for (const auto& s : specific) ptrs.push_back(&s);
        }
        const auto gt = stack_images(gts);
        const RestoreBatch rb{stack_images(lqs), lms, uses_generic ? &model_->generic.entries() : nullptr, ptrs};
        const auto pred = model_->restorer->forward(rb);
        const double rec = config_.weights.mse * dmd::mse_loss(pred, gt).item<double>() +
                           config_.weights.perc * perceptual_loss(pred, gt, taps).item<double>();
        sum += rec * static_cast<double>(lqs.size());
        count += lqs.size();
        lqs.clear();
        gts.clear();
        lms.clear();
        refs.clear();
    };
    std::uint64_t j = 0;
    for (const auto& id : val_.identities) {
        for (std::size_t i = 0; i < id.images.size(); ++i, ++j) {
            const auto& li = id.images[i];
            const auto params = sample_params(derive_seed(config_.seed, {0x7661, j}), Task::Random);
            lqs.push_back(apply_degradation(li.image, params, derive_seed(config_.seed, {0x7661, j, 1}), size));
            gts.push_back(li.image);
            lms.push_back(li.landmarks);
            std::vector<const LoadedImage*> r;
            for (std::size_t o = 0; o < id.images.size() && static_cast<int>(r.size()) < config_.max_refs; ++o) {
                if (o != i) r.push_back(&id.images[o]);
            }
            refs.push_back(std::move(r));
            if (static_cast<int>(lqs.size()) == config_.batch_size) flush();
        }
    }
    flush();
    model_->train(true);
    return sum / static_cast<double>(count);
}

EpochSummary Trainer::run_epoch() {
    EpochSummary summary;
    summary.stage = stage();
    const auto epoch_seed = derive_seed(config_.seed, {static_cast<std::uint64_t>(epoch_ + 1)});
    const auto order = shuffled(samples_.size(), epoch_seed);
    const std::size_t b = static_cast<std::size_t>(config_.batch_size);
    const std::size_t steps = config_.steps_per_epoch > 0 ? static_cast<std::size_t>(config_.steps_per_epoch)
                                                          : (samples_.size() + b - 1) / b;
    prev_gt_ = torch::Tensor();
    prev_landmarks_.clear();
    std::map<std::string, double> sums;
    std::vector<std::string> term_order;
    for (std::size_t s = 0; s < steps; ++s) {
        std::vector<std::size_t> batch;
        for (std::size_t i = 0; i < b; ++i) batch.push_back(order[(s * b + i) % order.size()]);
        for (const auto& [term, value] : train_step(batch, derive_seed(epoch_seed, {s}))) {
            if (!sums.contains(term)) term_order.push_back(term);
            sums[term] += value;
        }
    }
    for (const auto& t : term_order) summary.train_means.emplace_back(t, sums[t] / static_cast<double>(steps));

    const double val = validate();
    ++epoch_;
    summary.epoch = epoch_;
    summary.val_rec = val;
    val_history_.push_back(val);
    stage_history_.push_back(val);
    log().write(global_step_, "val_rec", val);
    if (plateau_detector(stage_history_, config_.plateau_patience, config_.min_delta)) {
        if (dictionary_stages_active() && stage() != Stage::Frozen) {
            advance_stage();
            summary.stage_advanced = true;
        } else {
            set_lr(lr_theta_ * config_.lr_decay);
            stage_history_.clear();
            summary.lr_decayed = true;
            log().write(global_step_, "lr_theta", lr_theta_);
        }
    }
    summary.lr_theta = lr_theta_;
    summary.checkpoint = out_dir_ / ("ckpt_epoch" + std::to_string(epoch_) + ".bin");
    save_checkpoint(make_checkpoint(), summary.checkpoint);
    log().flush();
    return summary;
}

std::vector<EpochSummary> Trainer::run() {
    std::vector<EpochSummary> out;
    while (epoch_ < config_.epochs) out.push_back(run_epoch());
    return out;
}

Checkpoint Trainer::make_checkpoint() {
    Checkpoint ckpt;
    ojson meta;
    meta["format"] = "dmdface-train";
    meta["epoch"] = epoch_;
    meta["global_step"] = global_step_;
    meta["stage"] = std::string(stage_name(model_->generic.stage()));
    meta["lr_theta"] = lr_theta_;
    meta["stage_history"] = stage_history_;
    meta["val_history"] = val_history_;
    meta["visited"] = ojson::parse(stage_list_json(visited_));
    meta["train_config"] = config_json(config_);
    ckpt.meta = meta.dump();
    ckpt.add_module("restorer.", *model_->restorer);
    ckpt.add_module("generic_extractor.", *model_->generic_extractor);
    ckpt.add_module("specific_extractor.", *model_->specific_extractor);
    ckpt.add_module("discriminator.", *model_->discriminator);
    ckpt.add_module("perceptual.", *perceptual_);

    DictionaryBundle bundle{model_->generic.entries(), model_->generic.stage(), model_->generic.eta(),
                            model_->generic.gamma_k_logits(), model_->generic.gamma_v_logits()};
    ckpt.blobs.emplace_back("generic_dictionary", serialize(bundle));
    for (const auto& [name, opt] : {std::pair{"optim_g", opt_g_.get()}, std::pair{"optim_d", opt_d_.get()}}) {
        torch::serialize::OutputArchive ar;
        opt->save(ar);
        ckpt.blobs.emplace_back(name, archive_bytes(ar));
    }
    return ckpt;
}

namespace {

void load_generic(DmdModel& model, const Checkpoint& ckpt) {
    const auto* blob = ckpt.blob("generic_dictionary");
    if (blob == nullptr) throw DataError("checkpoint lacks the generic dictionary");
    auto bundle = deserialize(*blob);
    model.generic.restore(bundle.stage, bundle.set.empty() ? DictionarySet(DictKind::Generic, model.config.level_shapes())
                                                           : bundle.set);
    model.generic.set_eta(bundle.eta);
    if (!bundle.gamma_k_logits.empty()) model.generic.set_gamma_logits(bundle.gamma_k_logits, bundle.gamma_v_logits);
}

}  // namespace

std::unique_ptr<DmdModel> model_from_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(ckpt.meta);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint metadata unreadable: ") + e.what());
    }
    if (!meta.contains("train_config")) throw DataError("not a training checkpoint");
    const auto cfg = config_from_json(meta.at("train_config").at("model").dump());
    auto model = std::make_unique<DmdModel>(cfg, 0);
    ckpt.load_module("restorer.", *model->restorer);
    ckpt.load_module("generic_extractor.", *model->generic_extractor);
    ckpt.load_module("specific_extractor.", *model->specific_extractor);
    ckpt.load_module("discriminator.", *model->discriminator);
    load_generic(*model, ckpt);
    model->train(false);
    return model;
}

std::unique_ptr<DmdModel> load_model(const std::filesystem::path& checkpoint) {
    return model_from_checkpoint(load_checkpoint(checkpoint));
}

void Trainer::resume(const std::filesystem::path& checkpoint) {
    const auto ckpt = load_checkpoint(checkpoint);
    const auto meta = nlohmann::json::parse(ckpt.meta);
    if (meta.at("train_config").at("model").dump() != nlohmann::json::parse(config_to_json(config_.model)).dump()) {
        throw DataError("checkpoint was trained with a different model configuration");
    }
    ckpt.load_module("restorer.", *model_->restorer);
    ckpt.load_module("generic_extractor.", *model_->generic_extractor);
    ckpt.load_module("specific_extractor.", *model_->specific_extractor);
    ckpt.load_module("discriminator.", *model_->discriminator);
    ckpt.load_module("perceptual.", *perceptual_);
    load_generic(*model_, ckpt);
    for (const auto& [name, opt] : {std::pair{"optim_g", opt_g_.get()}, std::pair{"optim_d", opt_d_.get()}}) {
        const auto* blob = ckpt.blob(name);
        if (blob == nullptr) throw DataError(std::string("checkpoint lacks ") + name);
        torch::serialize::InputArchive ar;
        load_archive(ar, *blob);
        opt->load(ar);
    }
    epoch_ = meta.at("epoch").get<int>();
    global_step_ = meta.at("global_step").get<std::int64_t>();
    set_lr(meta.at("lr_theta").get<double>());
    stage_history_ = meta.at("stage_history").get<std::vector<double>>();
    val_history_ = meta.at("val_history").get<std::vector<double>>();
    visited_.clear();
    for (const auto& s : meta.at("visited")) visited_.push_back(parse_stage(s.get<std::string>()));
    prev_gt_ = torch::Tensor();
    prev_landmarks_.clear();
    // Drop records written after the checkpoint so the log continues seamlessly.
    const auto log_path = out_dir_ / "train_log.jsonl";
    std::vector<ScalarRecord> kept;
    if (std::filesystem::exists(log_path)) {
        for (auto& r : read_scalar_log(log_path)) {
            if (r.step <= global_step_) kept.push_back(std::move(r));
        }
    }
    log_ = ScalarLog(log_path);
    for (const auto& r : kept) log_.write(r.step, r.term, r.value);
    log_.flush();
}

}  // namespace dmd
