#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmd/degrade.hpp"
#include "dmd/dictionary.hpp"
#include "dmd/errors.hpp"
#include "dmd/evalkit.hpp"
#include "dmd/geometry.hpp"
#include "dmd/image.hpp"
#include "dmd/manifest.hpp"
#include "dmd/network.hpp"
#include "dmd/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Globals {
    std::uint64_t seed = 1;
    std::string config;
    bool verbose = false;
};

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw dmd::UsageError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void print_resolved(const std::string& verb, const json& resolved, std::uint64_t seed) {
    json j;
    j["command"] = verb;
    j["seed"] = seed;
    j["config"] = resolved;
    std::cerr << j.dump() << '\n';
}

std::vector<fs::path> png_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw dmd::UsageError(dir.string() + " is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

fs::path sidecar(const fs::path& png) {
    auto p = png;
    p.replace_extension(".lm");
    return p;
}

// A config file wins over --seed when it names a seed itself.
dmd::TrainConfig resolve_train_config(const Globals& g) {
    dmd::TrainConfig cfg;
    if (!g.config.empty()) {
        const auto text = read_text(g.config);
        cfg = dmd::train_config_from_json(text);
        if (!nlohmann::json::parse(text).contains("seed")) cfg.seed = g.seed;
    } else {
        cfg.seed = g.seed;
    }
    return cfg;
}

struct DegradeArgs {
    std::string in, out, task = "random";
    int size = 64;
};

int run_degrade(const Globals& g, const DegradeArgs& a) {
    const auto task = dmd::parse_task(a.task);
    print_resolved("degrade", {{"in", a.in}, {"out", a.out}, {"task", a.task}, {"size", a.size}}, g.seed);
    const auto files = png_files(a.in);
    fs::create_directories(a.out);
    std::ofstream manifest(fs::path(a.out) / "degradation.jsonl", std::ios::trunc);
    std::uint64_t idx = 0;
    for (const auto& f : files) {
        const auto rel = fs::relative(f, a.in);
        const auto img_seed = dmd::derive_seed(g.seed, {idx++});
        const auto params = dmd::sample_params(img_seed, task);
        const auto noise_seed = dmd::derive_seed(img_seed, {1});
        const auto hq = dmd::load_aligned_image(f, a.size);
        const auto lq = dmd::apply_degradation(hq, params, noise_seed, a.size);
        const auto dst = fs::path(a.out) / rel;
        fs::create_directories(dst.parent_path());
        dmd::save_png(lq, dst);
        if (fs::exists(sidecar(f))) fs::copy_file(sidecar(f), sidecar(dst), fs::copy_options::overwrite_existing);
        json rec;
        rec["path"] = rel.string();
        rec["rho"] = params.rho;
        rec["r"] = params.r;
        rec["sigma"] = params.sigma;
        rec["q"] = params.q;
        rec["seed"] = noise_seed;
        manifest << rec.dump() << '\n';
        if (g.verbose) std::cerr << rel.string() << '\n';
    }
    std::cout << "degraded " << files.size() << " images into " << a.out << '\n';
    return 0;
}

struct RefSet {
    std::vector<dmd::Image> images;
    std::vector<dmd::LandmarkSet> landmarks;
};

RefSet load_refs(const fs::path& dir, int size) {
    RefSet refs;
    for (const auto& f : png_files(dir)) {
        if (!fs::exists(sidecar(f))) throw dmd::UsageError("reference " + f.string() + " has no .lm sidecar");
        refs.images.push_back(dmd::load_aligned_image(f, size));
        refs.landmarks.push_back(dmd::load_landmarks(sidecar(f)));
        dmd::validate_landmarks(refs.landmarks.back(), size, size);
    }
    if (refs.images.size() > static_cast<std::size_t>(dmd::kMaxReferences)) {
        throw dmd::TooManyRefsError(std::to_string(refs.images.size()) + " references exceed the limit of 21");
    }
    return refs;
}

dmd::DictionarySet specific_from_refs(dmd::DmdModel& model, const RefSet& refs) {
    torch::NoGradGuard guard;
    return dmd::build_specific(model.specific_extractor,
                               refs.images.empty() ? torch::Tensor() : dmd::stack_images(refs.images), refs.landmarks);
}

struct BuildDictArgs {
    std::string checkpoint, refs, out;
    bool generic = false;
};

int run_build_dict(const Globals& g, const BuildDictArgs& a) {
    print_resolved("build-dict", {{"checkpoint", a.checkpoint}, {"refs", a.refs}, {"generic", a.generic}, {"out", a.out}},
                   g.seed);
    auto model = dmd::load_model(a.checkpoint);
    dmd::DictionaryBundle bundle;
    if (a.generic) {
        if (!a.refs.empty()) throw dmd::UsageError("--generic and --refs are exclusive");
        bundle = {model->generic.entries(), model->generic.stage(), model->generic.eta(),
                  model->generic.gamma_k_logits(), model->generic.gamma_v_logits()};
    } else {
        if (a.refs.empty()) throw dmd::UsageError("build-dict needs --refs DIR or --generic");
        bundle.set = specific_from_refs(*model, load_refs(a.refs, model->config.input_size));
        bundle.stage = dmd::Stage::Frozen;
    }
    dmd::save_dictionary(bundle, a.out);
    std::cout << "wrote " << bundle.set.entries_per_dictionary() << " entries per dictionary to " << a.out << '\n';
    return 0;
}

struct TrainArgs {
    std::string data_root, train_manifest, val_manifest, out, resume, variant;
    std::vector<int> splits = {64, 4, 12};
    double min_sharpness = 0.0;
    int epochs = -1;
};

int run_train(const Globals& g, const TrainArgs& a) {
    auto cfg = resolve_train_config(g);
    if (!a.variant.empty()) cfg = dmd::ablation_variant(a.variant, cfg);
    if (a.epochs >= 0) cfg.epochs = a.epochs;
    cfg.validate();
    fs::create_directories(a.out);
    dmd::ReferenceManifest train_m, val_m;
    if (!a.data_root.empty()) {
        if (a.splits.size() != 3) throw dmd::UsageError("--splits takes train,val,test counts");
        const auto set = dmd::build_reference_manifest(a.data_root, a.min_sharpness,
                                                       {a.splits[0], a.splits[1], a.splits[2]}, cfg.seed);
        dmd::write_manifest(set.train, fs::path(a.out) / "train.jsonl");
        dmd::write_manifest(set.val, fs::path(a.out) / "val.jsonl");
        dmd::write_manifest(set.test, fs::path(a.out) / "test.jsonl");
        train_m = set.train;
        val_m = set.val;
    } else if (!a.train_manifest.empty() && !a.val_manifest.empty()) {
        train_m = dmd::read_manifest(a.train_manifest);
        val_m = dmd::read_manifest(a.val_manifest);
    } else {
        throw dmd::UsageError("train needs --data-root or both --train-manifest and --val-manifest");
    }
    print_resolved("train", json::parse(dmd::train_config_to_json(cfg)), cfg.seed);
    {
        std::ofstream out(fs::path(a.out) / "config.json", std::ios::trunc);
        out << dmd::train_config_to_json(cfg) << '\n';
    }
    dmd::Trainer trainer(cfg, dmd::Corpus::load(train_m, cfg.model.input_size),
                         dmd::Corpus::load(val_m, cfg.model.input_size), a.out);
    if (!a.resume.empty()) trainer.resume(a.resume);
    while (trainer.epoch() < cfg.epochs) {
        const auto s = trainer.run_epoch();
        std::cout << "epoch " << s.epoch << " stage " << dmd::stage_name(s.stage) << " val_rec " << s.val_rec
                  << " lr " << s.lr_theta << (s.stage_advanced ? " [stage advanced]" : "")
                  << (s.lr_decayed ? " [lr decayed]" : "") << std::endl;
        if (g.verbose) {
            for (const auto& [term, v] : s.train_means) std::cout << "  " << term << " " << v << '\n';
        }
    }
    return 0;
}

struct RestoreArgs {
    std::string in, landmarks, checkpoint, generic_dict, specific_dict, refs, out, dump_attention;
};

json trace_json(const dmd::ReadTrace& trace) {
    json arr = json::array();
    for (const auto& t : trace) {
        json j;
        j["level"] = t.level;
        j["component"] = std::string(dmd::component_name(t.component));
        j["generic_weights"] = t.generic_weights.empty() ? json(nullptr) : json(t.generic_weights.front());
        j["specific_weights"] =
            t.specific_weights.empty() || t.specific_weights.front().empty() ? json(nullptr) : json(t.specific_weights.front());
        j["identity_score"] = t.identity_score.empty() || !t.identity_score.front() ? json(nullptr)
                                                                                  : json(*t.identity_score.front());
        arr.push_back(j);
    }
    return arr;
}

int run_restore(const Globals& g, const RestoreArgs& a) {
    print_resolved("restore",
                   {{"in", a.in}, {"landmarks", a.landmarks}, {"checkpoint", a.checkpoint},
                    {"generic_dict", a.generic_dict}, {"specific_dict", a.specific_dict}, {"refs", a.refs},
                    {"out", a.out}, {"dump_attention", a.dump_attention}},
                   g.seed);
    if (!a.specific_dict.empty() && !a.refs.empty()) throw dmd::UsageError("--specific-dict and --refs are exclusive");
    auto model = dmd::load_model(a.checkpoint);
    const int size = model->config.input_size;
    if (!a.generic_dict.empty()) {
        auto bundle = dmd::load_dictionary(a.generic_dict);
        if (bundle.set.kind() != dmd::DictKind::Generic) throw dmd::UsageError(a.generic_dict + " is not a generic dictionary");
        model->generic.restore(dmd::Stage::Frozen, bundle.set);
    }
    const auto lq = dmd::load_aligned_image(a.in, size);
    dmd::LandmarkSet lm = dmd::template_landmarks(size);
    if (!a.landmarks.empty()) {
        lm = dmd::load_landmarks(a.landmarks);
        dmd::validate_landmarks(lm, size, size);
    }
    std::optional<dmd::DictionarySet> specific;
    if (!a.specific_dict.empty()) {
        auto bundle = dmd::load_dictionary(a.specific_dict);
        if (bundle.set.kind() != dmd::DictKind::Specific) throw dmd::UsageError(a.specific_dict + " is not a specific dictionary");
        specific = std::move(bundle.set);
    } else if (!a.refs.empty()) {
        specific = specific_from_refs(*model, load_refs(a.refs, size));
    }
    dmd::ReadTrace trace;
    const auto out = dmd::restore(*model, lq, lm, specific ? &*specific : nullptr, &trace);
    dmd::save_png(out, a.out);
    if (!a.dump_attention.empty()) {
        json j;
        j["input"] = a.in;
        j["reads"] = trace_json(trace);
        std::ofstream f(a.dump_attention, std::ios::trunc);
        f << j.dump(2) << '\n';
    }
    std::cout << "wrote " << a.out << '\n';
    return 0;
}

struct EvalArgs {
    std::string checkpoint, manifest, task = "x4", out, embedder, train_manifest, save_embedder, format = "jsonl";
    int max_refs = dmd::kMaxReferences;
};

int run_eval(const Globals& g, const EvalArgs& a) {
    print_resolved("eval",
                   {{"checkpoint", a.checkpoint}, {"manifest", a.manifest}, {"task", a.task}, {"out", a.out},
                    {"embedder", a.embedder}, {"train_manifest", a.train_manifest}, {"format", a.format},
                    {"max_refs", a.max_refs}},
                   g.seed);
    const auto task = dmd::parse_task(a.task);
    if (task == dmd::Task::Random) throw dmd::UsageError("eval tasks are x4 and x8");
    auto model = dmd::load_model(a.checkpoint);
    const int size = model->config.input_size;
    std::optional<dmd::IdentityEmbedder> embedder;
    if (!a.embedder.empty()) {
        embedder = dmd::load_embedder(a.embedder);
    } else if (!a.train_manifest.empty()) {
        embedder = dmd::train_embedder(dmd::Corpus::load(dmd::read_manifest(a.train_manifest), size),
                                       {.seed = dmd::derive_seed(g.seed, {0xE3B})});
        if (!a.save_embedder.empty()) dmd::save_embedder(*embedder, a.save_embedder);
    }
    const auto test = dmd::Corpus::load(dmd::read_manifest(a.manifest), size);
    const auto report = dmd::evaluate(*model, test, {task, g.seed, a.max_refs}, embedder ? &*embedder : nullptr);
    if (!a.out.empty()) dmd::write_report(report, a.out);
    if (a.format == "table") {
        std::cout << dmd::format_table(report);
    } else {
        std::cout << dmd::report_jsonl(report);
    }
    return 0;
}

struct AblateArgs {
    std::string variant, out;
    bool list = false;
};

int run_ablate(const Globals& g, const AblateArgs& a) {
    auto base = resolve_train_config(g);
    if (a.list) {
        for (const auto& n : dmd::ablation_names(base.model.num_scales)) std::cout << n << '\n';
        return 0;
    }
    if (a.variant.empty()) throw dmd::UsageError("ablate needs --variant NAME or --list");
    const auto cfg = dmd::ablation_variant(a.variant, base);
    const auto text = dmd::train_config_to_json(cfg);
    print_resolved("ablate", json::parse(text), cfg.seed);
    if (a.out.empty()) {
        std::cout << text << '\n';
    } else {
        std::ofstream out(a.out, std::ios::trunc);
        out << text << '\n';
        std::cout << "wrote " << a.out << '\n';
    }
    return 0;
}

bool is_user_error(const dmd::Error& e) {
    return dynamic_cast<const dmd::DivergenceError*>(&e) == nullptr &&
           dynamic_cast<const dmd::StageError*>(&e) == nullptr &&
           dynamic_cast<const dmd::IllegalTransitionError*>(&e) == nullptr &&
           dynamic_cast<const dmd::ShapeMismatchError*>(&e) == nullptr &&
           dynamic_cast<const dmd::OverlapError*>(&e) == nullptr;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-dictionary blind face restoration toolkit", "dmdface"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
    app.add_option("--config", g.config, "Training configuration file (JSON); its values win over flags");
    app.add_flag("--verbose", g.verbose, "Print per-item progress");

    DegradeArgs da;
    auto* degrade = app.add_subcommand("degrade", "Synthesize LQ images from aligned HQ images");
    degrade->add_option("--in", da.in, "Directory of aligned PNG images")->required();
    degrade->add_option("--out", da.out, "Output directory")->required();
    degrade->add_option("--task", da.task, "x4, x8 or random")->capture_default_str();
    degrade->add_option("--size", da.size, "Image size")->capture_default_str();

    BuildDictArgs ba;
    auto* build = app.add_subcommand("build-dict", "Serialize a specific dictionary from references, or the generic one");
    build->add_option("--checkpoint", ba.checkpoint, "Training checkpoint with the extractors")->required();
    build->add_option("--refs", ba.refs, "Directory of reference PNGs with .lm sidecars");
    build->add_flag("--generic", ba.generic, "Export the checkpoint's generic dictionary instead");
    build->add_option("--out", ba.out, "Dictionary file to write")->required();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Run the staged training schedule");
    train->add_option("--data-root", ta.data_root, "Corpus root: <root>/<identity>/*.png with .lm sidecars");
    train->add_option("--splits", ta.splits, "Identity counts for train,val,test")->delimiter(',')->expected(3);
    train->add_option("--min-sharpness", ta.min_sharpness, "Discard images below this Laplacian variance");
    train->add_option("--train-manifest", ta.train_manifest, "Training manifest (instead of --data-root)");
    train->add_option("--val-manifest", ta.val_manifest, "Validation manifest (instead of --data-root)");
    train->add_option("--out", ta.out, "Output directory for checkpoints and logs")->required();
    train->add_option("--resume", ta.resume, "Checkpoint to continue from");
    train->add_option("--variant", ta.variant, "Ablation variant applied to the configuration");
    train->add_option("--epochs", ta.epochs, "Override the epoch count");

    RestoreArgs ra;
    auto* restore = app.add_subcommand("restore", "Restore one aligned LQ face");
    restore->add_option("--in", ra.in, "LQ image")->required();
    restore->add_option("--landmarks", ra.landmarks, "68-point landmark file (template ROIs when omitted)");
    restore->add_option("--checkpoint", ra.checkpoint, "Training checkpoint")->required();
    restore->add_option("--generic-dict", ra.generic_dict, "Generic dictionary file overriding the checkpoint's");
    restore->add_option("--specific-dict", ra.specific_dict, "Pre-built specific dictionary of the identity");
    restore->add_option("--refs", ra.refs, "Reference directory; builds the specific dictionary on the fly");
    restore->add_option("--out", ra.out, "Output PNG")->required();
    restore->add_option("--dump-attention", ra.dump_attention, "Write attention weights and identity scores as JSON");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test manifest");
    eval->add_option("--checkpoint", ea.checkpoint, "Training checkpoint")->required();
    eval->add_option("--manifest", ea.manifest, "Test manifest")->required();
    eval->add_option("--task", ea.task, "x4 or x8")->capture_default_str();
    eval->add_option("--out", ea.out, "Report file (JSONL)");
    eval->add_option("--embedder", ea.embedder, "Identity embedder file");
    eval->add_option("--train-manifest", ea.train_manifest, "Train an identity embedder on this manifest");
    eval->add_option("--save-embedder", ea.save_embedder, "Where to store the trained embedder");
    eval->add_option("--format", ea.format, "jsonl or table")->check(CLI::IsMember({"jsonl", "table"}))->capture_default_str();
    eval->add_option("--max-refs", ea.max_refs, "References per identity for the specific dictionary")->capture_default_str();

    AblateArgs aa;
    auto* ablate = app.add_subcommand("ablate", "Emit the training configuration of an ablation variant");
    ablate->add_option("--variant", aa.variant, "full, generic_only, specific_only, no_transform, <k>T or Y<n>");
    ablate->add_option("--out", aa.out, "Configuration file to write (stdout when omitted)");
    ablate->add_flag("--list", aa.list, "List the variant names");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*degrade) return run_degrade(g, da);
        if (*build) return run_build_dict(g, ba);
        if (*train) return run_train(g, ta);
        if (*restore) return run_restore(g, ra);
        if (*eval) return run_eval(g, ea);
        if (*ablate) return run_ablate(g, aa);
    } catch (const dmd::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return is_user_error(e) ? 1 : 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
