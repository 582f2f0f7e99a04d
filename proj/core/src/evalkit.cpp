#include "dmd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dmd/errors.hpp"
#include "dmd/imagedata.hpp"

namespace dmd {

namespace {

namespace F = torch::nn::functional;
using ojson = nlohmann::ordered_json;

void check_same(const Image& a, const Image& b) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeMismatchError("metric inputs differ in size");
    }
}

std::vector<double> window_1d() {
    std::vector<double> w(11);
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
        const double d = i - 5;
        w[i] = std::exp(-(d * d) / (2.0 * 1.5 * 1.5));
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Valid-mode separable filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int ow = w - n + 1;
    const int oh = h - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    return out;
}

torch::Tensor lrelu(const torch::Tensor& x) {
    return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
}

std::string fmt(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

}  // namespace

double psnr(const Image& pred, const Image& gt) {
    check_same(pred, gt);
    const auto a = pred.data();
    const auto b = gt.data();
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        sum += d * d;
    }
    const double mse = sum / static_cast<double>(a.size());
    if (mse < 1e-10) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& pred, const Image& gt) {
    check_same(pred, gt);
    const int h = pred.height();
    const int w = pred.width();
    if (h < 11 || w < 11) throw SizeError("ssim needs images of at least 11x11");
    const auto a = grayscale(pred);
    const auto b = grayscale(gt);
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto k = window_1d();
    const auto mu_a = filter_valid(a, h, w, k);
    const auto mu_b = filter_valid(b, h, w, k);
    const auto e_aa = filter_valid(aa, h, w, k);
    const auto e_bb = filter_valid(bb, h, w, k);
    const auto e_ab = filter_valid(ab, h, w, k);
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    double sum = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i];
        const double mb = mu_b[i];
        const double va = e_aa[i] - ma * ma;
        const double vb = e_bb[i] - mb * mb;
        const double cov = e_ab[i] - ma * mb;
        sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return sum / static_cast<double>(mu_a.size());
}

IdentityEmbedderImpl::IdentityEmbedderImpl(int classes) : num_classes(classes) {
    const std::array<std::pair<int, int>, 4> chans = {{{3, 16}, {16, 32}, {32, 64}, {64, 64}}};
    for (std::size_t i = 0; i < chans.size(); ++i) {
        convs.push_back(register_module(
            "conv" + std::to_string(i),
            torch::nn::Conv2d(torch::nn::Conv2dOptions(chans[i].first, chans[i].second, 3).stride(2).padding(1))));
    }
    classifier = register_module("classifier", torch::nn::Linear(64, num_classes));
}

torch::Tensor IdentityEmbedderImpl::embed(const torch::Tensor& images) {
    auto h = images;
    for (auto& c : convs) h = lrelu(c(h));
    return h.mean({2, 3});
}

torch::Tensor IdentityEmbedderImpl::forward(const torch::Tensor& images) {
    return classifier(embed(images));
}

torch::Tensor face_region(const torch::Tensor& images) {
    const auto h = images.size(2);
    const auto w = images.size(3);
    const auto my = static_cast<std::int64_t>(std::lround(0.1 * static_cast<double>(h)));
    const auto mx = static_cast<std::int64_t>(std::lround(0.1 * static_cast<double>(w)));
    return images.slice(2, my, h - my).slice(3, mx, w - mx);
}

IdentityEmbedder train_embedder(const Corpus& corpus, const EmbedderTraining& opts) {
    if (corpus.image_count() == 0) throw EmptyDatasetError("no images to train the identity embedder");
    torch::manual_seed(opts.seed);
    IdentityEmbedder net(static_cast<int>(corpus.identities.size()));
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(opts.lr));
    struct Item {
        const LoadedImage* image;
        std::int64_t label;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < corpus.identities.size(); ++i) {
        for (const auto& li : corpus.identities[i].images) items.push_back({&li, static_cast<std::int64_t>(i)});
    }
    const int size = items.front().image->image.height();
    net->train(true);
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        std::vector<std::size_t> order(items.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(opts.seed, {static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(opts.batch_size)) {
            std::vector<Image> batch;
            std::vector<std::int64_t> labels;
            for (std::size_t i = s; i < std::min(order.size(), s + opts.batch_size); ++i) {
                const auto& item = items[order[i]];
                const auto seed = derive_seed(opts.seed, {static_cast<std::uint64_t>(epoch), order[i]});
                auto img = augment(item.image->image, item.image->landmarks, derive_seed(seed, {1})).first;
                if (derive_seed(seed, {2}) % 2 == 0) {
                    img = apply_degradation(img, sample_params(derive_seed(seed, {3}), Task::Random),
                                            derive_seed(seed, {4}), size);
                }
                batch.push_back(std::move(img));
                labels.push_back(item.label);
            }
            const auto logits = net->forward(face_region(stack_images(batch)));
            const auto loss = F::cross_entropy(logits, torch::tensor(labels, torch::kLong));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    net->train(false);
    return net;
}

void save_embedder(IdentityEmbedder& embedder, const std::filesystem::path& path) {
    Checkpoint ckpt;
    ojson meta;
    meta["format"] = "dmdface-embedder";
    meta["num_classes"] = embedder->num_classes;
    ckpt.meta = meta.dump();
    ckpt.add_module("embedder.", *embedder);
    save_checkpoint(ckpt, path);
}

IdentityEmbedder load_embedder(const std::filesystem::path& path) {
    const auto ckpt = load_checkpoint(path);
    const auto meta = nlohmann::json::parse(ckpt.meta);
    if (meta.value("format", std::string()) != "dmdface-embedder") {
        throw DataError(path.string() + " is not an identity embedder");
    }
    IdentityEmbedder net(meta.at("num_classes").get<int>());
    ckpt.load_module("embedder.", *net);
    net->train(false);
    return net;
}

double identity_cosine(const Image& pred, const Image& gt, IdentityEmbedder& embedder) {
    check_same(pred, gt);
    torch::NoGradGuard guard;
    const std::array<Image, 2> pair{pred, gt};
    const auto e = F::normalize(embedder->embed(face_region(stack_images(pair))).to(torch::kFloat64),
                                F::NormalizeFuncOptions().dim(1).eps(1e-12));
    return (e[0] * e[1]).sum().item<double>();
}

const EvalAggregate* EvalReport::aggregate(const std::string& variant, const std::string& task) const {
    for (const auto& a : aggregates) {
        if (a.variant == variant && a.task == task) return &a;
    }
    return nullptr;
}

std::vector<EvalAggregate> aggregate_records(const std::vector<EvalRecord>& records) {
    std::vector<EvalAggregate> out;
    std::vector<std::size_t> id_counts;
    for (const auto& r : records) {
        auto it = std::find_if(out.begin(), out.end(),
                               [&](const EvalAggregate& a) { return a.variant == r.variant && a.task == r.task; });
        if (it == out.end()) {
            out.push_back({r.variant, r.task, 0, 0.0, 0.0, std::nullopt, 0.0});
            id_counts.push_back(0);
            it = out.end() - 1;
        }
        const auto idx = static_cast<std::size_t>(it - out.begin());
        it->count += 1;
        it->psnr_db += r.psnr_db;
        it->ssim += r.ssim;
        it->lq_psnr_db += r.lq_psnr_db;
        if (r.id_cosine) {
            it->id_cosine = it->id_cosine.value_or(0.0) + *r.id_cosine;
            id_counts[idx] += 1;
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto n = static_cast<double>(out[i].count);
        out[i].psnr_db /= n;
        out[i].ssim /= n;
        out[i].lq_psnr_db /= n;
        if (out[i].id_cosine) *out[i].id_cosine /= static_cast<double>(id_counts[i]);
    }
    return out;
}

EvalReport evaluate(DmdModel& model, const Corpus& test, const EvalOptions& opts, IdentityEmbedder* embedder) {
    const int size = model.config.input_size;
    model.train(false);
    EvalReport report;
    const std::string task(task_name(opts.task));
    std::uint64_t j = 0;
    for (const auto& id : test.identities) {
        for (std::size_t i = 0; i < id.images.size(); ++i, ++j) {
            const auto& li = id.images[i];
            const auto seed = derive_seed(opts.seed, {0xE7A1, j});
            const auto params = sample_params(seed, opts.task);
            const auto lq = apply_degradation(li.image, params, derive_seed(seed, {1}), size);
            const double lq_psnr = psnr(lq, li.image);

            std::vector<Image> ref_images;
            std::vector<LandmarkSet> ref_lms;
            for (std::size_t o = 0; o < id.images.size() && static_cast<int>(ref_images.size()) < opts.max_refs; ++o) {
                if (o == i) continue;
                ref_images.push_back(id.images[o].image);
                ref_lms.push_back(id.images[o].landmarks);
            }
            DictionarySet specific;
            {
                torch::NoGradGuard guard;
                specific = build_specific(model.specific_extractor,
                                          ref_images.empty() ? torch::Tensor() : stack_images(ref_images), ref_lms);
            }
            const auto generic_out = restore(model, lq, li.landmarks, nullptr);
            const auto full_out = restore(model, lq, li.landmarks, &specific);
            for (const auto& [variant, out] : {std::pair{"generic_only", &generic_out}, std::pair{"full", &full_out}}) {
                EvalRecord rec;
                rec.path = li.path.string();
                rec.identity = id.id;
                rec.variant = variant;
                rec.task = task;
                rec.psnr_db = psnr(*out, li.image);
                rec.ssim = ssim(*out, li.image);
                if (embedder != nullptr) rec.id_cosine = identity_cosine(*out, li.image, *embedder);
                rec.lq_psnr_db = lq_psnr;
                rec.n_refs = std::string(variant) == "full" ? static_cast<int>(ref_images.size()) : 0;
                report.records.push_back(std::move(rec));
            }
        }
    }
    report.aggregates = aggregate_records(report.records);
    return report;
}

std::string report_jsonl(const EvalReport& report) {
    std::ostringstream out;
    ojson header;
    header["record"] = "header";
    header["metrics"] = {"psnr_db", "ssim", "id_cosine"};
    header["excluded_metrics"] = {"LPIPS", "FID"};
    header["note"] = "LPIPS and FID are not computed: both depend on large pretrained networks.";
    out << header.dump() << '\n';
    for (const auto& r : report.records) {
        ojson j;
        j["record"] = "image";
        j["path"] = r.path;
        j["identity"] = r.identity;
        j["variant"] = r.variant;
        j["task"] = r.task;
        j["psnr_db"] = r.psnr_db;
        j["ssim"] = r.ssim;
        j["id_cosine"] = r.id_cosine ? ojson(*r.id_cosine) : ojson(nullptr);
        j["lq_psnr_db"] = r.lq_psnr_db;
        j["n_refs"] = r.n_refs;
        out << j.dump() << '\n';
    }
    ojson agg;
    agg["record"] = "aggregate";
    agg["groups"] = ojson::array();
    for (const auto& a : report.aggregates) {
        ojson g;
        g["variant"] = a.variant;
        g["task"] = a.task;
        g["count"] = a.count;
        g["psnr_db"] = a.psnr_db;
        g["ssim"] = a.ssim;
        g["id_cosine"] = a.id_cosine ? ojson(*a.id_cosine) : ojson(nullptr);
        g["lq_psnr_db"] = a.lq_psnr_db;
        agg["groups"].push_back(g);
    }
    out << agg.dump() << '\n';
    return out.str();
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write report " + path.string());
    out << report_jsonl(report);
}

EvalReport read_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open report " + path.string());
    EvalReport report;
    std::string line;
    try {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            const auto kind = j.at("record").get<std::string>();
            auto opt = [](const nlohmann::json& v) {
                return v.is_null() ? std::optional<double>() : std::optional<double>(v.get<double>());
            };
            if (kind == "image") {
                report.records.push_back({j.at("path").get<std::string>(), j.at("identity").get<std::string>(),
                                          j.at("variant").get<std::string>(), j.at("task").get<std::string>(),
                                          j.at("psnr_db").get<double>(), j.at("ssim").get<double>(),
                                          opt(j.at("id_cosine")), j.at("lq_psnr_db").get<double>(),
                                          j.at("n_refs").get<int>()});
            } else if (kind == "aggregate") {
                for (const auto& g : j.at("groups")) {
                    report.aggregates.push_back({g.at("variant").get<std::string>(), g.at("task").get<std::string>(),
                                                 g.at("count").get<std::size_t>(), g.at("psnr_db").get<double>(),
                                                 g.at("ssim").get<double>(), opt(g.at("id_cosine")),
                                                 g.at("lq_psnr_db").get<double>()});
                }
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad report " + path.string() + ": " + e.what());
    }
    return report;
}

std::string format_table(const EvalReport& report) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-14s %-6s %6s %10s %8s %10s %10s\n", "variant", "task", "count", "psnr_db",
                  "ssim", "id_cosine", "lq_psnr_db");
    out << line;
    for (const auto& a : report.aggregates) {
        std::snprintf(line, sizeof(line), "%-14s %-6s %6zu %10s %8s %10s %10s\n", a.variant.c_str(), a.task.c_str(),
                      a.count, fmt(a.psnr_db, 3).c_str(), fmt(a.ssim, 4).c_str(),
                      a.id_cosine ? fmt(*a.id_cosine, 4).c_str() : "-", fmt(a.lq_psnr_db, 3).c_str());
        out << line;
    }
    return out.str();
}

}  // namespace dmd
