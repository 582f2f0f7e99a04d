#include "doctest_torch.hpp"

#include "oracles.hpp"
#include "dmd/errors.hpp"
#include "dmd/evalkit.hpp"
#include "helpers.hpp"

using namespace dmd;

TEST_CASE("psnr of a constant 0.1 offset is 20 dB") {
    const auto gt = testing::constant_image(16, 16, 0.3f);
    Image pred(16, 16);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) pred.at(c, y, x) = gt.at(c, y, x) + 0.1f;
    CHECK(psnr(pred, gt) == doctest::Approx(oracle::psnr(pred, gt)).epsilon(1e-9));
    CHECK(std::abs(psnr(pred, gt) - 20.0) < 1e-5);
    CHECK(psnr(gt, gt) == kPsnrCap);
    CHECK_THROWS_AS(psnr(gt, testing::constant_image(8, 8, 0.f)), ShapeMismatchError);
}

TEST_CASE("ssim agrees with a direct windowed evaluation") {
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto a = testing::random_image(20, 24, s);
        auto b = a;
        for (auto& v : b.data()) v = std::clamp(v * 0.8f + 0.05f, 0.0f, 1.0f);
        CHECK(ssim(a, b) == doctest::Approx(oracle::ssim(a, b)).epsilon(1e-9));
    }
    const auto a = testing::random_image(16, 16, 4);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(testing::random_image(8, 8, 1), testing::random_image(8, 8, 2)), SizeError);
}

TEST_CASE("face region drops a rounded 10 percent margin per side") {
    CHECK(face_region(torch::zeros({1, 3, 64, 64})).sizes() == torch::IntArrayRef({1, 3, 52, 52}));
    CHECK(face_region(torch::zeros({1, 3, 30, 40})).sizes() == torch::IntArrayRef({1, 3, 24, 32}));
}

TEST_CASE("aggregates are arithmetic means per variant and task") {
    std::vector<EvalRecord> recs = {{"a", "i", "full", "x4", 20, 0.5, 0.9, 18, 2},
                                    {"b", "i", "full", "x4", 22, 0.7, 0.7, 19, 2},
                                    {"a", "i", "generic_only", "x4", 19, 0.4, std::nullopt, 18, 0}};
    const auto agg = aggregate_records(recs);
    REQUIRE(agg.size() == 2);
    CHECK(agg[0].variant == "full");
    CHECK(agg[0].count == 2);
    CHECK(agg[0].psnr_db == doctest::Approx(21.0));
    CHECK(*agg[0].id_cosine == doctest::Approx(0.8));
    CHECK_FALSE(agg[1].id_cosine.has_value());
}

TEST_CASE("reports round trip through jsonl") {
    testing::TempDir dir("report");
    EvalReport r;
    r.records = {{"a.png", "id_1", "full", "x8", 21.5, 0.61, 0.93, 18.25, 3},
                 {"a.png", "id_1", "generic_only", "x8", 21.0, 0.6, std::nullopt, 18.25, 0}};
    r.aggregates = aggregate_records(r.records);
    write_report(r, dir / "r.jsonl");
    const auto back = read_report(dir / "r.jsonl");
    REQUIRE(back.records.size() == 2);
    CHECK(back.records[0].psnr_db == 21.5);
    CHECK(*back.records[0].id_cosine == 0.93);
    CHECK_FALSE(back.records[1].id_cosine.has_value());
    REQUIRE(back.aggregate("full", "x8") != nullptr);
    CHECK(back.aggregate("full", "x8")->ssim == doctest::Approx(0.61));
    CHECK(back.aggregate("full", "x4") == nullptr);
    CHECK(format_table(back).find("generic_only") != std::string::npos);
}

TEST_CASE("embedder training, persistence and evaluation on a tiny corpus") {
    testing::TempDir dir("eval");
    auto s = testing::toy_splits(dir / "data", 8, 3, 32, {5, 1, 2});
    EmbedderTraining opts;
    opts.epochs = 2;
    auto emb = train_embedder(s.train, opts);
    save_embedder(emb, dir / "e.bin");
    auto back = load_embedder(dir / "e.bin");
    const auto& img = s.test.identities[0].images[0].image;
    CHECK(identity_cosine(img, img, back) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(identity_cosine(img, img, emb) == doctest::Approx(identity_cosine(img, img, back)));

    DmdModel model(testing::tiny_model(), 1);
    std::vector<Image> imgs;
    std::vector<LandmarkSet> lms;
    std::vector<std::string> ids;
    for (int i = 0; i < 3; ++i) {
        imgs.push_back(s.train.identities[i].images[0].image);
        lms.push_back(s.train.identities[i].images[0].landmarks);
        ids.push_back(s.train.identities[i].id);
    }
    model.generic.set_entries(init_generic(model.generic_extractor, stack_images(imgs), lms, ids));
    model.train(false);
    const auto report = evaluate(model, s.test, {Task::X8, 3, 21}, &emb);
    CHECK(report.records.size() == 2 * s.test.image_count());
    const auto* full = report.aggregate("full", "x8");
    REQUIRE(full != nullptr);
    CHECK(full->id_cosine.has_value());
    CHECK(report.records[0].n_refs == 0);
    CHECK(report.records[1].n_refs == 2);
    const auto again = evaluate(model, s.test, {Task::X8, 3, 21}, &emb);
    CHECK(again.records[1].psnr_db == report.records[1].psnr_db);
}
