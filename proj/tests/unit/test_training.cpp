#include <set>

#include "doctest_torch.hpp"

#include "dmd/errors.hpp"
#include "dmd/records.hpp"
#include "dmd/training.hpp"
#include "helpers.hpp"

using namespace dmd;

TEST_CASE("plateau detector uses relative improvement") {
    const std::vector<double> improving = {10, 9, 8, 7, 6, 5, 4};
    CHECK_FALSE(plateau_detector(improving, 5, 0.01));
    const std::vector<double> flat = {10, 9.95, 9.94, 9.93, 9.92, 9.91};
    CHECK(plateau_detector(flat, 5, 0.01));
    CHECK_FALSE(plateau_detector(std::span(flat).first(5), 5, 0.01));
    const std::vector<double> late = {10, 10, 10, 10, 10, 8.0, 8.0};
    CHECK_FALSE(plateau_detector(late, 5, 0.01));
    const std::vector<double> worse = {1, 2, 3};
    CHECK(plateau_detector(worse, 2, 0.0));
    CHECK_FALSE(plateau_detector({}, 1, 0.01));
}

TEST_CASE("ablation variants adjust the model config") {
    CHECK_FALSE(ablation_variant("generic_only").model.use_specific);
    CHECK_FALSE(ablation_variant("specific_only").model.use_generic);
    CHECK(ablation_variant("no_transform").model.read_mode == ReadMode::BestMatch);
    CHECK(ablation_variant("2T").model.transform_count == 2);
    CHECK(ablation_variant("Y0").model.dict_size == 0);
    CHECK(ablation_variant("Y32").variant == "Y32");
    CHECK_THROWS_AS(ablation_variant("4T"), UnknownVariantError);
    CHECK_THROWS_AS(ablation_variant("Yx"), UnknownVariantError);
    CHECK_THROWS_AS(ablation_variant("bogus"), UnknownVariantError);
    for (const auto& n : ablation_names(3)) CHECK_NOTHROW(ablation_variant(n));
}

TEST_CASE("train config json round trip and strictness") {
    auto c = testing::tiny_train();
    c.stage = Stage::Backward;
    c.weights.adv = {1.0, 2.0, 3.0};
    const auto text = train_config_to_json(c);
    CHECK(train_config_to_json(train_config_from_json(text)) == text);
    CHECK(train_config_from_json(R"({"epochs":7})").epochs == 7);
    CHECK_THROWS_AS(train_config_from_json(R"({"epoch":7})"), DataError);
    auto bad = c;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("derived seeds are distinct and stable") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 100; ++i) seen.insert(derive_seed(1, {i}));
    CHECK(seen.size() == 100);
    CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
    CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
}

TEST_CASE("trainer runs epochs, logs scalars and writes checkpoints") {
    testing::TempDir dir("trainer");
    auto s = testing::toy_splits(dir / "data", 8, 3, 32, {5, 2, 1});
    auto cfg = testing::tiny_train();
    Trainer t(cfg, s.train, s.val, dir / "out");
    const auto summaries = t.run();
    REQUIRE(summaries.size() == 2);
    CHECK(t.global_step() == 4);
    CHECK(std::filesystem::exists(dir / "out" / "ckpt_epoch2.bin"));
    const auto log = read_scalar_log(dir / "out" / "train_log.jsonl");
    std::set<std::string> terms;
    for (const auto& r : log) terms.insert(r.term);
    for (const char* term : {"mse", "perc", "style", "adv_g", "adv_d", "total", "val_rec"}) CHECK(terms.contains(term));
    CHECK(std::isfinite(t.validate()));
    const auto model = load_model(dir / "out" / "ckpt_epoch2.bin");
    CHECK(torch::equal(model->restorer->head->weight, t.model().restorer->head->weight));
    CHECK(content_hash(model->generic.entries()) == content_hash(t.model().generic.entries()));
}

TEST_CASE("stages advance on plateau and the learning rate decays once frozen") {
    testing::TempDir dir("stages");
    auto s = testing::toy_splits(dir / "data", 8, 3, 32, {5, 2, 1});
    auto cfg = testing::tiny_train();
    cfg.plateau_patience = 1;
    cfg.min_delta = 10.0;  // every epoch counts as a plateau
    cfg.steps_per_epoch = 1;
    cfg.epochs = 8;
    Trainer t(cfg, s.train, s.val, dir / "out");
    const auto sums = t.run();
    // A stage needs two validation points before its history can plateau.
    const std::vector<Stage> trained = {Stage::Init,     Stage::Init,     Stage::Forward, Stage::Forward,
                                        Stage::Backward, Stage::Backward, Stage::Frozen,  Stage::Frozen};
    for (std::size_t e = 0; e < trained.size(); ++e) CHECK(sums[e].stage == trained[e]);
    CHECK(sums[1].stage_advanced);
    CHECK_FALSE(sums[6].lr_decayed);
    CHECK(sums[7].lr_decayed);
    CHECK(t.lr_theta() == doctest::Approx(cfg.lr_theta * 0.5));
    const std::vector<Stage> expected = {Stage::Init, Stage::Forward, Stage::Backward, Stage::Frozen};
    CHECK((t.visited() == expected));
}

TEST_CASE("dictionary-free variant trains and decays the learning rate") {
    testing::TempDir dir("y0");
    auto s = testing::toy_splits(dir / "data", 6, 3, 32, {4, 1, 1});
    auto cfg = ablation_variant("Y0", testing::tiny_train());
    cfg.plateau_patience = 1;
    cfg.min_delta = 10.0;
    cfg.steps_per_epoch = 1;
    Trainer t(cfg, s.train, s.val, dir / "out");
    const auto sums = t.run();
    CHECK_FALSE(sums[0].lr_decayed);
    CHECK(sums[1].lr_decayed);
    CHECK(t.model().generic.entries().empty());
}

TEST_CASE("empty splits are rejected") {
    testing::TempDir dir("empty");
    auto s = testing::toy_splits(dir / "data", 4, 2, 32, {2, 1, 1});
    CHECK_THROWS_AS(Trainer(testing::tiny_train(), s.train, Corpus{}, dir / "out"), EmptyDatasetError);
}
