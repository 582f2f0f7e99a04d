#include <array>
#include <vector>

#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "dmd/degrade.hpp"
#include "dmd/dictionary.hpp"
#include "dmd/network.hpp"
#include "dmd/toyfaces.hpp"
#include "dmd/transform.hpp"

namespace {

dmd::DictionarySet random_entries(const dmd::RestorerConfig& config, int n) {
    dmd::DictionarySet set(dmd::DictKind::Generic, config.level_shapes());
    for (int l = 0; l < set.num_levels(); ++l) {
        for (dmd::Component c : dmd::kComponents) {
            auto& d = set.at(l, c);
            const auto sz = set.shapes()[l].sizes[dmd::index_of(c)];
            d.keys = torch::randn({n, dmd::kKeyDim});
            d.values = torch::randn({n, set.shapes()[l].channels, sz.h, sz.w});
        }
    }
    return set;
}

void BM_DictionaryRead(benchmark::State& state) {
    torch::manual_seed(1);
    torch::NoGradGuard no_grad;
    const auto entries = state.range(0);
    const auto query = torch::randn({4, dmd::kKeyDim});
    const auto keys = torch::randn({entries, dmd::kKeyDim});
    const auto values = torch::randn({entries, 64, 16, 32});
    for (auto _ : state) {
        auto out = dmd::dictionary_read(query, keys, values);
        benchmark::DoNotOptimize(out);
    }
    state.SetItemsProcessed(state.iterations() * 4);
}
BENCHMARK(BM_DictionaryRead)->Arg(16)->Arg(64)->Arg(256);

void BM_RoiAlign(benchmark::State& state) {
    torch::manual_seed(2);
    torch::NoGradGuard no_grad;
    const auto boxes_n = state.range(0);
    const auto level = torch::randn({boxes_n, 32, 64, 64});
    std::vector<dmd::Box> boxes(static_cast<std::size_t>(boxes_n), dmd::Box{10.5, 12.25, 30.0, 24.75});
    for (auto _ : state) {
        auto out = dmd::roi_align_extract(level, boxes, {16, 32});
        benchmark::DoNotOptimize(out);
    }
    state.SetItemsProcessed(state.iterations() * boxes_n);
}
BENCHMARK(BM_RoiAlign)->Arg(1)->Arg(8);

void BM_Degradation(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const auto face = dmd::toy::render_face(dmd::toy::make_identity(7), dmd::toy::neutral_pose(), size);
    const auto params = dmd::sample_params(11, dmd::Task::X4);
    std::uint64_t seed = 0;
    for (auto _ : state) {
        auto out = dmd::apply_degradation(face.image, params, ++seed, size);
        benchmark::DoNotOptimize(out);
    }
}
BENCHMARK(BM_Degradation)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_RestoreForward(benchmark::State& state) {
    torch::manual_seed(3);
    dmd::RestorerConfig config;
    dmd::DmdModel model(config, 1);
    model.generic.set_entries(random_entries(config, config.dict_size));
    model.train(false);
    const auto specific = random_entries(config, 4);
    const auto face = dmd::toy::render_face(dmd::toy::make_identity(5), dmd::toy::neutral_pose(), config.input_size);
    const bool use_specific = state.range(0) != 0;
    for (auto _ : state) {
        auto out = dmd::restore(model, face.image, face.landmarks, use_specific ? &specific : nullptr);
        benchmark::DoNotOptimize(out);
    }
}
BENCHMARK(BM_RestoreForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
