#include <benchmark/benchmark.h>

#include <random>

#include "stylebank/analysis.hpp"
#include "stylebank/trainer.hpp"

using namespace stylebank;

namespace {

Tensor uniform(Shape s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> v(s.numel());
    for (double& x : v) x = u(rng);
    return Tensor::from_values(s, v, DType::F32);
}

void BM_Conv2d(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    const auto side = static_cast<std::size_t>(state.range(1));
    const Tensor x = uniform(Shape{4, c, side, side}, 1);
    const Tensor k = uniform(Shape{c, c, 3, 3}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, k, 1, Padding::reflect(1)));
    state.SetItemsProcessed(state.iterations() * 4 * c * c * 9 * side * side);
}
BENCHMARK(BM_Conv2d)->Args({32, 16})->Args({128, 16})->Args({32, 64})->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
    const Tensor x = uniform(Shape{4, 64, 16, 16}, 3);
    const Tensor k = uniform(Shape{64, 64, 3, 3}, 4);
    for (auto _ : state) {
        Tape tape;
        Var kv = tape.parameter(k);
        tape.backward(ad::sum(ad::conv2d(tape.parameter(x), kv, 1, Padding::zero(1))));
        benchmark::DoNotOptimize(kv.grad());
    }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

void BM_Stylize(benchmark::State& state) {
    StyleBankModel m = StyleBankModel::create(ModelConfig{static_cast<std::size_t>(state.range(0)), 3}, 1);
    m.add_bank("a", 2);
    const Tensor img = uniform(Shape{1, 3, 64, 64}, 5);
    for (auto _ : state) benchmark::DoNotOptimize(stylize(m, img, "a"));
}
BENCHMARK(BM_Stylize)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_StylizingStep(benchmark::State& state) {
    StyleBankModel m = StyleBankModel::create(ModelConfig{}, 1);
    const FeatureExtractor ex = FeatureExtractor::random();
    TrainConfig cfg;
    Trainer trainer(m, ex, cfg, {uniform(Shape{1, 3, 64, 64}, 6)}, {{"s", uniform(Shape{1, 3, 128, 128}, 7)}});
    const Batch batch = trainer.sample_batch();
    std::size_t it = 1;
    for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step_stylizing(batch, it++));
}
BENCHMARK(BM_StylizingStep)->Unit(benchmark::kMillisecond);

void BM_KMeansSegment(benchmark::State& state) {
    const Tensor f = uniform(Shape{1, 128, 16, 16}, 8);
    for (auto _ : state) benchmark::DoNotOptimize(kmeans_segment(f, 4, 0));
}
BENCHMARK(BM_KMeansSegment)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
