// Hot paths of the pipeline: prompt-pair validation, the similarity filter,
// distribution distance, calibration binning and near-duplicate clustering.
#include <benchmark/benchmark.h>

#include <random>

#include "bias_audit/attribute_kb.hpp"
#include "bias_audit/evaluator.hpp"
#include "bias_audit/imagegen.hpp"
#include "bias_audit/taskgen.hpp"

namespace ba = bias_audit;

namespace {

std::string words(std::mt19937_64& rng, int n) {
    static const char* vocab[] = {"a", "person", "stands", "near", "the", "old", "market", "at", "dusk",
                                  "holding", "red", "umbrella", "while", "children", "play", "nearby"};
    std::string out;
    for (int i = 0; i < n; ++i) {
        if (i) out += ' ';
        out += vocab[rng() % std::size(vocab)];
    }
    return out;
}

void BM_ValidatePromptPair(benchmark::State& state) {
    std::mt19937_64 rng(1);
    const int n = static_cast<int>(state.range(0));
    const auto pair = ba::render_prompt_pair(words(rng, n / 2) + " {bias_span} " + words(rng, n / 2),
                                             "female scientist", "male scientist");
    for (auto _ : state) benchmark::DoNotOptimize(ba::validate_prompt_pair(pair));
    state.SetComplexityN(n);
}
BENCHMARK(BM_ValidatePromptPair)->RangeMultiplier(4)->Range(8, 512)->Complexity();

void BM_FilterPair(benchmark::State& state) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-0.1, 0.4);
    std::vector<ba::PairFilterResult> inputs(1024);
    for (auto& r : inputs) r.s_aa = u(rng), r.s_ab = u(rng), r.s_bb = u(rng), r.s_ba = u(rng);
    std::size_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(ba::filter_pair(inputs[i++ % inputs.size()]));
}
BENCHMARK(BM_FilterPair);

void BM_TotalVariation(benchmark::State& state) {
    std::mt19937_64 rng(3);
    ba::ResponseDistribution a, b;
    for (int k = 0; k < state.range(0); ++k) {
        const std::string key = "t" + std::to_string(k / 4) + ":opt" + std::to_string(k % 4);
        a.counts[key] = static_cast<int>(rng() % 10) + 1;
        b.counts[key] = static_cast<int>(rng() % 10) + 1;
        a.n += a.counts[key];
        b.n += b.counts[key];
    }
    for (auto _ : state) benchmark::DoNotOptimize(ba::total_variation(a, b));
}
BENCHMARK(BM_TotalVariation)->Arg(4)->Arg(20)->Arg(100);

void BM_CalibrationError(benchmark::State& state) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ba::CalibrationSample> samples(static_cast<std::size_t>(state.range(0)));
    for (auto& s : samples) s.confidence = u(rng), s.consistent = u(rng) < s.confidence;
    for (auto _ : state) benchmark::DoNotOptimize(ba::calibration_error(samples));
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_CalibrationError)->RangeMultiplier(8)->Range(64, 32768)->Complexity();

void BM_FindDuplicates(benchmark::State& state) {
    std::mt19937_64 rng(5);
    std::vector<ba::BiasAttribute> records(static_cast<std::size_t>(state.range(0)));
    int i = 0;
    for (auto& r : records) {
        r.id = "attr-" + std::to_string(i++);
        r.name = words(rng, 3);
    }
    for (auto _ : state) benchmark::DoNotOptimize(ba::find_duplicates(records, 0.8));
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_FindDuplicates)->RangeMultiplier(4)->Range(16, 1024)->Complexity();

}  // namespace

BENCHMARK_MAIN();
