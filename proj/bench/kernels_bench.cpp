// Serial reference kernels against the parallel ones. Arg = image side.

#include "activeprompt/acquisition.hpp"
#include "activeprompt/backbone.hpp"
#include "activeprompt/head.hpp"
#include "activeprompt/kernels.hpp"
#include "activeprompt/session.hpp"
#include "activeprompt/synth.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace activeprompt;

namespace
{

Tensor3 random_tensor(int side, int channels, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor3 t(side, side, channels);
    for (auto& v : t.data)
        v = n(rng);
    return t;
}

struct Layer
{
    std::vector<double> weights;
    std::vector<double> bias;
    ConvView view;

    Layer(int in, int out, std::uint64_t seed)
    {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n(0.0, 0.1);
        weights.resize(9 * static_cast<std::size_t>(in) * out);
        bias.resize(out);
        for (auto& v : weights)
            v = n(rng);
        for (auto& v : bias)
            v = n(rng);
        view = {in, out, weights, bias};
    }
};

template <bool Reference>
void conv_forward(benchmark::State& state)
{
    const int side = static_cast<int>(state.range(0));
    const Tensor3 in = random_tensor(side, 32, 1);
    const Layer layer(32, 16, 2);
    Tensor3 out;
    for (auto _ : state)
    {
        if constexpr (Reference)
            kernels::conv3x3_reference(in, layer.view, out);
        else
            kernels::conv3x3(in, layer.view, out);
        benchmark::DoNotOptimize(out.data.data());
    }
}

template <bool Reference>
void conv_backward(benchmark::State& state)
{
    const int side = static_cast<int>(state.range(0));
    const Tensor3 in = random_tensor(side, 32, 3);
    const Tensor3 dout = random_tensor(side, 16, 4);
    const Layer layer(32, 16, 5);
    std::vector<double> dw(layer.weights.size()), db(layer.bias.size());
    Tensor3 din;
    for (auto _ : state)
    {
        if constexpr (Reference)
            kernels::conv3x3_backward_reference(in, layer.view, dout, dw, db, &din);
        else
            kernels::conv3x3_backward(in, layer.view, dout, dw, db, &din);
        benchmark::DoNotOptimize(din.data.data());
    }
}

template <bool Reference>
void bald_scores(benchmark::State& state)
{
    const std::size_t n = static_cast<std::size_t>(state.range(0) * state.range(0));
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> maps(kDefaultSamples, std::vector<double>(n));
    for (auto& m : maps)
        for (auto& v : m)
            v = u(rng);
    std::vector<std::span<const double>> views(maps.begin(), maps.end());
    std::vector<double> mi(n), ent(n);
    for (auto _ : state)
    {
        if constexpr (Reference)
            kernels::ensemble_scores_reference(views, mi, ent);
        else
            kernels::ensemble_scores(views, mi, ent);
        benchmark::DoNotOptimize(mi.data());
    }
}

std::vector<Prompt> some_prompts(int side)
{
    std::vector<Prompt> prompts;
    for (int i = 0; i < 8; ++i)
        prompts.push_back({{(i * 7) % side, (i * 13) % side}, static_cast<std::uint8_t>(i % 2)});
    return prompts;
}

template <bool Reference>
void prompt_score_map(benchmark::State& state)
{
    SceneSpec spec;
    spec.size = static_cast<int>(state.range(0));
    const Scene scene = generate_scene(spec);
    const auto prompts = some_prompts(spec.size);
    for (auto _ : state)
    {
        const Grid<double> s = Reference ? ToyBackbone::score_map_reference(scene.image, prompts)
                                         : ToyBackbone::score_map(scene.image, prompts);
        benchmark::DoNotOptimize(s.storage().data());
    }
}

template <bool Reference>
void ensemble_predict(benchmark::State& state)
{
    SceneSpec spec;
    spec.size = static_cast<int>(state.range(0));
    const Scene scene = generate_scene(spec);
    const ToyBackbone backbone;
    const FeatureMap features = backbone.compute_features(scene.image, PromptSet{});
    std::vector<HeadParams> samples;
    for (std::uint64_t k = 0; k < kDefaultSamples; ++k)
        samples.push_back(init_head(32, {16, 8}, k));
    for (auto _ : state)
    {
        const EnsembleMaps maps = Reference ? predictive_ensemble_reference(features, samples)
                                            : predictive_ensemble(features, samples);
        benchmark::DoNotOptimize(maps.maps.data());
    }
}

} // namespace

BENCHMARK(conv_forward<true>)->Name("conv3x3/reference")->Arg(32)->Arg(64);
BENCHMARK(conv_forward<false>)->Name("conv3x3/parallel")->Arg(32)->Arg(64);
BENCHMARK(conv_backward<true>)->Name("conv3x3_backward/reference")->Arg(32)->Arg(64);
BENCHMARK(conv_backward<false>)->Name("conv3x3_backward/parallel")->Arg(32)->Arg(64);
BENCHMARK(bald_scores<true>)->Name("ensemble_scores/reference")->Arg(64)->Arg(128);
BENCHMARK(bald_scores<false>)->Name("ensemble_scores/parallel")->Arg(64)->Arg(128);
BENCHMARK(prompt_score_map<true>)->Name("score_map/reference")->Arg(64);
BENCHMARK(prompt_score_map<false>)->Name("score_map/parallel")->Arg(64);
BENCHMARK(ensemble_predict<true>)->Name("ensemble_predict/reference")->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK(ensemble_predict<false>)->Name("ensemble_predict/parallel")->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
