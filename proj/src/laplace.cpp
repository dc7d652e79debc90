// laplace.cpp

#include "activeprompt/laplace.hpp"

#include "activeprompt/binary_io.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace activeprompt
{

void LaplacePosterior::validate() const
{
    mean.validate();
    if (precision.size() != mean.values.size())
        throw ContractViolation("posterior precision length does not match the parameter count");
    for (double p : precision)
        if (!std::isfinite(p) || !(p > 0.0))
            throw ContractViolation("posterior precision entries must be positive and finite");
}

LaplacePosterior fit_laplace(const HeadParams& map_params, std::span<const TrainingExample> subset,
                             const Backbone& backbone, double prior_precision, const LaplaceOptions& options)
{
    if (subset.empty())
        throw ContractViolation("fit_laplace needs a non-empty subset");
    if (!(prior_precision > 0.0) || !std::isfinite(prior_precision))
        throw ContractViolation("prior precision must be positive and finite");
    map_params.validate();

    const std::size_t p = map_params.values.size();
    const auto n = static_cast<std::ptrdiff_t>(subset.size());
    std::vector<std::vector<double>> partial(subset.size());

    // Examples are independent; each owns its partial sum and the reduction
    // below runs in example order, so the result does not depend on threads.
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ei = 0; ei < n; ++ei)
    {
        const auto e = static_cast<std::size_t>(ei);
        const TrainingExample& ex = subset[e];
        const FeatureMap features = backbone.compute_features(ex.image, ex.prompts);

        std::vector<std::size_t> pixels(features.pixels());
        std::iota(pixels.begin(), pixels.end(), std::size_t{0});
        if (options.pixels_per_example > 0 && static_cast<std::size_t>(options.pixels_per_example) < pixels.size())
        {
            std::mt19937_64 rng(options.seed ^ (0x9E3779B97F4A7C15ULL * (e + 1)));
            const auto take = static_cast<std::size_t>(options.pixels_per_example);
            for (std::size_t i = 0; i < take; ++i)
                std::swap(pixels[i], pixels[std::uniform_int_distribution<std::size_t>(i, pixels.size() - 1)(rng)]);
            pixels.resize(take);
        }

        partial[e].assign(p, 0.0);
        accumulate_squared_gradients(
            pixels.size(),
            [&](std::size_t s, std::span<double> g) {
                const Pixel q{static_cast<int>(pixels[s] / static_cast<std::size_t>(features.width)),
                              static_cast<int>(pixels[s] % static_cast<std::size_t>(features.width))};
                pixel_log_likelihood_gradient(features, map_params, q, ex.gt_mask[q], g);
            },
            partial[e]);
    }

    LaplacePosterior posterior;
    posterior.mean = map_params;
    posterior.subset_size = subset.size();
    posterior.precision.assign(p, prior_precision);
    for (const auto& part : partial)
        for (std::size_t i = 0; i < p; ++i)
            posterior.precision[i] += part[i];
    return posterior;
}

std::vector<HeadParams> sample_posterior(const LaplacePosterior& posterior, std::size_t k, std::uint64_t seed)
{
    if (k == 0)
        throw ContractViolation("sample_posterior needs k >= 1");
    posterior.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> standard(0.0, 1.0);
    std::vector<HeadParams> samples(k, posterior.mean);
    for (auto& s : samples)
        for (std::size_t i = 0; i < s.values.size(); ++i)
            s.values[i] += standard(rng) / std::sqrt(posterior.precision[i]);
    return samples;
}

void save_posterior(const std::filesystem::path& path, const LaplacePosterior& posterior)
{
    posterior.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_head(out, posterior.mean);
    binary_io::write_magic(out, "BLP1");
    binary_io::write_u64(out, posterior.subset_size);
    for (double v : posterior.precision)
        binary_io::write_f32(out, static_cast<float>(v));
    if (!out)
        throw std::runtime_error("failed writing " + path.string());
}

LaplacePosterior load_posterior(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open " + path.string());
    LaplacePosterior posterior;
    posterior.mean = read_head(in);
    binary_io::expect_magic(in, "BLP1");
    posterior.subset_size = binary_io::read_u64(in);
    posterior.precision.resize(posterior.mean.values.size());
    for (auto& v : posterior.precision)
        v = binary_io::read_f32(in);
    posterior.validate();
    return posterior;
}

} // namespace activeprompt
