// laplace.hpp
//
// Diagonal Laplace posterior over the head parameters: empirical-Fisher
// precision around the MAP estimate, and seeded posterior sampling.

#pragma once

#include "activeprompt/head.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace activeprompt
{

struct LaplacePosterior
{
    HeadParams mean;
    std::vector<double> precision; ///< one entry per parameter, >= prior precision
    std::uint64_t subset_size = 0;

    void validate() const;
};

struct LaplaceOptions
{
    int pixels_per_example = 256; ///< 0 = every pixel
    std::uint64_t seed = 0;
};

/// precision_i += sum_s g_s[i]^2 over `samples` gradient evaluations.
/// `gradient_of(s, g)` must fill g (length precision.size()) for sample s.
template <typename GradientFn>
void accumulate_squared_gradients(std::size_t samples, GradientFn&& gradient_of, std::span<double> precision)
{
    std::vector<double> g(precision.size());
    for (std::size_t s = 0; s < samples; ++s)
    {
        gradient_of(s, std::span<double>(g));
        for (std::size_t i = 0; i < g.size(); ++i)
            precision[i] += g[i] * g[i];
    }
}

/// Empirical-Fisher Laplace fit over `subset`, dropout disabled. Throws
/// ContractViolation on an empty subset or non-positive prior precision.
LaplacePosterior fit_laplace(const HeadParams& map_params, std::span<const TrainingExample> subset,
                             const Backbone& backbone, double prior_precision, const LaplaceOptions& options = {});

/// theta_k = mean + eps, eps_i ~ N(0, 1 / precision_i). Throws on k == 0.
std::vector<HeadParams> sample_posterior(const LaplacePosterior& posterior, std::size_t k, std::uint64_t seed);

/// Posterior file: a head file followed by "BLP1" | u64 subset size |
/// f32 precision per parameter.
void save_posterior(const std::filesystem::path& path, const LaplacePosterior& posterior);
LaplacePosterior load_posterior(const std::filesystem::path& path);

} // namespace activeprompt
