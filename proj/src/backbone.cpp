// backbone.cpp

#include "activeprompt/backbone.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

namespace activeprompt
{

namespace
{

constexpr std::array<double, 4> kBlurSigmas = {1.0, 2.0, 4.0, 8.0};
constexpr std::array<double, 4> kPromptSigmas = {4.0, 8.0, 16.0, 32.0};
constexpr double kSimilaritySigma = 0.1;

/// Separable Gaussian blur; the truncated kernel is renormalised at borders.
Grid<double> gaussian_blur(const Grid<double>& src, double sigma)
{
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i)
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));

    const int h = src.height();
    const int w = src.width();
    Grid<double> tmp(h, w, 0.0);
    Grid<double> out(h, w, 0.0);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            double acc = 0.0;
            double norm = 0.0;
            for (int k = std::max(-radius, -c); k <= std::min(radius, w - 1 - c); ++k)
            {
                const double wk = kernel[static_cast<std::size_t>(k + radius)];
                acc += wk * src(r, c + k);
                norm += wk;
            }
            tmp(r, c) = acc / norm;
        }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            double acc = 0.0;
            double norm = 0.0;
            for (int k = std::max(-radius, -r); k <= std::min(radius, h - 1 - r); ++k)
            {
                const double wk = kernel[static_cast<std::size_t>(k + radius)];
                acc += wk * tmp(r + k, c);
                norm += wk;
            }
            out(r, c) = acc / norm;
        }
    return out;
}

double gradient_magnitude(const Grid<double>& g, int r, int c)
{
    const int h = g.height();
    const int w = g.width();
    const int r0 = std::max(r - 1, 0);
    const int r1 = std::min(r + 1, h - 1);
    const int c0 = std::max(c - 1, 0);
    const int c1 = std::min(c + 1, w - 1);
    const double gy = (g(r1, c) - g(r0, c)) / std::max(1, r1 - r0);
    const double gx = (g(r, c1) - g(r, c0)) / std::max(1, c1 - c0);
    return std::sqrt(gx * gx + gy * gy);
}

double local_variance(const Image& image, int r, int c)
{
    double sum = 0.0;
    double sum2 = 0.0;
    int n = 0;
    for (int dr = -2; dr <= 2; ++dr)
        for (int dc = -2; dc <= 2; ++dc)
        {
            const Pixel p{r + dr, c + dc};
            if (!image.in_bounds(p))
                continue;
            const double v = image[p];
            sum += v;
            sum2 += v * v;
            ++n;
        }
    const double mean = sum / n;
    return std::max(0.0, sum2 / n - mean * mean);
}

double squared_distance(Pixel a, Pixel b)
{
    const double dr = a.row - b.row;
    const double dc = a.col - b.col;
    return dr * dr + dc * dc;
}

double similarity(double a, double b, double sigma)
{
    const double d = a - b;
    return std::exp(-(d * d) / (2.0 * sigma * sigma));
}

/// Fills the influence, similarity and distance channels for one prompt class.
void fill_prompt_channels(const Image& image, const std::vector<Pixel>& locations, int spatial_channel,
                          int similar_channel, int distance_channel, FeatureMap& out)
{
    const int h = image.height();
    const int w = image.width();
    const double diagonal = std::hypot(static_cast<double>(h), static_cast<double>(w));
#pragma omp parallel for schedule(static)
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            const Pixel q{r, c};
            if (locations.empty())
            {
                out.at(r, c, distance_channel) = 1.0;
                continue;
            }
            std::array<double, 4> spatial{};
            std::array<double, 4> similar{};
            double nearest2 = std::numeric_limits<double>::infinity();
            for (const auto& p : locations)
            {
                const double d2 = squared_distance(q, p);
                nearest2 = std::min(nearest2, d2);
                const double sim = similarity(image[q], image[p], kSimilaritySigma);
                for (std::size_t s = 0; s < kPromptSigmas.size(); ++s)
                {
                    const double k = std::exp(-d2 / (2.0 * kPromptSigmas[s] * kPromptSigmas[s]));
                    spatial[s] = std::max(spatial[s], k);
                    similar[s] = std::max(similar[s], k * sim);
                }
            }
            for (std::size_t s = 0; s < kPromptSigmas.size(); ++s)
            {
                out.at(r, c, spatial_channel + static_cast<int>(s)) = spatial[s];
                out.at(r, c, similar_channel + static_cast<int>(s)) = similar[s];
            }
            out.at(r, c, distance_channel) = std::min(1.0, std::sqrt(nearest2) / diagonal);
        }
}

} // namespace

double ToyBackbone::prompt_weight(const Image& image, Pixel q, Pixel p)
{
    return std::exp(-squared_distance(q, p) / (2.0 * kSpatialSigma * kSpatialSigma)) *
           similarity(image[q], image[p], kIntensitySigma);
}

Grid<double> ToyBackbone::score_map_reference(const Image& image, std::span<const Prompt> prompts)
{
    Grid<double> out(image.height(), image.width(), 0.0);
    for (int r = 0; r < image.height(); ++r)
        for (int c = 0; c < image.width(); ++c)
        {
            double s = 0.0;
            for (const auto& p : prompts)
            {
                const double wq = prompt_weight(image, {r, c}, p.location);
                s += p.label != 0 ? wq : -wq;
            }
            out(r, c) = s;
        }
    return out;
}

Grid<double> ToyBackbone::score_map(const Image& image, std::span<const Prompt> prompts)
{
    for (const auto& p : prompts)
        if (!image.in_bounds(p.location))
            throw ContractViolation("prompt location outside the image");
    const int h = image.height();
    const int w = image.width();
    Grid<double> out(h, w, 0.0);
#pragma omp parallel for schedule(static)
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            double s = 0.0;
            for (const auto& p : prompts)
            {
                const double wq = prompt_weight(image, {r, c}, p.location);
                s += p.label != 0 ? wq : -wq;
            }
            out(r, c) = s;
        }
    return out;
}

FeatureMap ToyBackbone::compute_features(const Image& image, const PromptSet& prompts) const
{
    image.validate();
    prompts.check_bounds(image.height(), image.width());
    const int h = image.height();
    const int w = image.width();
    FeatureMap f(h, w, kFeatureChannels, 0.0);

    std::array<Grid<double>, 4> blurs;
    for (std::size_t s = 0; s < kBlurSigmas.size(); ++s)
        blurs[s] = gaussian_blur(image, kBlurSigmas[s]);

    std::vector<Pixel> include;
    std::vector<Pixel> exclude;
    for (const auto& p : prompts.prompts())
        (p.label != 0 ? include : exclude).push_back(p.location);

    const Grid<double> scores = score_map(image, prompts.prompts());
    const double include_count = static_cast<double>(include.size()) / kPromptCountScale;
    const double exclude_count = static_cast<double>(exclude.size()) / kPromptCountScale;

#pragma omp parallel for schedule(static)
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            f.at(r, c, channel::kIntensity) = image(r, c);
            for (int s = 0; s < 4; ++s)
                f.at(r, c, channel::kBlur + s) = blurs[static_cast<std::size_t>(s)](r, c);
            f.at(r, c, channel::kGradient) = gradient_magnitude(blurs[0], r, c);
            f.at(r, c, channel::kGradient + 1) = gradient_magnitude(blurs[1], r, c);
            f.at(r, c, channel::kLocalVariance) = local_variance(image, r, c);
            f.at(r, c, channel::kRowCoord) = h > 1 ? static_cast<double>(r) / (h - 1) : 0.0;
            f.at(r, c, channel::kColCoord) = w > 1 ? static_cast<double>(c) / (w - 1) : 0.0;
            f.at(r, c, channel::kIncludeCount) = include_count;
            f.at(r, c, channel::kExcludeCount) = exclude_count;
            f.at(r, c, channel::kScore) = scores(r, c);
            f.at(r, c, channel::kBias) = 1.0;
        }

    fill_prompt_channels(image, include, channel::kIncludeSpatial, channel::kIncludeSimilar,
                         channel::kIncludeDistance, f);
    fill_prompt_channels(image, exclude, channel::kExcludeSpatial, channel::kExcludeSimilar,
                         channel::kExcludeDistance, f);
    return f;
}

std::vector<int> ToyBackbone::fixed_channels() const
{
    return {channel::kIntensity, channel::kBlur,     channel::kBlur + 1,     channel::kBlur + 2,
            channel::kBlur + 3,  channel::kGradient, channel::kGradient + 1, channel::kLocalVariance,
            channel::kRowCoord,  channel::kColCoord, channel::kBias};
}

BackboneOutput ToyBackbone::predict_mask(const Image& image, const PromptSet& prompts) const
{
    BackboneOutput out;
    out.features = compute_features(image, prompts);
    out.score_map = Grid<double>(image.height(), image.width(), 0.0);
    for (std::size_t i = 0; i < out.score_map.size(); ++i)
        out.score_map[i] = out.features.data[i * kFeatureChannels + channel::kScore];

    out.mask = BinaryMask(image.height(), image.width(), 0);
    if (prompts.inclusion_count() > 0)
        for (std::size_t i = 0; i < out.mask.size(); ++i)
            out.mask[i] = out.score_map[i] > kScoreThreshold ? 1 : 0;
    return out;
}

} // namespace activeprompt
