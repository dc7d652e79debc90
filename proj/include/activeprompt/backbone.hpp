// backbone.hpp
//
// Frozen promptable segmenter. Downstream code only sees the abstract
// Backbone interface; ToyBackbone is a deterministic, cheap stand-in with a
// fixed 32-channel feature bank and kernel-weighted prompt scoring.

#pragma once

#include "activeprompt/kernels.hpp"
#include "activeprompt/types.hpp"

#include <vector>

#include <span>

namespace activeprompt
{

inline constexpr int kFeatureChannels = 32;

/// H x W x 32 decoder-style feature map (channel-last).
using FeatureMap = Tensor3;

struct BackboneOutput
{
    FeatureMap features;
    BinaryMask mask;
    Grid<double> score_map;
};

class Backbone
{
public:
    virtual ~Backbone() = default;

    virtual FeatureMap compute_features(const Image& image, const PromptSet& prompts) const = 0;
    virtual BackboneOutput predict_mask(const Image& image, const PromptSet& prompts) const = 0;
    /// Feature channels that depend on the image alone, not on the prompts.
    virtual std::vector<int> fixed_channels() const { return {}; }
};

/// Channel layout of ToyBackbone::compute_features.
namespace channel
{
inline constexpr int kIntensity = 0;
inline constexpr int kBlur = 1;          ///< 4 channels, sigma 1, 2, 4, 8
inline constexpr int kGradient = 5;      ///< 2 channels, |grad| of blur sigma 1, 2
inline constexpr int kLocalVariance = 7; ///< 5x5 window
inline constexpr int kIncludeSpatial = 8;   ///< 4 channels, sigma_p 4, 8, 16, 32
inline constexpr int kIncludeSimilar = 12;  ///< 4 channels, spatial x intensity similarity
inline constexpr int kExcludeSpatial = 16;
inline constexpr int kExcludeSimilar = 20;
inline constexpr int kRowCoord = 24;
inline constexpr int kColCoord = 25;
inline constexpr int kIncludeDistance = 26;
inline constexpr int kExcludeDistance = 27;
inline constexpr int kIncludeCount = 28;
inline constexpr int kExcludeCount = 29;
inline constexpr int kScore = 30;
inline constexpr int kBias = 31;
} // namespace channel

class ToyBackbone final : public Backbone
{
public:
    static constexpr double kSpatialSigma = 24.0;   ///< sigma_m
    static constexpr double kIntensitySigma = 0.1;  ///< sigma_I
    static constexpr double kScoreThreshold = 0.05; ///< tau_s
    static constexpr double kPromptCountScale = 15.0;

    FeatureMap compute_features(const Image& image, const PromptSet& prompts) const override;
    BackboneOutput predict_mask(const Image& image, const PromptSet& prompts) const override;
    std::vector<int> fixed_channels() const override;

    /// w(q, p) = exp(-|q-p|^2 / (2 sigma_m^2)) * exp(-(I(q)-I(p))^2 / (2 sigma_I^2)).
    static double prompt_weight(const Image& image, Pixel q, Pixel p);

    /// s(q) = sum_incl w(q, q_i) - sum_excl w(q, q_j). Accepts a raw prompt
    /// list, so coincident prompts are allowed here.
    static Grid<double> score_map(const Image& image, std::span<const Prompt> prompts);
    static Grid<double> score_map_reference(const Image& image, std::span<const Prompt> prompts);
};

} // namespace activeprompt
