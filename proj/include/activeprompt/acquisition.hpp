// acquisition.hpp
//
// Posterior ensembles, per-pixel acquisition scores (BALD mutual
// information, predictive entropy, random, oracle error) and next-query
// selection.

#pragma once

#include "activeprompt/backbone.hpp"
#include "activeprompt/head.hpp"
#include "activeprompt/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace activeprompt
{

struct EnsembleMaps
{
    std::vector<ProbabilityMap> maps;

    std::size_t k() const { return maps.size(); }
};

enum class ScoreKind
{
    mutual_information,
    predictive_entropy,
    random,
    oracle_error,
};

std::string_view to_string(ScoreKind kind);

struct ScoreMap
{
    Grid<double> values;
    ScoreKind kind = ScoreKind::mutual_information;

    bool operator==(const ScoreMap&) const = default;
};

enum class StrategyKind
{
    bald,
    entropy,
    random,
    oracle,
    human_replay,
};

std::string_view to_string(StrategyKind kind);
/// Throws ContractViolation for an unknown name.
StrategyKind parse_strategy(std::string_view name);

/// True for strategies whose scores come from the posterior ensemble.
inline bool uses_ensemble(StrategyKind kind)
{
    return kind == StrategyKind::bald || kind == StrategyKind::entropy;
}

class PosteriorEnsemble;

/// First-layer response of the feature channels that stay fixed for one
/// image, reused across prompt updates. Rebuilt whenever those channels, the
/// channel list or the ensemble change.
struct FixedChannelCache
{
    std::vector<int> channels;

    const PosteriorEnsemble* owner = nullptr;
    std::vector<int> fixed_used;
    std::vector<double> snapshot;        ///< pixels x fixed channels
    std::vector<float> response;        ///< pixels x (c1 * K) column-major, bias included
    std::vector<int> varying;
    std::vector<float> varying_weights; ///< (9 * varying) x (c1 * K)
};

/// K posterior samples packed for batched single-precision inference: the
/// first layer of all samples runs as one GEMM over a shared im2col of the
/// features; later layers run per sample as direct convolutions.
/// Probabilities are formed in double from the float logits.
class PosteriorEnsemble
{
public:
    PosteriorEnsemble() = default;
    /// Throws ContractViolation if samples is empty or architectures differ.
    explicit PosteriorEnsemble(std::vector<HeadParams> samples);

    std::size_t k() const { return samples_.size(); }
    const std::vector<HeadParams>& samples() const { return samples_; }

    /// One dropout-off forward pass per sample, maps in sample order.
    EnsembleMaps predict(const FeatureMap& features) const;
    /// Same maps, with the fixed channels' first-layer response cached.
    EnsembleMaps predict(const FeatureMap& features, FixedChannelCache& cache) const;

private:
    /// z1 is the column-major first-layer response, pixels x (c1 * K).
    EnsembleMaps finish(const FeatureMap& features, std::span<const float> z1) const;

    std::vector<HeadParams> samples_;
    std::vector<float> first_weights_; ///< patch_length x (c1 * K)
    std::vector<float> first_bias_;
    /// [sample][layer - 1], same layout as ConvView::weights.
    std::vector<std::vector<std::vector<float>>> tap_weights_;
    std::vector<std::vector<std::vector<float>>> tap_bias_;
};

EnsembleMaps predictive_ensemble(const FeatureMap& features, std::span<const HeadParams> samples);
/// One head_forward_reference per sample.
EnsembleMaps predictive_ensemble_reference(const FeatureMap& features, std::span<const HeadParams> samples);

struct EnsembleScores
{
    ScoreMap mutual_information;
    ScoreMap predictive_entropy;
};

/// Both BALD terms in one pass over the ensemble.
EnsembleScores ensemble_scores(const EnsembleMaps& ensemble);
ScoreMap mutual_information_map(const EnsembleMaps& ensemble);
ScoreMap predictive_entropy_map(const EnsembleMaps& ensemble);

/// Uniform [0,1) scores from a seeded generator.
ScoreMap random_score_map(int height, int width, std::uint64_t seed);

/// Candidate set: pixels whose row and column are multiples of stride,
/// minus already-queried locations.
struct CandidateSet
{
    int stride = 1;

    bool contains(Pixel p) const { return p.row % stride == 0 && p.col % stride == 0; }
};

/// Argmax over the candidate set; ties go to the lowest row-major index.
/// Throws ExhaustionError when every candidate has been queried.
Pixel select_next(const ScoreMap& scores, std::span<const Pixel> queried, CandidateSet candidates = {});

/// Largest 4-connected component of unqueried error pixels, then its pixel
/// farthest (4-neighbour steps) from the component boundary; nullopt when no
/// error pixel remains.
std::optional<Pixel> oracle_select(const BinaryMask& predicted, const BinaryMask& gt, std::span<const Pixel> queried);

/// |predicted - gt| as a score map.
ScoreMap oracle_error_map(const BinaryMask& predicted, const BinaryMask& gt);

/// Maximum score over unqueried candidates; 0 when none remain.
double max_over_candidates(const ScoreMap& scores, std::span<const Pixel> queried, CandidateSet candidates = {});
/// Sum of scores over unqueried candidates.
double sum_over_candidates(const ScoreMap& scores, std::span<const Pixel> queried, CandidateSet candidates = {});

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// {"height", "width", "kind", "max_value"} header used by the float grid export.
std::string score_header_json(const ScoreMap& scores);
/// Row-major little-endian float32 grid.
std::vector<std::uint8_t> score_grid_f32(const ScoreMap& scores);
/// 8-bit rendering: round(255 * v / max), all zeros when max is 0.
Grid<std::uint8_t> render_heatmap(const ScoreMap& scores);
/// Grayscale 8-bit PNG.
std::vector<std::uint8_t> encode_png(const Grid<std::uint8_t>& gray);

} // namespace activeprompt
