// acquisition.cpp

#include "activeprompt/acquisition.hpp"

#include "activeprompt/kernels.hpp"

#include <Eigen/Core>
#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <limits>
#include <random>

namespace activeprompt
{

std::string_view to_string(ScoreKind kind)
{
    switch (kind)
    {
    case ScoreKind::mutual_information:
        return "mutual_information";
    case ScoreKind::predictive_entropy:
        return "predictive_entropy";
    case ScoreKind::random:
        return "random";
    case ScoreKind::oracle_error:
        return "oracle_error";
    }
    return "mutual_information";
}

std::string_view to_string(StrategyKind kind)
{
    switch (kind)
    {
    case StrategyKind::bald:
        return "bald";
    case StrategyKind::entropy:
        return "entropy";
    case StrategyKind::random:
        return "random";
    case StrategyKind::oracle:
        return "oracle";
    case StrategyKind::human_replay:
        return "human_replay";
    }
    return "bald";
}

StrategyKind parse_strategy(std::string_view name)
{
    if (name == "bald")
        return StrategyKind::bald;
    if (name == "entropy")
        return StrategyKind::entropy;
    if (name == "random")
        return StrategyKind::random;
    if (name == "oracle")
        return StrategyKind::oracle;
    if (name == "human_replay")
        return StrategyKind::human_replay;
    throw ContractViolation("unknown strategy '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

PosteriorEnsemble::PosteriorEnsemble(std::vector<HeadParams> samples)
    : samples_(std::move(samples))
{
    if (samples_.empty())
        throw ContractViolation("posterior ensemble needs at least one sample");
    for (const auto& s : samples_)
    {
        if (!s.same_architecture(samples_.front()))
            throw ContractViolation("posterior samples must share one architecture");
        s.validate();
    }

    const HeadParams& arch = samples_.front();
    const std::size_t plen = 9 * static_cast<std::size_t>(arch.channels[0]);
    const auto c1 = static_cast<std::size_t>(arch.channels[1]);
    const std::size_t k = samples_.size();
    first_weights_.assign(plen * c1 * k, 0.0f);
    first_bias_.assign(c1 * k, 0.0f);
    for (std::size_t s = 0; s < k; ++s)
    {
        const ConvView layer = samples_[s].layer(0);
        for (std::size_t row = 0; row < plen; ++row)
            for (std::size_t oc = 0; oc < c1; ++oc)
                first_weights_[row * c1 * k + s * c1 + oc] = static_cast<float>(layer.weights[row * c1 + oc]);
        for (std::size_t oc = 0; oc < c1; ++oc)
            first_bias_[s * c1 + oc] = static_cast<float>(layer.bias[oc]);
    }

    tap_weights_.resize(k);
    tap_bias_.resize(k);
    for (std::size_t s = 0; s < k; ++s)
        for (std::size_t l = 1; l < arch.layer_count(); ++l)
        {
            const ConvView layer = samples_[s].layer(l);
            tap_weights_[s].emplace_back(layer.weights.begin(), layer.weights.end());
            tap_bias_[s].emplace_back(layer.bias.begin(), layer.bias.end());
        }
}

namespace
{

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Direct 3x3 convs, zero padding, channel-last, weights[(tap * cin + c) * cout + o].
// Four partial sums over input channels keep the FMA chains independent.
template <int CO>
void conv3x3_direct(const float* __restrict in, int height, int width, int cin, const float* __restrict weights,
                    const float* __restrict bias, float* __restrict out)
{
    using Vec = Eigen::Matrix<float, CO, 1>;
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
        {
            Vec acc[4] = {Eigen::Map<const Vec>(bias), Vec::Zero(), Vec::Zero(), Vec::Zero()};
            for (int ky = 0; ky < 3; ++ky)
            {
                const int sr = r + ky - 1;
                if (sr < 0 || sr >= height)
                    continue;
                for (int kx = 0; kx < 3; ++kx)
                {
                    const int sc = c + kx - 1;
                    if (sc < 0 || sc >= width)
                        continue;
                    const float* src = in + (static_cast<std::size_t>(sr) * static_cast<std::size_t>(width) +
                                             static_cast<std::size_t>(sc)) * static_cast<std::size_t>(cin);
                    const float* wt = weights + static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(cin) * CO;
                    int ci = 0;
                    for (; ci + 4 <= cin; ci += 4)
                        for (int u = 0; u < 4; ++u)
                            acc[u] += src[ci + u] * Eigen::Map<const Vec>(wt + (ci + u) * CO);
                    for (; ci < cin; ++ci)
                        acc[0] += src[ci] * Eigen::Map<const Vec>(wt + ci * CO);
                }
            }
            Eigen::Map<Vec>(out + (static_cast<std::size_t>(r) * static_cast<std::size_t>(width) +
                                   static_cast<std::size_t>(c)) * CO) = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        }
}

// Single output channel: weights[tap * cin + c], one dot product per tap.
void conv3x3_direct_single(const float* __restrict in, int height, int width, int cin, const float* __restrict weights,
                           float bias, float* __restrict out, std::size_t out_stride)
{
    using V8 = Eigen::Matrix<float, 8, 1>;
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
        {
            V8 acc = V8::Zero();
            float rest = bias;
            for (int ky = 0; ky < 3; ++ky)
            {
                const int sr = r + ky - 1;
                if (sr < 0 || sr >= height)
                    continue;
                for (int kx = 0; kx < 3; ++kx)
                {
                    const int sc = c + kx - 1;
                    if (sc < 0 || sc >= width)
                        continue;
                    const float* src = in + (static_cast<std::size_t>(sr) * static_cast<std::size_t>(width) +
                                             static_cast<std::size_t>(sc)) * static_cast<std::size_t>(cin);
                    const float* wt = weights + static_cast<std::size_t>(ky * 3 + kx) * static_cast<std::size_t>(cin);
                    int ci = 0;
                    for (; ci + 8 <= cin; ci += 8)
                        acc += Eigen::Map<const V8>(src + ci).cwiseProduct(Eigen::Map<const V8>(wt + ci));
                    for (; ci < cin; ++ci)
                        rest += src[ci] * wt[ci];
                }
            }
            out[(static_cast<std::size_t>(r) * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)) *
                out_stride] = acc.sum() + rest;
        }
}

// Any output width: one single-channel pass per output over transposed weights.
void conv3x3_direct_any(const float* in, int height, int width, int cin, int cout, const float* weights,
                        const float* bias, float* out)
{
    std::vector<float> wt(static_cast<std::size_t>(9 * cin));
    for (int o = 0; o < cout; ++o)
    {
        for (int t = 0; t < 9 * cin; ++t)
            wt[static_cast<std::size_t>(t)] = weights[static_cast<std::size_t>(t) * static_cast<std::size_t>(cout) +
                                                      static_cast<std::size_t>(o)];
        conv3x3_direct_single(in, height, width, cin, wt.data(), bias[o], out + o, static_cast<std::size_t>(cout));
    }
}

void conv3x3_float(const std::vector<float>& in, int height, int width, int cin, const std::vector<float>& weights,
                   const std::vector<float>& bias, std::vector<float>& out)
{
    const int cout = static_cast<int>(bias.size());
    out.resize(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * static_cast<std::size_t>(cout));
    switch (cout)
    {
    case 1:
        conv3x3_direct_single(in.data(), height, width, cin, weights.data(), bias[0], out.data(), 1);
        break;
    case 8:
        conv3x3_direct<8>(in.data(), height, width, cin, weights.data(), bias.data(), out.data());
        break;
    case 16:
        conv3x3_direct<16>(in.data(), height, width, cin, weights.data(), bias.data(), out.data());
        break;
    default:
        conv3x3_direct_any(in.data(), height, width, cin, cout, weights.data(), bias.data(), out.data());
    }
}

// im2col restricted to the listed channels: row q, column tap * m + j.
void im2col3x3_channels(const FeatureMap& in, std::span<const int> channels, RowMat& cols)
{
    const int h = in.height;
    const int w = in.width;
    const auto m = static_cast<Eigen::Index>(channels.size());
    cols.setZero(static_cast<Eigen::Index>(h) * w, 9 * m);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            float* row = cols.row(static_cast<Eigen::Index>(r) * w + c).data();
            for (int ky = 0; ky < 3; ++ky)
            {
                const int sr = r + ky - 1;
                if (sr < 0 || sr >= h)
                    continue;
                for (int kx = 0; kx < 3; ++kx)
                {
                    const int sc = c + kx - 1;
                    if (sc < 0 || sc >= w)
                        continue;
                    const double* src = &in.at(sr, sc, 0);
                    float* dst = row + (ky * 3 + kx) * m;
                    for (Eigen::Index j = 0; j < m; ++j)
                        dst[j] = static_cast<float>(src[channels[static_cast<std::size_t>(j)]]);
                }
            }
        }
}

// Rows of a stacked (9 * cin) x cols weight matrix for the listed channels.
std::vector<float> weight_rows(std::span<const float> weights, int cin, std::size_t cols, std::span<const int> channels)
{
    std::vector<float> out(9 * channels.size() * cols);
    for (std::size_t tap = 0; tap < 9; ++tap)
        for (std::size_t j = 0; j < channels.size(); ++j)
            std::copy_n(&weights[(tap * static_cast<std::size_t>(cin) + static_cast<std::size_t>(channels[j])) * cols],
                        cols, &out[(tap * channels.size() + j) * cols]);
    return out;
}

// out += cols * weights. A column-major result keeps every output column
// on the same kernel path, so identical samples get bit-identical responses.
void accumulate_product(const RowMat& cols, std::span<const float> weights, Eigen::MatrixXf& out)
{
    out.noalias() += cols * Eigen::Map<const RowMat>(weights.data(), cols.cols(), out.cols());
}

} // namespace

EnsembleMaps PosteriorEnsemble::predict(const FeatureMap& features) const
{
    FixedChannelCache none;
    return predict(features, none);
}

EnsembleMaps PosteriorEnsemble::predict(const FeatureMap& features, FixedChannelCache& cache) const
{
    if (samples_.empty())
        throw ContractViolation("empty posterior ensemble");
    const int cin = samples_.front().channels[0];
    if (features.channels != cin)
        throw ContractViolation("ensemble: feature channel count does not match the head");
    for (int c : cache.channels)
        if (c < 0 || c >= cin)
            throw ContractViolation("fixed channel index out of range");

    const std::size_t n = features.pixels();
    const auto rows = static_cast<Eigen::Index>(n);
    const auto width = static_cast<Eigen::Index>(first_bias_.size());
    std::vector<double> snapshot;
    snapshot.reserve(n * cache.channels.size());
    for (std::size_t q = 0; q < n; ++q)
        for (int c : cache.channels)
            snapshot.push_back(features.data[q * static_cast<std::size_t>(cin) + static_cast<std::size_t>(c)]);

    if (cache.owner != this || cache.fixed_used != cache.channels || cache.snapshot != snapshot)
    {
        std::vector<bool> fixed(static_cast<std::size_t>(cin), false);
        for (int c : cache.channels)
            fixed[static_cast<std::size_t>(c)] = true;
        std::vector<int> fixed_list;
        cache.varying.clear();
        for (int c = 0; c < cin; ++c)
            (fixed[static_cast<std::size_t>(c)] ? fixed_list : cache.varying).push_back(c);

        Eigen::MatrixXf response(rows, width);
        response.rowwise() = Eigen::Map<const Eigen::RowVectorXf>(first_bias_.data(), width);
        if (!fixed_list.empty())
        {
            RowMat cols;
            im2col3x3_channels(features, fixed_list, cols);
            const std::vector<float> w = weight_rows(first_weights_, cin, first_bias_.size(), fixed_list);
            accumulate_product(cols, w, response);
        }
        cache.response.assign(response.data(), response.data() + response.size());
        cache.varying_weights = weight_rows(first_weights_, cin, first_bias_.size(), cache.varying);
        cache.snapshot = std::move(snapshot);
        cache.fixed_used = cache.channels;
        cache.owner = this;
    }

    Eigen::MatrixXf z1 = Eigen::Map<const Eigen::MatrixXf>(cache.response.data(), rows, width);
    if (!cache.varying.empty())
    {
        RowMat cols;
        im2col3x3_channels(features, cache.varying, cols);
        accumulate_product(cols, cache.varying_weights, z1);
    }
    return finish(features, std::span<const float>(z1.data(), static_cast<std::size_t>(z1.size())));
}

EnsembleMaps PosteriorEnsemble::finish(const FeatureMap& features, std::span<const float> z1) const
{
    const HeadParams& arch = samples_.front();
    const int c1 = arch.channels[1];
    const std::size_t k = samples_.size();
    const std::size_t layers = arch.layer_count();
    EnsembleMaps out;
    out.maps.resize(k);
    const auto n = static_cast<Eigen::Index>(features.pixels());
    const Eigen::Map<const Eigen::MatrixXf> z1m(z1.data(), n, c1 * static_cast<Eigen::Index>(k));
    std::vector<float> current, next;
    for (std::size_t s = 0; s < k; ++s)
    {
        int channels = c1;
        current.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(c1));
        Eigen::Map<RowMat>(current.data(), n, c1) = z1m.middleCols(static_cast<Eigen::Index>(s) * c1, c1);
        for (std::size_t l = 1; l < layers; ++l)
        {
            for (float& v : current)
                v = v > 0.0f ? v : 0.0f;
            conv3x3_float(current, features.height, features.width, channels, tap_weights_[s][l - 1],
                          tap_bias_[s][l - 1], next);
            channels = static_cast<int>(tap_bias_[s][l - 1].size());
            current.swap(next);
        }
        ProbabilityMap map(features.height, features.width, 0.0);
        for (Eigen::Index q = 0; q < n; ++q)
            map[static_cast<std::size_t>(q)] =
                clamp_probability(logistic(static_cast<double>(current[static_cast<std::size_t>(q)])));
        out.maps[s] = std::move(map);
    }
    return out;
}

EnsembleMaps predictive_ensemble(const FeatureMap& features, std::span<const HeadParams> samples)
{
    if (samples.empty())
        throw ContractViolation("predictive_ensemble needs at least one sample");
    return PosteriorEnsemble(std::vector<HeadParams>(samples.begin(), samples.end())).predict(features);
}

EnsembleMaps predictive_ensemble_reference(const FeatureMap& features, std::span<const HeadParams> samples)
{
    if (samples.empty())
        throw ContractViolation("predictive_ensemble needs at least one sample");
    EnsembleMaps out;
    for (const auto& s : samples)
        out.maps.push_back(head_forward_reference(features, s));
    return out;
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

EnsembleScores ensemble_scores(const EnsembleMaps& ensemble)
{
    if (ensemble.maps.empty())
        throw ContractViolation("ensemble scores need k >= 1");
    const auto& first = ensemble.maps.front();
    for (const auto& m : ensemble.maps)
        if (!m.same_shape(first))
            throw ContractViolation("ensemble maps differ in shape");

    std::vector<std::span<const double>> views;
    views.reserve(ensemble.maps.size());
    for (const auto& m : ensemble.maps)
        views.push_back(m.values());

    EnsembleScores out{{Grid<double>(first.height(), first.width(), 0.0), ScoreKind::mutual_information},
                       {Grid<double>(first.height(), first.width(), 0.0), ScoreKind::predictive_entropy}};
    kernels::ensemble_scores(views, out.mutual_information.values.values(), out.predictive_entropy.values.values());
    return out;
}

ScoreMap mutual_information_map(const EnsembleMaps& ensemble)
{
    return ensemble_scores(ensemble).mutual_information;
}

ScoreMap predictive_entropy_map(const EnsembleMaps& ensemble)
{
    return ensemble_scores(ensemble).predictive_entropy;
}

ScoreMap random_score_map(int height, int width, std::uint64_t seed)
{
    ScoreMap out{Grid<double>(height, width, 0.0), ScoreKind::random};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : out.values.values())
        v = u(rng);
    return out;
}

ScoreMap oracle_error_map(const BinaryMask& predicted, const BinaryMask& gt)
{
    if (!predicted.same_shape(gt))
        throw ContractViolation("oracle: mask shapes differ");
    ScoreMap out{Grid<double>(gt.height(), gt.width(), 0.0), ScoreKind::oracle_error};
    for (std::size_t i = 0; i < gt.size(); ++i)
        out.values[i] = (predicted[i] != 0) != (gt[i] != 0) ? 1.0 : 0.0;
    return out;
}

namespace
{

Grid<std::uint8_t> queried_grid(int height, int width, std::span<const Pixel> queried)
{
    Grid<std::uint8_t> grid(height, width, 0);
    for (const auto& q : queried)
        if (grid.in_bounds(q))
            grid[q] = 1;
    return grid;
}

} // namespace

Pixel select_next(const ScoreMap& scores, std::span<const Pixel> queried, CandidateSet candidates)
{
    if (candidates.stride < 1)
        throw ContractViolation("candidate stride must be >= 1");
    const auto& grid = scores.values;
    const auto taken = queried_grid(grid.height(), grid.width(), queried);
    std::optional<std::size_t> best;
    double best_value = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < grid.height(); r += candidates.stride)
        for (int c = 0; c < grid.width(); c += candidates.stride)
        {
            const std::size_t i = grid.index({r, c});
            if (taken[i] != 0)
                continue;
            const double v = grid[i];
            if (!best || v > best_value)
            {
                best = i;
                best_value = v;
            }
        }
    if (!best)
        throw ExhaustionError("every candidate location has already been queried");
    return grid.pixel(*best);
}

double max_over_candidates(const ScoreMap& scores, std::span<const Pixel> queried, CandidateSet candidates)
{
    const auto& grid = scores.values;
    const auto taken = queried_grid(grid.height(), grid.width(), queried);
    double best = 0.0;
    bool any = false;
    for (int r = 0; r < grid.height(); r += candidates.stride)
        for (int c = 0; c < grid.width(); c += candidates.stride)
        {
            const std::size_t i = grid.index({r, c});
            if (taken[i] != 0)
                continue;
            best = any ? std::max(best, grid[i]) : grid[i];
            any = true;
        }
    return best;
}

double sum_over_candidates(const ScoreMap& scores, std::span<const Pixel> queried, CandidateSet candidates)
{
    const auto& grid = scores.values;
    const auto taken = queried_grid(grid.height(), grid.width(), queried);
    double sum = 0.0;
    for (int r = 0; r < grid.height(); r += candidates.stride)
        for (int c = 0; c < grid.width(); c += candidates.stride)
        {
            const std::size_t i = grid.index({r, c});
            if (taken[i] == 0)
                sum += grid[i];
        }
    return sum;
}

std::optional<Pixel> oracle_select(const BinaryMask& predicted, const BinaryMask& gt, std::span<const Pixel> queried)
{
    if (!predicted.same_shape(gt))
        throw ContractViolation("oracle: mask shapes differ");
    const int h = gt.height();
    const int w = gt.width();
    const auto taken = queried_grid(h, w, queried);

    Grid<std::uint8_t> error(h, w, 0);
    for (std::size_t i = 0; i < gt.size(); ++i)
        error[i] = ((predicted[i] != 0) != (gt[i] != 0) && taken[i] == 0) ? 1 : 0;

    static constexpr std::pair<int, int> kSteps[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};

    // Label components in row-major scan order; a strictly larger size is
    // required to replace the current best, so ties keep the earlier one.
    Grid<int> label(h, w, -1);
    int best_label = -1;
    std::size_t best_size = 0;
    int next_label = 0;
    for (std::size_t start = 0; start < error.size(); ++start)
    {
        if (error[start] == 0 || label[start] >= 0)
            continue;
        std::size_t size = 0;
        std::deque<Pixel> queue{error.pixel(start)};
        label[start] = next_label;
        while (!queue.empty())
        {
            const Pixel p = queue.front();
            queue.pop_front();
            ++size;
            for (auto [dr, dc] : kSteps)
            {
                const Pixel n{p.row + dr, p.col + dc};
                if (error.in_bounds(n) && error[n] != 0 && label[n] < 0)
                {
                    label[n] = next_label;
                    queue.push_back(n);
                }
            }
        }
        if (size > best_size)
        {
            best_size = size;
            best_label = next_label;
        }
        ++next_label;
    }
    if (best_label < 0)
        return std::nullopt;

    // Multi-source BFS from every pixel outside the component, with the
    // image exterior counted as outside (border pixels start at distance 1).
    Grid<int> dist(h, w, -1);
    std::deque<Pixel> queue;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
        {
            if (label(r, c) != best_label)
            {
                dist(r, c) = 0;
                queue.push_back({r, c});
            }
            else if (r == 0 || c == 0 || r == h - 1 || c == w - 1)
            {
                dist(r, c) = 1;
            }
        }
    // Border seeds at distance 1 must expand before interior distance-2 cells.
    std::deque<Pixel> border;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (dist(r, c) == 1)
                border.push_back({r, c});
    auto expand = [&](std::deque<Pixel>& q) {
        std::deque<Pixel> next;
        for (const auto& p : q)
            for (auto [dr, dc] : kSteps)
            {
                const Pixel n{p.row + dr, p.col + dc};
                if (dist.in_bounds(n) && dist[n] < 0)
                {
                    dist[n] = dist[p] + 1;
                    next.push_back(n);
                }
            }
        q = std::move(next);
    };
    // Level-synchronous BFS: level 0 = outside pixels, level 1 adds border seeds.
    std::deque<Pixel> frontier = std::move(queue);
    expand(frontier); // produces distance-1 cells adjacent to the outside
    for (const auto& b : border)
        frontier.push_back(b);
    while (!frontier.empty())
        expand(frontier);

    std::optional<std::size_t> best;
    int best_dist = -1;
    for (std::size_t i = 0; i < label.size(); ++i)
        if (label[i] == best_label && dist[i] > best_dist)
        {
            best_dist = dist[i];
            best = i;
        }
    return gt.pixel(*best);
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

std::string score_header_json(const ScoreMap& scores)
{
    double max_value = 0.0;
    for (double v : scores.values.values())
        max_value = std::max(max_value, v);
    nlohmann::ordered_json header;
    header["height"] = scores.values.height();
    header["width"] = scores.values.width();
    header["kind"] = std::string(to_string(scores.kind));
    header["max_value"] = max_value;
    return header.dump();
}

std::vector<std::uint8_t> score_grid_f32(const ScoreMap& scores)
{
    std::vector<std::uint8_t> bytes;
    bytes.reserve(scores.values.size() * 4);
    for (double v : scores.values.values())
    {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int b = 0; b < 4; ++b)
            bytes.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFF));
    }
    return bytes;
}

Grid<std::uint8_t> render_heatmap(const ScoreMap& scores)
{
    double max_value = 0.0;
    for (double v : scores.values.values())
        max_value = std::max(max_value, v);
    Grid<std::uint8_t> out(scores.values.height(), scores.values.width(), 0);
    if (max_value <= 0.0)
        return out;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(scores.values[i] / max_value, 0.0, 1.0)));
    return out;
}

namespace
{

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8)
        out.push_back(static_cast<std::uint8_t>((v >> s) & 0xFF));
}

void put_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data)
{
    put_u32_be(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t type_pos = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = crc32(0L, out.data() + type_pos, static_cast<uInt>(4 + data.size()));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

} // namespace

std::vector<std::uint8_t> encode_png(const Grid<std::uint8_t>& gray)
{
    const auto w = static_cast<std::uint32_t>(gray.width());
    const auto h = static_cast<std::uint32_t>(gray.height());
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(h) * (w + 1));
    for (std::uint32_t r = 0; r < h; ++r)
    {
        raw.push_back(0); // filter: none
        for (std::uint32_t c = 0; c < w; ++c)
            raw.push_back(gray(static_cast<int>(r), static_cast<int>(c)));
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> packed(packed_size);
    if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png: zlib compression failed");
    packed.resize(packed_size);

    std::vector<std::uint8_t> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, w);
    put_u32_be(ihdr, h);
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0}); // 8-bit grayscale, deflate, no filter, no interlace
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", packed);
    put_chunk(png, "IEND", {});
    return png;
}

} // namespace activeprompt
