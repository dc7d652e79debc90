// harness.hpp
//
// Pipeline drivers behind the command-line tool: head training and Laplace
// fitting over a generated dataset, and the matched-budget benchmark.

#pragma once

#include "activeprompt/backbone.hpp"
#include "activeprompt/head.hpp"
#include "activeprompt/laplace.hpp"
#include "activeprompt/metrics.hpp"
#include "activeprompt/session.hpp"
#include "activeprompt/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace activeprompt
{

/// Items of one split ("train", "val", "test"); empty split name = all.
std::vector<LoadedItem> load_split(const std::filesystem::path& data_dir, const std::string& split);

/// Trains on the train split, early-stops on the val split.
TrainResult train_head_on_dataset(const std::filesystem::path& data_dir, const Backbone& backbone,
                                  const HeadConfig& config);

struct LaplaceFitConfig
{
    std::size_t subset = 100; ///< training examples used for the precision
    double prior_precision = 1.0;
    std::uint64_t seed = 0;
    int pixels_per_example = 256;
};

/// Fits over a seeded subset of the training examples of the train split.
LaplacePosterior fit_laplace_on_dataset(const std::filesystem::path& data_dir, const HeadParams& head,
                                        const Backbone& backbone, const LaplaceFitConfig& config);

struct BenchConfig
{
    std::filesystem::path data_dir;
    std::filesystem::path posterior_path;
    std::vector<StrategyKind> strategies = {StrategyKind::bald, StrategyKind::entropy, StrategyKind::random,
                                            StrategyKind::oracle};
    int budget = 15;
    double tau_mi = 0.01;
    double tau_ent = std::numeric_limits<double>::infinity();
    std::size_t samples = kDefaultSamples;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    /// Manifest split to run on; empty = every item.
    std::string split;
    /// Recorded sessions for human_replay: <item>__*.jsonl or <item>.jsonl.
    std::filesystem::path replay_dir;
    int stride = 1;
    /// CSV report path; trajectories go to <out>.traj/. Empty = no files.
    std::filesystem::path out_path;
};

struct BenchResult
{
    std::vector<RunResult> runs;
    std::vector<ReportRow> rows;
};

/// Parses a comma-separated strategy list. Throws ContractViolation for an
/// unknown or repeated name or an empty list.
std::vector<StrategyKind> parse_strategy_list(const std::string& list);

/// For each (item, seed): BALD to convergence gives T, then the matched
/// baselines run exactly T iterations. Without BALD in the list every
/// strategy runs under the ordinary stop rules.
BenchResult run_benchmark(const Backbone& backbone, const BenchConfig& config);

/// Replay log for an item, if one exists in dir.
std::optional<std::filesystem::path> find_replay_log(const std::filesystem::path& dir, const std::string& item_id);

} // namespace activeprompt
