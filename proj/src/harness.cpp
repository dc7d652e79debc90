// harness.cpp

#include "activeprompt/harness.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace activeprompt
{

std::vector<LoadedItem> load_split(const std::filesystem::path& data_dir, const std::string& split)
{
    std::vector<LoadedItem> out;
    for (const auto& item : read_manifest(data_dir))
        if (split.empty() || item.split == split)
            out.push_back(load_item(data_dir, item));
    return out;
}

TrainResult train_head_on_dataset(const std::filesystem::path& data_dir, const Backbone& backbone,
                                  const HeadConfig& config)
{
    const auto train_items = load_split(data_dir, "train");
    const auto val_items = load_split(data_dir, "val");
    const auto train = make_training_examples(train_items, derive_seed(config.seed, 0x7A1));
    const auto val = make_training_examples(val_items, derive_seed(config.seed, 0x7A2));
    return train_map(train, val, backbone, config);
}

LaplacePosterior fit_laplace_on_dataset(const std::filesystem::path& data_dir, const HeadParams& head,
                                        const Backbone& backbone, const LaplaceFitConfig& config)
{
    if (config.subset == 0)
        throw ContractViolation("Laplace subset must be non-empty");
    const auto items = load_split(data_dir, "train");
    auto examples = make_training_examples(items, derive_seed(config.seed, 0x7A1));
    std::mt19937_64 rng(derive_seed(config.seed, 0x1A9));
    std::shuffle(examples.begin(), examples.end(), rng);
    if (examples.size() > config.subset)
        examples.resize(config.subset);
    LaplaceOptions options;
    options.pixels_per_example = config.pixels_per_example;
    options.seed = derive_seed(config.seed, 0x1A9, 1);
    return fit_laplace(head, examples, backbone, config.prior_precision, options);
}

std::vector<StrategyKind> parse_strategy_list(const std::string& list)
{
    std::vector<StrategyKind> out;
    std::set<StrategyKind> seen;
    std::istringstream in(list);
    std::string name;
    while (std::getline(in, name, ','))
    {
        const StrategyKind kind = parse_strategy(name);
        if (!seen.insert(kind).second)
            throw ContractViolation("strategy '" + name + "' listed twice");
        out.push_back(kind);
    }
    if (out.empty())
        throw ContractViolation("strategy list is empty");
    return out;
}

std::optional<std::filesystem::path> find_replay_log(const std::filesystem::path& dir, const std::string& item_id)
{
    if (dir.empty() || !std::filesystem::is_directory(dir))
        return std::nullopt;
    if (const auto exact = dir / (item_id + ".jsonl"); std::filesystem::exists(exact))
        return exact;
    std::vector<std::filesystem::path> matches;
    const std::string prefix = item_id + "__";
    for (const auto& e : std::filesystem::directory_iterator(dir))
    {
        const std::string name = e.path().filename().string();
        if (name.starts_with(prefix) && e.path().extension() == ".jsonl")
            matches.push_back(e.path());
    }
    if (matches.empty())
        return std::nullopt;
    std::sort(matches.begin(), matches.end());
    return matches.front();
}

namespace
{

Trajectory empty_run(StrategyKind strategy, std::uint64_t seed, double iou0)
{
    Trajectory t;
    t.strategy = strategy;
    t.seed = seed;
    t.iou0 = iou0;
    t.stop = StopReason::budget_exhausted;
    return t;
}

} // namespace

BenchResult run_benchmark(const Backbone& backbone, const BenchConfig& config)
{
    if (config.strategies.empty())
        throw ContractViolation("bench needs at least one strategy");
    if (config.samples < 1)
        throw ContractViolation("bench needs samples >= 1");
    if (config.seeds.empty())
        throw ContractViolation("bench needs at least one seed");
    StopConfig stop;
    stop.budget = config.budget;
    stop.tau_mi = config.tau_mi;
    stop.tau_ent = config.tau_ent;
    stop.validate();

    const auto manifest = read_manifest(config.data_dir);
    const LaplacePosterior posterior = load_posterior(config.posterior_path);
    std::vector<ManifestItem> items;
    for (const auto& m : manifest)
        if (config.split.empty() || m.split == config.split)
            items.push_back(m);
    if (items.empty())
        throw ContractViolation("bench: no dataset items selected");

    const bool has_bald =
        std::find(config.strategies.begin(), config.strategies.end(), StrategyKind::bald) != config.strategies.end();

    struct Job
    {
        std::size_t item;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::uint64_t s : config.seeds)
            jobs.push_back({i, s});

    std::vector<std::vector<RunResult>> per_job(jobs.size());
    std::vector<std::string> failures(jobs.size());

#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(jobs.size()); ++j)
    {
        try
        {
            const Job job = jobs[static_cast<std::size_t>(j)];
            const ManifestItem& meta = items[job.item];
            const LoadedItem item = load_item(config.data_dir, meta);
            const std::optional<BinaryMask> gt = item.mask;
            const auto ensemble = session_ensemble(posterior, config.samples, job.seed);
            auto& out = per_job[static_cast<std::size_t>(j)];
            auto record = [&](StrategyKind kind, Trajectory t) {
                out.push_back({meta.dataset, std::string(to_string(kind)), job.seed, meta.id, std::move(t)});
            };

            std::optional<std::size_t> matched;
            if (has_bald)
            {
                SessionSetup setup;
                setup.strategy = StrategyKind::bald;
                setup.stop = stop;
                setup.seed = job.seed;
                setup.candidates.stride = config.stride;
                setup.ensemble = ensemble;
                SimulatedAnnotator annotator(item.mask);
                Trajectory t = run_session(backbone, item.image, gt, annotator, setup);
                matched = t.length();
                record(StrategyKind::bald, std::move(t));
            }
            for (StrategyKind kind : config.strategies)
            {
                if (kind == StrategyKind::bald)
                    continue;
                SessionSetup setup;
                setup.strategy = kind;
                setup.stop = stop;
                setup.seed = job.seed;
                setup.candidates.stride = config.stride;
                if (kind == StrategyKind::human_replay)
                {
                    const auto log = find_replay_log(config.replay_dir, meta.id);
                    if (!log)
                        continue;
                    setup.replay = std::make_shared<const ReplayLog>(read_replay_log(*log));
                    setup.ensemble = ensemble;
                    SimulatedAnnotator annotator(item.mask);
                    record(kind, run_session(backbone, item.image, gt, annotator, setup));
                    continue;
                }
                if (matched)
                {
                    if (*matched == 0)
                    {
                        const double iou0 = iou(backbone.predict_mask(item.image, PromptSet{}).mask, item.mask);
                        record(kind, empty_run(kind, job.seed, iou0));
                    }
                    else
                    {
                        SessionSetup m = setup;
                        m.stop.budget = static_cast<int>(*matched);
                        m.suppress_score_rules = true;
                        if (uses_ensemble(kind))
                            m.ensemble = ensemble;
                        SimulatedAnnotator annotator(item.mask);
                        record(kind, run_session(backbone, item.image, gt, annotator, m));
                    }
                    continue;
                }
                if (uses_ensemble(kind))
                    setup.ensemble = ensemble;
                SimulatedAnnotator annotator(item.mask);
                record(kind, run_session(backbone, item.image, gt, annotator, setup));
            }
        }
        catch (const std::exception& e)
        {
            failures[static_cast<std::size_t>(j)] = e.what();
        }
    }
    for (const auto& f : failures)
        if (!f.empty())
            throw std::runtime_error("bench: " + f);

    BenchResult result;
    for (auto& list : per_job)
        for (auto& r : list)
            result.runs.push_back(std::move(r));
    result.rows = aggregate_report(result.runs);

    if (!config.out_path.empty())
    {
        const auto traj_dir = std::filesystem::path(config.out_path.string() + ".traj");
        std::filesystem::create_directories(traj_dir);
        for (const auto& r : result.runs)
            save_trajectory(traj_dir / (r.item_id + "." + r.strategy + ".s" + std::to_string(r.seed) + ".jsonl"),
                            r.trajectory);
        std::ofstream out(config.out_path, std::ios::binary);
        if (!out)
            throw std::runtime_error("cannot open " + config.out_path.string() + " for writing");
        write_report_csv(out, result.rows);
    }
    return result;
}

} // namespace activeprompt
