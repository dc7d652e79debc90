// session.cpp

#include "activeprompt/session.hpp"

#include "activeprompt/synth.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace activeprompt
{

std::string_view to_string(StopReason reason)
{
    switch (reason)
    {
    case StopReason::max_mi_below_threshold:
        return "max_mi_below_threshold";
    case StopReason::global_entropy_below_threshold:
        return "global_entropy_below_threshold";
    case StopReason::budget_exhausted:
        return "budget_exhausted";
    case StopReason::annotator_ended:
        return "annotator_ended";
    case StopReason::candidates_exhausted:
        return "candidates_exhausted";
    }
    return "budget_exhausted";
}

StopReason parse_stop_reason(std::string_view name)
{
    for (auto r : {StopReason::max_mi_below_threshold, StopReason::global_entropy_below_threshold,
                   StopReason::budget_exhausted, StopReason::annotator_ended, StopReason::candidates_exhausted})
        if (to_string(r) == name)
            return r;
    throw ContractViolation("unknown stop reason '" + std::string(name) + "'");
}

void StopConfig::validate() const
{
    if (!(tau_mi >= 0.0) || std::isnan(tau_ent))
        throw ContractViolation("stop thresholds must be non-negative");
    if (budget < 1)
        throw ContractViolation("prompt budget must be >= 1");
}

// ---------------------------------------------------------------------------
// Log format
// ---------------------------------------------------------------------------

namespace
{

std::string format_float(std::optional<double> v)
{
    if (!v)
        return "null";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", *v);
    return buf;
}

std::optional<double> optional_number(const nlohmann::json& j, const char* key)
{
    if (!j.contains(key) || j.at(key).is_null())
        return std::nullopt;
    return j.at(key).get<double>();
}

} // namespace

std::string format_record(const TrajectoryRecord& r)
{
    std::string line = "{\"t\":" + std::to_string(r.t) + ",\"q\":[" + std::to_string(r.q.row) + "," +
                       std::to_string(r.q.col) + "],\"label\":" + std::to_string(int{r.label}) +
                       ",\"iou\":" + format_float(r.iou) + ",\"max_mi\":" + format_float(r.max_mi) +
                       ",\"h_total\":" + format_float(r.h_total) + ",\"mask_sha256\":\"" + r.mask_sha256 + "\"}";
    return line;
}

std::string format_stop_line(const Trajectory& trajectory)
{
    if (!trajectory.stop)
        throw std::logic_error("trajectory has no stop reason yet");
    return "{\"stop\":\"" + std::string(to_string(*trajectory.stop)) + "\",\"strategy\":\"" +
           std::string(to_string(trajectory.strategy)) + "\",\"seed\":" + std::to_string(trajectory.seed) + "}";
}

void write_trajectory(std::ostream& out, const Trajectory& trajectory)
{
    for (const auto& r : trajectory.records)
        out << format_record(r) << '\n';
    if (trajectory.stop)
        out << format_stop_line(trajectory) << '\n';
}

std::string trajectory_jsonl(const Trajectory& trajectory)
{
    std::ostringstream out;
    write_trajectory(out, trajectory);
    return out.str();
}

void save_trajectory(const std::filesystem::path& path, const Trajectory& trajectory)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_trajectory(out, trajectory);
}

Trajectory read_trajectory(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open " + path.string());
    Trajectory trajectory;
    std::string line;
    while (std::getline(in, line))
    {
        if (line.empty())
            continue;
        const auto j = nlohmann::json::parse(line);
        if (j.contains("stop"))
        {
            trajectory.stop = parse_stop_reason(j.at("stop").get<std::string>());
            trajectory.strategy = parse_strategy(j.at("strategy").get<std::string>());
            trajectory.seed = j.at("seed").get<std::uint64_t>();
            continue;
        }
        TrajectoryRecord r;
        r.t = j.at("t").get<std::size_t>();
        r.q = {j.at("q").at(0).get<int>(), j.at("q").at(1).get<int>()};
        r.label = j.at("label").get<std::uint8_t>();
        r.iou = optional_number(j, "iou");
        r.max_mi = optional_number(j, "max_mi");
        r.h_total = optional_number(j, "h_total");
        r.mask_sha256 = j.value("mask_sha256", "");
        trajectory.records.push_back(std::move(r));
    }
    return trajectory;
}

std::optional<std::uint8_t> SimulatedAnnotator::label(Pixel q)
{
    if (!gt_.in_bounds(q))
        throw ContractViolation("annotator queried outside the image");
    return gt_[q] != 0 ? 1 : 0;
}

ReplayLog read_replay_log(const std::filesystem::path& path)
{
    ReplayLog log;
    for (const auto& r : read_trajectory(path).records)
        log.prompts.push_back({r.q, r.label});
    return log;
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

std::shared_ptr<const PosteriorEnsemble> session_ensemble(const LaplacePosterior& posterior, std::size_t k,
                                                          std::uint64_t seed)
{
    return std::make_shared<const PosteriorEnsemble>(sample_posterior(posterior, k, derive_seed(seed, 0x504F5354)));
}

namespace
{

bool scores_from_ensemble(StrategyKind kind)
{
    return uses_ensemble(kind) || kind == StrategyKind::human_replay;
}

std::vector<Pixel> queried_locations(const PromptSet& prompts)
{
    std::vector<Pixel> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts.prompts())
        out.push_back(p.location);
    return out;
}

} // namespace

Session::Session(const Backbone& backbone, Image image, std::optional<BinaryMask> gt, SessionSetup setup)
    : backbone_(&backbone), setup_(std::move(setup)), gt_(std::move(gt))
{
    setup_.stop.validate();
    image.validate();
    if (gt_ && !gt_->same_shape(image))
        throw ContractViolation("session: gt mask and image differ in shape");
    if (setup_.strategy == StrategyKind::oracle && !gt_)
        throw ContractViolation("oracle strategy needs a ground-truth mask");
    if (scores_from_ensemble(setup_.strategy) && !setup_.ensemble)
        throw ContractViolation(std::string(to_string(setup_.strategy)) + " strategy needs posterior samples");
    if (setup_.strategy == StrategyKind::human_replay && !setup_.replay)
        throw ContractViolation("human_replay strategy needs a replay log");
    if (setup_.candidates.stride < 1)
        throw ContractViolation("candidate stride must be >= 1");

    state_.image = std::move(image);
    trajectory_.strategy = setup_.strategy;
    trajectory_.seed = setup_.seed;
    ensemble_cache_.channels = backbone_->fixed_channels();
    refresh();
    if (gt_)
        trajectory_.iou0 = iou(state_.current_mask, *gt_);
}

void Session::refresh()
{
    BackboneOutput out = backbone_->predict_mask(state_.image, state_.prompts);
    state_.features = std::move(out.features);
    state_.current_mask = std::move(out.mask);
    state_.max_mi.reset();
    state_.h_total.reset();

    const int h = state_.image.height();
    const int w = state_.image.width();
    const auto queried = queried_locations(state_.prompts);
    if (scores_from_ensemble(setup_.strategy))
    {
        EnsembleScores scores = ensemble_scores(setup_.ensemble->predict(state_.features, ensemble_cache_));
        state_.max_mi = max_over_candidates(scores.mutual_information, queried, setup_.candidates);
        state_.h_total = sum_over_candidates(scores.predictive_entropy, queried, setup_.candidates);
        state_.current_scores = setup_.strategy == StrategyKind::entropy ? std::move(scores.predictive_entropy)
                                                                         : std::move(scores.mutual_information);
    }
    else if (setup_.strategy == StrategyKind::random)
    {
        state_.current_scores = random_score_map(h, w, derive_seed(setup_.seed, 0x52414E44, state_.iteration));
    }
    else
    {
        state_.current_scores = oracle_error_map(state_.current_mask, *gt_);
    }
}

std::optional<Pixel> Session::suggestion() const
{
    const auto queried = queried_locations(state_.prompts);
    switch (setup_.strategy)
    {
    case StrategyKind::oracle:
        return oracle_select(state_.current_mask, *gt_, queried);
    case StrategyKind::human_replay:
        for (const auto& p : setup_.replay->prompts)
            if (state_.image.in_bounds(p.location) && !state_.prompts.contains(p.location))
                return p.location;
        return std::nullopt;
    default:
        try
        {
            return select_next(state_.current_scores, queried, setup_.candidates);
        }
        catch (const ExhaustionError&)
        {
            return std::nullopt;
        }
    }
}

const TrajectoryRecord& Session::apply(Prompt prompt)
{
    if (stopped())
        throw std::logic_error("session already stopped");
    if (!state_.image.in_bounds(prompt.location))
        throw ContractViolation("prompt location outside the image");
    state_.prompts.add(prompt);
    ++state_.iteration;
    refresh();

    TrajectoryRecord r;
    r.t = state_.iteration;
    r.q = prompt.location;
    r.label = prompt.label;
    if (gt_)
        r.iou = iou(state_.current_mask, *gt_);
    r.max_mi = state_.max_mi;
    r.h_total = state_.h_total;
    r.mask_sha256 = mask_digest(state_.current_mask);
    trajectory_.records.push_back(std::move(r));
    return trajectory_.records.back();
}

std::optional<StopReason> check_stop(const SessionState& state, const StopConfig& config, bool score_rules)
{
    if (score_rules && state.max_mi && *state.max_mi <= config.tau_mi)
        return StopReason::max_mi_below_threshold;
    if (score_rules && std::isfinite(config.tau_ent) && state.h_total && *state.h_total <= config.tau_ent)
        return StopReason::global_entropy_below_threshold;
    if (state.iteration >= static_cast<std::size_t>(config.budget))
        return StopReason::budget_exhausted;
    return std::nullopt;
}

std::optional<StopReason> Session::check_stop()
{
    if (stopped())
        return trajectory_.stop;
    const bool score_rules = !setup_.suppress_score_rules && uses_ensemble(setup_.strategy);
    auto reason = activeprompt::check_stop(state_, setup_.stop, score_rules);
    if (reason)
        trajectory_.stop = reason;
    return reason;
}

void Session::stop(StopReason reason)
{
    if (!stopped())
        trajectory_.stop = reason;
}

void Session::step(Annotator& annotator)
{
    if (stopped())
        throw std::logic_error("session already stopped");
    const auto q = suggestion();
    if (!q)
    {
        stop(setup_.strategy == StrategyKind::human_replay ? StopReason::annotator_ended
                                                           : StopReason::candidates_exhausted);
        return;
    }
    std::optional<std::uint8_t> label;
    if (setup_.strategy == StrategyKind::human_replay)
    {
        for (const auto& p : setup_.replay->prompts)
            if (p.location == *q)
            {
                label = p.label;
                break;
            }
    }
    else
    {
        label = annotator.label(*q);
    }
    if (!label)
    {
        stop(StopReason::annotator_ended);
        return;
    }
    apply({*q, *label});
}

Trajectory run_session(const Backbone& backbone, const Image& image, const std::optional<BinaryMask>& gt,
                       Annotator& annotator, const SessionSetup& setup)
{
    Session session(backbone, image, gt, setup);
    while (!session.check_stop())
    {
        session.step(annotator);
        if (session.stopped())
            break;
    }
    return session.trajectory();
}

Trajectory run_matched(const Backbone& backbone, const Image& image, const BinaryMask& gt, StrategyKind strategy,
                       std::shared_ptr<const PosteriorEnsemble> ensemble, std::size_t t_budget, std::uint64_t seed)
{
    if (t_budget < 1)
        throw ContractViolation("matched budget must be >= 1");
    SessionSetup setup;
    setup.strategy = strategy;
    setup.seed = seed;
    setup.stop.budget = static_cast<int>(t_budget);
    setup.suppress_score_rules = true;
    if (scores_from_ensemble(strategy))
        setup.ensemble = std::move(ensemble);
    SimulatedAnnotator annotator(gt);
    return run_session(backbone, image, gt, annotator, setup);
}

std::vector<Trajectory> run_matched_baselines(const Backbone& backbone, const Image& image, const BinaryMask& gt,
                                              const LaplacePosterior& posterior, std::size_t samples,
                                              std::size_t t_budget, std::span<const std::uint64_t> seeds)
{
    if (t_budget < 1)
        throw ContractViolation("matched budget must be >= 1");
    std::vector<Trajectory> out;
    for (std::uint64_t seed : seeds)
    {
        const auto ensemble = session_ensemble(posterior, samples, seed);
        for (StrategyKind kind : kMatchedBaselines)
            out.push_back(run_matched(backbone, image, gt, kind, ensemble, t_budget, seed));
    }
    return out;
}

} // namespace activeprompt
