// session.hpp
//
// The active-prompting loop: one session owns an image, its prompt history
// and the scores conditioned on that history. Steps are serialised; the
// caller provides locking when a session is shared between threads.

#pragma once

#include "activeprompt/acquisition.hpp"
#include "activeprompt/backbone.hpp"
#include "activeprompt/laplace.hpp"
#include "activeprompt/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace activeprompt
{

enum class StopReason
{
    max_mi_below_threshold,
    global_entropy_below_threshold,
    budget_exhausted,
    annotator_ended,
    candidates_exhausted,
};

std::string_view to_string(StopReason reason);
StopReason parse_stop_reason(std::string_view name);

struct StopConfig
{
    double tau_mi = 0.01;
    double tau_ent = std::numeric_limits<double>::infinity(); ///< infinity = rule disabled
    int budget = 15;

    void validate() const;
};

inline constexpr int kDefaultSamples = 30;

struct SessionState
{
    Image image;
    PromptSet prompts;
    BinaryMask current_mask;
    FeatureMap features;
    ScoreMap current_scores;
    std::size_t iteration = 0;
    /// Present when the strategy evaluated the posterior ensemble.
    std::optional<double> h_total;
    std::optional<double> max_mi;
};

/// One line of the trajectory log.
struct TrajectoryRecord
{
    std::size_t t = 0;
    Pixel q;
    std::uint8_t label = 0;
    std::optional<double> iou;
    std::optional<double> max_mi;
    std::optional<double> h_total;
    std::string mask_sha256;

    bool operator==(const TrajectoryRecord&) const = default;
};

struct Trajectory
{
    std::vector<TrajectoryRecord> records;
    std::optional<StopReason> stop;
    StrategyKind strategy = StrategyKind::bald;
    std::uint64_t seed = 0;
    /// IoU of the empty-prompt mask against gt; not part of the log.
    std::optional<double> iou0;

    std::size_t length() const { return records.size(); }
};

/// JSON Lines log with 9-significant-digit floats and null for absent values.
std::string format_record(const TrajectoryRecord& record);
std::string format_stop_line(const Trajectory& trajectory);
void write_trajectory(std::ostream& out, const Trajectory& trajectory);
std::string trajectory_jsonl(const Trajectory& trajectory);
void save_trajectory(const std::filesystem::path& path, const Trajectory& trajectory);
Trajectory read_trajectory(const std::filesystem::path& path);

/// Answers queries. Returning nullopt ends the session (annotator_ended).
class Annotator
{
public:
    virtual ~Annotator() = default;
    virtual std::optional<std::uint8_t> label(Pixel q) = 0;
};

/// Reads the label from the ground-truth mask.
class SimulatedAnnotator final : public Annotator
{
public:
    explicit SimulatedAnnotator(BinaryMask gt) : gt_(std::move(gt)) {}
    std::optional<std::uint8_t> label(Pixel q) override;

private:
    BinaryMask gt_;
};

/// Recorded human prompt sequence for the human_replay strategy.
struct ReplayLog
{
    std::vector<Prompt> prompts;
};

/// Reads the prompts of a trajectory log (stop line ignored).
ReplayLog read_replay_log(const std::filesystem::path& path);

/// Everything a session needs besides the image.
struct SessionSetup
{
    StrategyKind strategy = StrategyKind::bald;
    StopConfig stop;
    std::uint64_t seed = 0;
    CandidateSet candidates;
    /// Posterior samples; required for bald, entropy and human_replay.
    std::shared_ptr<const PosteriorEnsemble> ensemble;
    /// Required for human_replay.
    std::shared_ptr<const ReplayLog> replay;
    /// When set, only candidate exhaustion (and the budget) ends the session.
    bool suppress_score_rules = false;
};

/// Draws the K posterior samples a session with `seed` uses.
std::shared_ptr<const PosteriorEnsemble> session_ensemble(const LaplacePosterior& posterior, std::size_t k,
                                                          std::uint64_t seed);

class Session
{
public:
    /// Builds S_0 = {} and its scores. gt is optional (human sessions).
    Session(const Backbone& backbone, Image image, std::optional<BinaryMask> gt, SessionSetup setup);

    const SessionState& state() const { return state_; }
    const Trajectory& trajectory() const { return trajectory_; }
    const SessionSetup& setup() const { return setup_; }
    const std::optional<BinaryMask>& gt() const { return gt_; }
    bool stopped() const { return trajectory_.stop.has_value(); }
    std::optional<StopReason> stop_reason() const { return trajectory_.stop; }

    /// Next query location under the session's strategy, or nullopt when no
    /// candidate remains (for human_replay: when the log is used up). Does not
    /// mutate the session.
    std::optional<Pixel> suggestion() const;

    /// Appends a labelled prompt, recomputes mask and scores under the new
    /// prompt set and records a trajectory line. Throws ContractViolation for
    /// an out-of-bounds or repeated location, std::logic_error once stopped.
    const TrajectoryRecord& apply(Prompt prompt);

    /// Evaluates the stop rules on the current state and records the first
    /// that fires.
    std::optional<StopReason> check_stop();

    /// Ends the session with an externally determined reason.
    void stop(StopReason reason);

    /// One iteration: suggest, ask the annotator, apply. Records the stop
    /// reason itself on exhaustion or when the annotator gives up.
    void step(Annotator& annotator);

private:
    void refresh();

    const Backbone* backbone_;
    SessionSetup setup_;
    std::optional<BinaryMask> gt_;
    SessionState state_;
    Trajectory trajectory_;
    FixedChannelCache ensemble_cache_;
};

/// Stop rules in order: max-MI, global entropy, budget. Rules that need the
/// ensemble are skipped when the state carries no ensemble statistics.
std::optional<StopReason> check_stop(const SessionState& state, const StopConfig& config,
                                     bool score_rules = true);

/// Full simulated (or replayed) session from S_0 = {}.
Trajectory run_session(const Backbone& backbone, const Image& image, const std::optional<BinaryMask>& gt,
                       Annotator& annotator, const SessionSetup& setup);

inline constexpr std::array kMatchedBaselines = {StrategyKind::entropy, StrategyKind::random, StrategyKind::oracle};

/// entropy, random and oracle for exactly t_budget iterations each (unless
/// candidates run out), one set per seed. Throws ContractViolation when
/// t_budget < 1.
std::vector<Trajectory> run_matched_baselines(const Backbone& backbone, const Image& image, const BinaryMask& gt,
                                              const LaplacePosterior& posterior, std::size_t samples,
                                              std::size_t t_budget, std::span<const std::uint64_t> seeds);

/// Single matched run of one strategy at a fixed iteration count.
Trajectory run_matched(const Backbone& backbone, const Image& image, const BinaryMask& gt, StrategyKind strategy,
                       std::shared_ptr<const PosteriorEnsemble> ensemble, std::size_t t_budget, std::uint64_t seed);

} // namespace activeprompt
