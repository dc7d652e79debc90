#include "activeprompt/session.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <sstream>

using namespace activeprompt;

namespace
{

const ToyBackbone& backbone()
{
    static const ToyBackbone bb;
    return bb;
}

Scene scene(std::uint64_t seed, SceneProfile profile = SceneProfile::blobs, int size = 32)
{
    SceneSpec spec;
    spec.size = size;
    spec.seed = seed;
    spec.profile = profile;
    return generate_scene(spec);
}

SessionSetup setup_for(StrategyKind kind, std::uint64_t seed, std::size_t k = 8)
{
    SessionSetup s;
    s.strategy = kind;
    s.seed = seed;
    if (uses_ensemble(kind) || kind == StrategyKind::human_replay)
        s.ensemble = session_ensemble(testing_support::random_posterior({4}, 30.0, 5), k, seed);
    return s;
}

// A posterior whose K samples are all the same parameter vector.
std::shared_ptr<const PosteriorEnsemble> collapsed_ensemble(std::size_t k)
{
    const HeadParams p = init_head(32, {4}, 12);
    return std::make_shared<const PosteriorEnsemble>(std::vector<HeadParams>(k, p));
}

} // namespace

TEST_CASE("check_stop examples and precedence")
{
    SessionState s;
    StopConfig cfg;
    s.max_mi = 0.005;
    s.h_total = 10.0;
    s.iteration = 2;
    CHECK(check_stop(s, cfg) == StopReason::max_mi_below_threshold);

    s.max_mi = 0.02;
    s.iteration = 3;
    CHECK_FALSE(check_stop(s, cfg).has_value());

    s.iteration = 15;
    CHECK(check_stop(s, cfg) == StopReason::budget_exhausted);

    // MI first, then entropy, then budget.
    cfg.tau_ent = 20.0;
    CHECK(check_stop(s, cfg) == StopReason::global_entropy_below_threshold);
    s.max_mi = 0.0;
    CHECK(check_stop(s, cfg) == StopReason::max_mi_below_threshold);

    // Without ensemble statistics only the budget applies.
    SessionState plain;
    plain.iteration = 3;
    CHECK_FALSE(check_stop(plain, cfg).has_value());
    plain.iteration = 15;
    CHECK(check_stop(plain, cfg) == StopReason::budget_exhausted);
    CHECK(check_stop(s, cfg, false) == StopReason::budget_exhausted);
}

TEST_CASE("stop config validation")
{
    StopConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.budget = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
    cfg = StopConfig{};
    cfg.tau_mi = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
}

TEST_CASE("stop reason names round trip")
{
    for (auto r : {StopReason::max_mi_below_threshold, StopReason::global_entropy_below_threshold,
                   StopReason::budget_exhausted, StopReason::annotator_ended, StopReason::candidates_exhausted})
        CHECK(parse_stop_reason(to_string(r)) == r);
}

TEST_CASE("identical posterior samples stop BALD before any query")
{
    const Scene sc = scene(1);
    SessionSetup setup;
    setup.strategy = StrategyKind::bald;
    setup.ensemble = collapsed_ensemble(10);
    SimulatedAnnotator annotator(sc.mask);
    const Trajectory t = run_session(backbone(), sc.image, sc.mask, annotator, setup);
    CHECK(t.length() == 0);
    CHECK(t.stop == StopReason::max_mi_below_threshold);

    Session session(backbone(), sc.image, sc.mask, setup);
    CHECK(session.state().max_mi == 0.0);
    // Still zero after a forced step.
    session.apply({{4, 4}, sc.mask(4, 4)});
    CHECK(session.state().max_mi == 0.0);
    for (double v : session.state().current_scores.values.values())
        CHECK(v == 0.0);
}

TEST_CASE("simulated sessions respect the budget, label from gt and stay deterministic")
{
    for (auto kind : {StrategyKind::bald, StrategyKind::entropy, StrategyKind::random, StrategyKind::oracle})
        for (std::uint64_t seed : {0u, 1u})
        {
            const Scene sc = scene(seed + 3, static_cast<SceneProfile>(seed % 3));
            SessionSetup setup = setup_for(kind, seed);
            setup.stop.tau_mi = 0.0;
            SimulatedAnnotator a1(sc.mask), a2(sc.mask);
            const Trajectory t = run_session(backbone(), sc.image, sc.mask, a1, setup);
            CHECK(t.length() <= 15);
            REQUIRE(t.stop.has_value());
            CHECK(t.strategy == kind);
            for (std::size_t i = 0; i < t.records.size(); ++i)
            {
                CHECK(t.records[i].t == i + 1);
                CHECK(t.records[i].label == sc.mask[t.records[i].q]);
                REQUIRE(t.records[i].iou.has_value());
                CHECK(t.records[i].max_mi.has_value() == uses_ensemble(kind));
            }
            CHECK(trajectory_jsonl(t) == trajectory_jsonl(run_session(backbone(), sc.image, sc.mask, a2, setup)));
        }
}

TEST_CASE("budget cap ends long sessions")
{
    const Scene sc = scene(7, SceneProfile::thin);
    SessionSetup setup = setup_for(StrategyKind::random, 3);
    setup.stop.budget = 5;
    SimulatedAnnotator a(sc.mask);
    const Trajectory t = run_session(backbone(), sc.image, sc.mask, a, setup);
    CHECK(t.length() == 5);
    CHECK(t.stop == StopReason::budget_exhausted);
}

TEST_CASE("scores after a step equal a fresh evaluation under the new prompts")
{
    const Scene sc = scene(9);
    const SessionSetup setup = setup_for(StrategyKind::bald, 4);
    Session session(backbone(), sc.image, sc.mask, setup);
    SimulatedAnnotator a(sc.mask);
    for (int i = 0; i < 3 && !session.stopped(); ++i)
    {
        const std::size_t before = session.state().prompts.size();
        session.step(a);
        CHECK(session.state().prompts.size() == before + 1);
        CHECK(session.state().iteration == before + 1);

        const BackboneOutput out = backbone().predict_mask(sc.image, session.state().prompts);
        CHECK(out.mask == session.state().current_mask);
        CHECK(out.features == session.state().features);
        FixedChannelCache cache;
        cache.channels = backbone().fixed_channels();
        const EnsembleScores fresh = ensemble_scores(setup.ensemble->predict(out.features, cache));
        CHECK(fresh.mutual_information == session.state().current_scores);
        CHECK(session.trajectory().records.back().mask_sha256 == mask_digest(out.mask));
    }
}

TEST_CASE("stopped sessions reject further steps; bad prompts are refused")
{
    const Scene sc = scene(10);
    Session session(backbone(), sc.image, sc.mask, setup_for(StrategyKind::random, 1));
    session.apply({{1, 1}, sc.mask(1, 1)});
    CHECK_THROWS_AS(session.apply({{1, 1}, sc.mask(1, 1)}), ContractViolation);
    CHECK_THROWS_AS(session.apply({{40, 1}, 0}), ContractViolation);
    CHECK(session.state().iteration == 1);
    session.stop(StopReason::annotator_ended);
    CHECK(session.stopped());
    CHECK_THROWS_AS(session.apply({{2, 2}, sc.mask(2, 2)}), std::logic_error);
    CHECK(session.stop_reason() == StopReason::annotator_ended);
}

TEST_CASE("oracle with nothing to fix stops immediately")
{
    const Image image(16, 16, 0.5);
    const BinaryMask gt(16, 16, 0);
    SessionSetup setup;
    setup.strategy = StrategyKind::oracle;
    SimulatedAnnotator a(gt);
    const Trajectory t = run_session(backbone(), image, gt, a, setup);
    CHECK(t.length() == 0);
    CHECK(t.stop == StopReason::candidates_exhausted);
}

TEST_CASE("matched baselines run exactly T iterations")
{
    const Scene sc = scene(11, SceneProfile::rings);
    const LaplacePosterior post = testing_support::random_posterior({4}, 30.0, 2);
    const std::vector<std::uint64_t> seeds{0, 1};
    const auto runs = run_matched_baselines(backbone(), sc.image, sc.mask, post, 6, 7, seeds);
    REQUIRE(runs.size() == 6);
    std::vector<StrategyKind> kinds;
    for (const auto& t : runs)
    {
        kinds.push_back(t.strategy);
        if (t.stop != StopReason::candidates_exhausted)
            CHECK(t.length() == 7);
        CHECK(t.length() <= 7);
    }
    CHECK(std::count(kinds.begin(), kinds.end(), StrategyKind::entropy) == 2);
    CHECK(std::count(kinds.begin(), kinds.end(), StrategyKind::random) == 2);
    CHECK(std::count(kinds.begin(), kinds.end(), StrategyKind::oracle) == 2);
    CHECK(std::count(kinds.begin(), kinds.end(), StrategyKind::bald) == 0);
    CHECK_THROWS_AS(run_matched_baselines(backbone(), sc.image, sc.mask, post, 6, 0, seeds), ContractViolation);
}

TEST_CASE("oracle that runs out of errors ends early")
{
    // One inclusion click inside a flat disk recovers the whole disk.
    const Scene sc = testing_support::disk_scene(32, 16, 16, 6.0);
    const Trajectory t = run_matched(backbone(), sc.image, sc.mask, StrategyKind::oracle, nullptr, 7, 0);
    CHECK(t.length() < 7);
    CHECK(t.stop == StopReason::candidates_exhausted);
    REQUIRE(!t.records.empty());
    CHECK(*t.records.back().iou == 1.0);
}

TEST_CASE("human replay follows the log and ends with it")
{
    const Scene sc = scene(12);
    auto log = std::make_shared<ReplayLog>();
    log->prompts = {{{3, 3}, sc.mask(3, 3)}, {{20, 9}, sc.mask(20, 9)}};
    SessionSetup setup = setup_for(StrategyKind::human_replay, 0);
    setup.replay = log;
    setup.stop.tau_mi = 0.0;
    SimulatedAnnotator a(sc.mask);
    const Trajectory t = run_session(backbone(), sc.image, sc.mask, a, setup);
    REQUIRE(t.length() == 2);
    CHECK(t.records[0].q == Pixel{3, 3});
    CHECK(t.records[1].q == Pixel{20, 9});
    CHECK(t.stop == StopReason::annotator_ended);
}

TEST_CASE("trajectory log format and round trip")
{
    const Scene sc = scene(13);
    SessionSetup setup = setup_for(StrategyKind::bald, 7);
    setup.stop.tau_mi = 0.0;
    setup.stop.budget = 3;
    SimulatedAnnotator a(sc.mask);
    const Trajectory t = run_session(backbone(), sc.image, sc.mask, a, setup);
    REQUIRE(t.length() == 3);

    const std::string text = trajectory_jsonl(t);
    std::istringstream lines(text);
    std::string line;
    std::vector<nlohmann::json> parsed;
    while (std::getline(lines, line))
        parsed.push_back(nlohmann::json::parse(line));
    REQUIRE(parsed.size() == 4);
    CHECK(parsed[0]["t"] == 1);
    CHECK(parsed[0]["q"] == nlohmann::json::array({t.records[0].q.row, t.records[0].q.col}));
    CHECK(parsed[0]["mask_sha256"].get<std::string>().size() == 64);
    CHECK(std::abs(parsed[1]["max_mi"].get<double>() - *t.records[1].max_mi) <= 1e-8 * *t.records[1].max_mi);
    CHECK(parsed[3]["stop"] == "budget_exhausted");
    CHECK(parsed[3]["strategy"] == "bald");
    CHECK(parsed[3]["seed"] == 7);

    // Absent values print as null.
    TrajectoryRecord r;
    r.t = 1;
    r.mask_sha256 = std::string(64, '0');
    const auto j = nlohmann::json::parse(format_record(r));
    CHECK(j["iou"].is_null());
    CHECK(j["max_mi"].is_null());

    testing_support::TempDir dir("session");
    save_trajectory(dir.path() / "t.jsonl", t);
    const Trajectory back = read_trajectory(dir.path() / "t.jsonl");
    CHECK(back.stop == t.stop);
    CHECK(back.strategy == t.strategy);
    CHECK(trajectory_jsonl(back) == text);
    CHECK(read_replay_log(dir.path() / "t.jsonl").prompts.size() == 3);
}

TEST_CASE("session ensembles are seeded")
{
    const auto post = testing_support::random_posterior({4}, 30.0, 5);
    CHECK(session_ensemble(post, 4, 1)->samples() == session_ensemble(post, 4, 1)->samples());
    CHECK_FALSE(session_ensemble(post, 4, 1)->samples() == session_ensemble(post, 4, 2)->samples());
    CHECK(session_ensemble(post, 4, 1)->k() == 4);
}
