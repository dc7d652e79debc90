#include "activeprompt/service.hpp"

#include "test_support.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <thread>

using namespace activeprompt;
using json = nlohmann::json;

namespace
{

struct Fixture
{
    testing_support::TempDir dir{"service"};
    ToyBackbone backbone;
    std::vector<ManifestItem> manifest;
    std::filesystem::path posterior_path;
    std::unique_ptr<SessionService> service;

    Fixture()
    {
        manifest = generate_dataset(dir.path() / "data", {SceneProfile::blobs, SceneProfile::rings}, 2, 5, 24);
        posterior_path = dir.path() / "toy.blp";
        save_posterior(posterior_path, testing_support::random_posterior({4}, 30.0, 3));
        ServiceConfig cfg;
        cfg.data_dir = dir.path() / "data";
        cfg.posterior_path = posterior_path;
        cfg.log_dir = dir.path() / "logs";
        cfg.samples = 6;
        service = std::make_unique<SessionService>(backbone, cfg);
    }

    json create(const json& body, int expect = 201)
    {
        const ApiResponse r = service->create_session(body.dump());
        CHECK(r.status == expect);
        return json::parse(r.body);
    }
};

std::vector<int> q_of(const json& suggestion)
{
    return suggestion.at("q").get<std::vector<int>>();
}

// In-process run with the settings a simulated HTTP session uses.
Trajectory in_process(const Fixture& f, const std::string& item_id, StrategyKind kind, std::uint64_t seed,
                      const StopConfig& stop, std::size_t samples)
{
    const auto it = std::find_if(f.manifest.begin(), f.manifest.end(),
                                 [&](const ManifestItem& m) { return m.id == item_id; });
    const LoadedItem item = load_item(f.dir.path() / "data", *it);
    SessionSetup setup;
    setup.strategy = kind;
    setup.seed = seed;
    setup.stop = stop;
    if (uses_ensemble(kind))
        setup.ensemble = session_ensemble(load_posterior(f.posterior_path), samples, seed);
    SimulatedAnnotator annotator(item.mask);
    return run_session(f.backbone, item.image, item.mask, annotator, setup);
}

} // namespace

TEST_CASE("create session responses")
{
    Fixture f;
    const std::string item = f.manifest.front().id;
    const json ok = f.create({{"dataset_item_id", item}, {"strategy", "bald"}, {"seed", 1}});
    CHECK(ok["session_id"].is_string());
    CHECK(ok["stop_reason"].is_null());
    REQUIRE(ok["suggestion"].is_object());
    CHECK(q_of(ok["suggestion"]).size() == 2);
    CHECK(ok["suggestion"]["max_mi"].get<double>() >= 0.0);
    CHECK(f.service->session_count() == 1);

    CHECK(f.create({{"dataset_item_id", "nope"}}, 404)["error_code"] == "not_found");
    CHECK(f.create({{"dataset_item_id", item}, {"posterior_id", "other"}}, 404)["http_status"] == 404);
    CHECK(f.create({{"dataset_item_id", item}, {"strategy", "human_replay"}}, 400)["error_code"] == "malformed_body");
    CHECK(f.create({{"dataset_item_id", item}, {"strategy", "greedy"}}, 400)["error_code"] == "invalid_request");
    CHECK(f.create({{"strategy", "bald"}}, 400)["error_code"] == "malformed_body");
    CHECK(f.create({{"dataset_item_id", item}, {"stop_config", {{"budget", 0}}}}, 400)["error_code"] ==
          "invalid_request");
    const ApiResponse garbage = f.service->create_session("{not json");
    CHECK(garbage.status == 400);
    CHECK(json::parse(garbage.body)["error_code"] == "malformed_body");
    // Simulated sessions need ground truth.
    const json inline_image = {{"height", 8}, {"width", 8}, {"values", std::vector<double>(64, 0.5)}};
    CHECK(f.create({{"image", inline_image}}, 400)["error_code"] == "malformed_body");
    CHECK(f.create({{"image", inline_image}, {"mode", "human"}, {"strategy", "random"}})["session_id"].is_string());
}

TEST_CASE("suggestion is idempotent and unknown ids are 404")
{
    Fixture f;
    const json s = f.create({{"dataset_item_id", f.manifest[1].id}, {"strategy", "entropy"}, {"seed", 2}});
    const std::string id = s["session_id"];
    const ApiResponse a = f.service->get_suggestion(id);
    const ApiResponse b = f.service->get_suggestion(id);
    CHECK(a.status == 200);
    CHECK(a.body == b.body);
    CHECK(json::parse(a.body)["q"] == s["suggestion"]["q"]);

    CHECK(f.service->get_suggestion("missing").status == 404);
    CHECK(f.service->post_label("missing", "{}").status == 404);
    CHECK(f.service->stop_session("missing").status == 404);
    CHECK(f.service->get_trajectory("missing").status == 404);
    CHECK(f.service->get_heatmap("missing").status == 404);
    CHECK(f.service->get_scores("missing").status == 404);
}

TEST_CASE("label validation codes")
{
    Fixture f;
    const std::string item = f.manifest.front().id;
    const json s = f.create({{"dataset_item_id", item}, {"strategy", "random"}, {"seed", 0}});
    const std::string id = s["session_id"];
    const auto q = q_of(s["suggestion"]);

    auto post = [&](const json& body) {
        const ApiResponse r = f.service->post_label(id, body.dump());
        return std::pair{r.status, json::parse(r.body)};
    };
    CHECK(post({{"q", {100, 0}}}).second["error_code"] == "out_of_bounds");
    CHECK(post({{"q", {1}}}).second["error_code"] == "malformed_body");
    CHECK(post({{"q", q}, {"label", 7}}).first == 400);
    CHECK(post({{"q", q}, {"t", 5}}).second["error_code"] == "stale_cycle");
    CHECK(post({{"q", q}, {"t", 5}}).first == 409);

    const LoadedItem loaded = load_item(f.dir.path() / "data", f.manifest.front());
    const int truth = loaded.mask(q[0], q[1]);
    CHECK(post({{"q", q}, {"label", 1 - truth}}).second["error_code"] == "label_mismatch");

    const auto [status, body] = post({{"q", q}, {"label", truth}, {"t", 1}});
    CHECK(status == 200);
    CHECK(body["t"] == 1);
    CHECK(body["mask_digest"].get<std::string>().size() == 64);
    CHECK(body["iou"].is_number());
    CHECK(body["max_mi"].is_null()); // random strategy: no ensemble statistics
    CHECK(post({{"q", q}}).second["error_code"] == "duplicate_location");

    const ApiResponse stopped = f.service->stop_session(id);
    CHECK(stopped.status == 200);
    CHECK(json::parse(stopped.body)["stop_reason"] == "annotator_ended");
    CHECK(json::parse(stopped.body)["iterations"] == 1);
    CHECK(f.service->stop_session(id).status == 409);
    CHECK(post({{"q", {0, 0}}}).second["error_code"] == "session_stopped");
    CHECK(f.service->get_suggestion(id).status == 409);

    // The finished session was written to the log directory.
    std::size_t logs = 0;
    for (const auto& e : std::filesystem::directory_iterator(f.dir.path() / "logs"))
        logs += e.path().filename().string().starts_with(item + "__");
    CHECK(logs == 1);
}

TEST_CASE("driving a session stops at the budget and matches run_session")
{
    Fixture f;
    const std::string item = f.manifest[2].id;
    const json s = f.create({{"dataset_item_id", item},
                             {"strategy", "bald"},
                             {"seed", 4},
                             {"samples", 5},
                             {"stop_config", {{"tau_mi", 0.0}, {"budget", 15}}}});
    const std::string id = s["session_id"];
    json next = s["suggestion"];
    int steps = 0;
    std::string reason;
    while (!next.is_null())
    {
        const ApiResponse r = f.service->post_label(id, json{{"q", next["q"]}}.dump());
        REQUIRE(r.status == 200);
        const json body = json::parse(r.body);
        ++steps;
        next = body["next_suggestion"];
        if (!body["stop_reason"].is_null())
            reason = body["stop_reason"];
    }
    CHECK(steps <= 15);
    CHECK(reason == "budget_exhausted");
    CHECK(steps == 15);

    StopConfig stop;
    stop.tau_mi = 0.0;
    const Trajectory local = in_process(f, item, StrategyKind::bald, 4, stop, 5);
    const ApiResponse jsonl = f.service->get_trajectory(id, "jsonl");
    CHECK(jsonl.body == trajectory_jsonl(local));

    const json doc = json::parse(f.service->get_trajectory(id).body);
    CHECK(doc["records"].size() == 15);
    CHECK(doc["stop"] == "budget_exhausted");
    CHECK(f.service->get_trajectory(id, "xml").status == 400);
}

TEST_CASE("heatmap, scores and dataset browsing")
{
    Fixture f;
    const json s = f.create({{"dataset_item_id", f.manifest[0].id}, {"strategy", "bald"}});
    const std::string id = s["session_id"];
    const ApiResponse png = f.service->get_heatmap(id);
    CHECK(png.status == 200);
    CHECK(png.content_type == "image/png");
    CHECK(png.body.substr(1, 3) == "PNG");

    const json scores = json::parse(f.service->get_scores(id).body);
    CHECK(scores["height"] == 24);
    CHECK(scores["values"].size() == 24 * 24);

    const json ds = json::parse(f.service->list_datasets().body);
    REQUIRE(ds["datasets"].size() == 2);
    CHECK(ds["datasets"][0]["id"] == "blobs");
    CHECK(ds["datasets"][0]["items"] == 2);
    const json items = json::parse(f.service->list_items("rings").body);
    CHECK(items["items"].size() == 2);
    CHECK(f.service->list_items("nope").status == 404);
}

TEST_CASE("human sessions need labels and keep them")
{
    Fixture f;
    const json s = f.create({{"dataset_item_id", f.manifest[0].id}, {"mode", "human"}, {"strategy", "random"}});
    const std::string id = s["session_id"];
    const auto q = q_of(s["suggestion"]);
    CHECK(json::parse(f.service->post_label(id, json{{"q", q}}.dump()).body)["error_code"] == "malformed_body");
    const LoadedItem loaded = load_item(f.dir.path() / "data", f.manifest.front());
    const int wrong = 1 - loaded.mask(q[0], q[1]);
    CHECK(f.service->post_label(id, json{{"q", q}, {"label", wrong}}.dump()).status == 200);
    const json doc = json::parse(f.service->get_trajectory(id).body);
    CHECK(doc["records"][0]["label"] == wrong);
}

TEST_CASE("concurrent labels for one cycle: exactly one wins")
{
    Fixture f;
    const json s = f.create({{"dataset_item_id", f.manifest[0].id}, {"strategy", "random"}, {"seed", 9}});
    const std::string id = s["session_id"];
    const json body = {{"q", s["suggestion"]["q"]}, {"t", 1}};
    std::atomic<int> ok{0}, conflict{0};
    std::vector<std::thread> threads;
    for (int i = 0; i < 8; ++i)
        threads.emplace_back([&] {
            const ApiResponse r = f.service->post_label(id, body.dump());
            if (r.status == 200)
                ++ok;
            else if (r.status == 409)
                ++conflict;
        });
    for (auto& t : threads)
        t.join();
    CHECK(ok == 1);
    CHECK(conflict == 7);
    CHECK(json::parse(f.service->get_trajectory(id).body)["records"].size() == 1);
}

TEST_CASE("HTTP simulated session matches run_session byte for byte")
{
    Fixture f;
    httplib::Server server;
    f.service->mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread loop([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    const std::string item = f.manifest[3].id;
    const json create = {{"dataset_item_id", item}, {"strategy", "bald"}, {"seed", 7}};
    auto res = client.Post("/sessions", create.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 201);
    json body = json::parse(res->body);
    const std::string id = body["session_id"];
    json next = body["suggestion"];
    while (!next.is_null())
    {
        auto r = client.Post("/sessions/" + id + "/label", json{{"q", next["q"]}}.dump(), "application/json");
        REQUIRE(r);
        REQUIRE(r->status == 200);
        next = json::parse(r->body)["next_suggestion"];
    }
    auto traj = client.Get("/sessions/" + id + "/trajectory?format=jsonl");
    REQUIRE(traj);
    const Trajectory local = in_process(f, item, StrategyKind::bald, 7, StopConfig{}, 6);
    CHECK(traj->body == trajectory_jsonl(local));

    auto missing = client.Get("/sessions/nope/suggestion");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    auto png = client.Get("/sessions/" + id + "/heatmap.png");
    REQUIRE(png);
    CHECK(png->get_header_value("Content-Type") == "image/png");

    server.stop();
    loop.join();
}
