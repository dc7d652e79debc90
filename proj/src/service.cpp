// service.cpp

#include "activeprompt/service.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

namespace activeprompt
{

using ojson = nlohmann::ordered_json;

ApiResponse api_error(int status, const std::string& code, const std::string& message)
{
    ojson body;
    body["http_status"] = status;
    body["error_code"] = code;
    body["message"] = message;
    return {status, body.dump(), "application/json"};
}

namespace
{

ApiResponse json_response(int status, const ojson& body)
{
    return {status, body.dump(), "application/json"};
}

ApiResponse not_found(const std::string& what)
{
    return api_error(404, "not_found", what);
}

std::string utc_timestamp()
{
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

ojson optional_json(std::optional<double> v)
{
    return v ? ojson(*v) : ojson(nullptr);
}

StopConfig parse_stop_config(const ojson& j)
{
    StopConfig config;
    if (j.is_null())
        return config;
    if (!j.is_object())
        throw ContractViolation("stop_config must be an object");
    if (j.contains("tau_mi"))
        config.tau_mi = j.at("tau_mi").get<double>();
    if (j.contains("tau_ent") && !j.at("tau_ent").is_null())
        config.tau_ent = j.at("tau_ent").get<double>();
    if (j.contains("budget"))
        config.budget = j.at("budget").get<int>();
    config.validate();
    return config;
}

Image parse_inline_image(const ojson& j)
{
    const int h = j.at("height").get<int>();
    const int w = j.at("width").get<int>();
    auto values = j.at("values").get<std::vector<double>>();
    return Image(h, w, std::move(values));
}

} // namespace

SessionService::SessionService(const Backbone& backbone, ServiceConfig config)
    : backbone_(&backbone), config_(std::move(config)), id_rng_(std::random_device{}())
{
    if (config_.samples < 1)
        throw ContractViolation("service needs at least one posterior sample");
    manifest_ = read_manifest(config_.data_dir);
    LaplacePosterior posterior = load_posterior(config_.posterior_path);
    posteriors_[config_.posterior_path.stem().string()] = posterior;
    posteriors_["default"] = std::move(posterior);
    if (!config_.log_dir.empty())
        std::filesystem::create_directories(config_.log_dir);
}

std::size_t SessionService::session_count() const
{
    std::shared_lock lock(sessions_guard_);
    return sessions_.size();
}

std::shared_ptr<SessionService::Entry> SessionService::find(const std::string& id) const
{
    std::shared_lock lock(sessions_guard_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

std::string SessionService::new_id()
{
    std::lock_guard lock(id_guard_);
    const std::uint64_t hi = id_rng_();
    const std::uint64_t lo = id_rng_();
    // Version 4, variant 10xx.
    const std::uint64_t a = (hi & 0xFFFFFFFFFFFF0FFFULL) | 0x0000000000004000ULL;
    const std::uint64_t b = (lo & 0x3FFFFFFFFFFFFFFFULL) | 0x8000000000000000ULL;
    char buf[40];
    std::snprintf(buf, sizeof buf, "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(a >> 32),
                  static_cast<unsigned>((a >> 16) & 0xFFFF), static_cast<unsigned>(a & 0xFFFF),
                  static_cast<unsigned>(b >> 48), static_cast<unsigned long long>(b & 0xFFFFFFFFFFFFULL));
    return buf;
}

ojson SessionService::suggestion_payload(const Entry& entry, Pixel q) const
{
    const SessionState& state = entry.session->state();
    ojson out;
    out["q"] = {q.row, q.col};
    out["max_mi"] = optional_json(state.max_mi);
    out["h_total"] = optional_json(state.h_total);
    out["heatmap_url"] = "/sessions/" + entry.id + "/heatmap.png";
    return out;
}

ojson SessionService::advance(Entry& entry)
{
    Session& session = *entry.session;
    if (!session.stopped())
        session.check_stop();
    if (!session.stopped())
    {
        if (const auto q = session.suggestion())
            return suggestion_payload(entry, *q);
        session.stop(session.setup().strategy == StrategyKind::human_replay ? StopReason::annotator_ended
                                                                            : StopReason::candidates_exhausted);
    }
    persist(entry);
    return nullptr;
}

void SessionService::persist(Entry& entry)
{
    if (entry.persisted || config_.log_dir.empty() || !entry.session->stopped())
        return;
    const std::string stem = (entry.item_id.empty() ? std::string("inline") : entry.item_id) + "__" + entry.id;
    save_trajectory(config_.log_dir / (stem + ".jsonl"), entry.session->trajectory());
    entry.persisted = true;
}

ApiResponse SessionService::create_session(const std::string& body)
{
    ojson request;
    try
    {
        request = ojson::parse(body);
    }
    catch (const std::exception& e)
    {
        return api_error(400, "malformed_body", e.what());
    }
    if (!request.is_object())
        return api_error(400, "malformed_body", "request body must be a JSON object");

    auto entry = std::make_shared<Entry>();
    try
    {
        const std::string posterior_id = request.value("posterior_id", std::string("default"));
        const auto post = posteriors_.find(posterior_id);
        if (post == posteriors_.end())
            return not_found("unknown posterior '" + posterior_id + "'");

        Image image;
        std::optional<BinaryMask> gt;
        if (request.contains("dataset_item_id"))
        {
            const std::string item_id = request.at("dataset_item_id").get<std::string>();
            const auto it = std::find_if(manifest_.begin(), manifest_.end(),
                                         [&](const ManifestItem& m) { return m.id == item_id; });
            if (it == manifest_.end())
                return not_found("unknown dataset item '" + item_id + "'");
            LoadedItem loaded = load_item(config_.data_dir, *it);
            image = std::move(loaded.image);
            gt = std::move(loaded.mask);
            entry->item_id = item_id;
        }
        else if (request.contains("image"))
        {
            image = parse_inline_image(request.at("image"));
        }
        else
        {
            return api_error(400, "malformed_body", "either dataset_item_id or image is required");
        }

        const std::string mode = request.value("mode", std::string("simulated"));
        if (mode == "simulated")
            entry->mode = SessionMode::simulated;
        else if (mode == "human")
            entry->mode = SessionMode::human;
        else
            return api_error(400, "malformed_body", "mode must be 'simulated' or 'human'");
        if (entry->mode == SessionMode::simulated && !gt)
            return api_error(400, "malformed_body", "simulated sessions need a dataset item with a mask");

        SessionSetup setup;
        setup.strategy = parse_strategy(request.value("strategy", std::string("bald")));
        if (setup.strategy == StrategyKind::human_replay)
            return api_error(400, "malformed_body", "human_replay is an offline strategy");
        setup.stop = parse_stop_config(request.contains("stop_config") ? request.at("stop_config") : ojson());
        setup.seed = request.value("seed", std::uint64_t{0});
        const std::size_t samples = request.value("samples", config_.samples);
        if (samples < 1)
            return api_error(400, "malformed_body", "samples must be >= 1");
        if (uses_ensemble(setup.strategy))
            setup.ensemble = session_ensemble(post->second, samples, setup.seed);

        entry->session = std::make_unique<Session>(*backbone_, std::move(image), std::move(gt), std::move(setup));
    }
    catch (const nlohmann::json::exception& e)
    {
        return api_error(400, "malformed_body", e.what());
    }
    catch (const ContractViolation& e)
    {
        return api_error(400, "invalid_request", e.what());
    }

    entry->id = new_id();
    entry->created_at = utc_timestamp();
    std::unique_lock entry_lock(entry->guard);
    const ojson suggestion = advance(*entry);

    ojson out;
    out["session_id"] = entry->id;
    out["created_at"] = entry->created_at;
    out["mode"] = entry->mode == SessionMode::simulated ? "simulated" : "human";
    out["strategy"] = std::string(to_string(entry->session->setup().strategy));
    out["height"] = entry->session->state().image.height();
    out["width"] = entry->session->state().image.width();
    out["gt_available"] = entry->session->gt().has_value();
    out["initial_mask_digest"] = mask_digest(entry->session->state().current_mask);
    out["suggestion"] = suggestion;
    out["heatmap_url"] = "/sessions/" + entry->id + "/heatmap.png";
    out["stop_reason"] = entry->session->stopped() ? ojson(std::string(to_string(*entry->session->stop_reason())))
                                                   : ojson(nullptr);
    entry_lock.unlock();

    std::unique_lock lock(sessions_guard_);
    sessions_[entry->id] = entry;
    return json_response(201, out);
}

ApiResponse SessionService::get_suggestion(const std::string& id)
{
    const auto entry = find(id);
    if (!entry)
        return not_found("unknown session '" + id + "'");
    std::shared_lock lock(entry->guard);
    if (entry->session->stopped())
        return api_error(409, "session_stopped",
                         "session stopped: " + std::string(to_string(*entry->session->stop_reason())));
    const auto q = entry->session->suggestion();
    if (!q)
        return api_error(409, "session_stopped", "no candidate location remains");
    return json_response(200, suggestion_payload(*entry, *q));
}

ApiResponse SessionService::post_label(const std::string& id, const std::string& body)
{
    const auto entry = find(id);
    if (!entry)
        return not_found("unknown session '" + id + "'");

    ojson request;
    try
    {
        request = ojson::parse(body);
    }
    catch (const std::exception& e)
    {
        return api_error(400, "malformed_body", e.what());
    }

    std::unique_lock lock(entry->guard);
    Session& session = *entry->session;
    if (session.stopped())
        return api_error(409, "session_stopped",
                         "session stopped: " + std::string(to_string(*session.stop_reason())));
    Prompt prompt;
    try
    {
        const auto& q = request.at("q");
        if (!q.is_array() || q.size() != 2)
            return api_error(400, "malformed_body", "q must be [row, col]");
        prompt.location = {q.at(0).get<int>(), q.at(1).get<int>()};
        if (request.contains("t") && request.at("t").get<std::size_t>() != session.state().iteration + 1)
            return api_error(409, "stale_cycle", "label targets iteration " + request.at("t").dump() +
                                                     " but the session is at " +
                                                     std::to_string(session.state().iteration + 1));
        if (!session.state().image.in_bounds(prompt.location))
            return api_error(400, "out_of_bounds", "q lies outside the image");
        if (session.state().prompts.contains(prompt.location))
            return api_error(400, "duplicate_location", "q has already been labelled");

        std::optional<int> supplied;
        if (request.contains("label") && !request.at("label").is_null())
        {
            supplied = request.at("label").get<int>();
            if (*supplied != 0 && *supplied != 1)
                return api_error(400, "malformed_body", "label must be 0 or 1");
        }
        if (entry->mode == SessionMode::simulated)
        {
            const std::uint8_t truth = (*session.gt())[prompt.location] != 0 ? 1 : 0;
            if (supplied && *supplied != truth)
                return api_error(400, "label_mismatch", "simulated sessions answer from the ground-truth mask");
            prompt.label = truth;
        }
        else
        {
            if (!supplied)
                return api_error(400, "malformed_body", "human sessions need a label");
            prompt.label = static_cast<std::uint8_t>(*supplied);
        }
    }
    catch (const nlohmann::json::exception& e)
    {
        return api_error(400, "malformed_body", e.what());
    }

    const TrajectoryRecord record = session.apply(prompt);
    const ojson next = advance(*entry);

    ojson out;
    out["t"] = record.t;
    out["mask_digest"] = record.mask_sha256;
    out["iou"] = optional_json(record.iou);
    out["max_mi"] = optional_json(record.max_mi);
    out["h_total"] = optional_json(record.h_total);
    out["next_suggestion"] = next;
    out["stop_reason"] = session.stopped() ? ojson(std::string(to_string(*session.stop_reason()))) : ojson(nullptr);
    return json_response(200, out);
}

ApiResponse SessionService::stop_session(const std::string& id)
{
    const auto entry = find(id);
    if (!entry)
        return not_found("unknown session '" + id + "'");
    std::unique_lock lock(entry->guard);
    if (entry->session->stopped())
        return api_error(409, "session_stopped",
                         "session stopped: " + std::string(to_string(*entry->session->stop_reason())));
    entry->session->stop(StopReason::annotator_ended);
    persist(*entry);
    ojson out;
    out["stop_reason"] = std::string(to_string(StopReason::annotator_ended));
    out["iterations"] = entry->session->state().iteration;
    return json_response(200, out);
}

ApiResponse SessionService::get_trajectory(const std::string& id, const std::string& format)
{
    const auto entry = find(id);
    if (!entry)
        return not_found("unknown session '" + id + "'");
    std::shared_lock lock(entry->guard);
    const Trajectory& t = entry->session->trajectory();
    if (format == "jsonl")
        return {200, trajectory_jsonl(t), "application/x-ndjson"};
    if (format != "json")
        return api_error(400, "malformed_request", "format must be json or jsonl");
    ojson out;
    out["session_id"] = entry->id;
    out["strategy"] = std::string(to_string(t.strategy));
    out["seed"] = t.seed;
    ojson records = ojson::array();
    for (const auto& r : t.records)
        records.push_back(ojson::parse(format_record(r)));
    out["records"] = std::move(records);
    out["stop"] = t.stop ? ojson(std::string(to_string(*t.stop))) : ojson(nullptr);
    return json_response(200, out);
}

ApiResponse SessionService::get_heatmap(const std::string& id)
{
    const auto entry = find(id);
    if (!entry)
        return not_found("unknown session '" + id + "'");
    std::shared_lock lock(entry->guard);
    const auto png = encode_png(render_heatmap(entry->session->state().current_scores));
    return {200, std::string(png.begin(), png.end()), "image/png"};
}

ApiResponse SessionService::get_scores(const std::string& id)
{
    const auto entry = find(id);
    if (!entry)
        return not_found("unknown session '" + id + "'");
    std::shared_lock lock(entry->guard);
    const ScoreMap& scores = entry->session->state().current_scores;
    ojson out = ojson::parse(score_header_json(scores));
    std::vector<float> values;
    values.reserve(scores.values.size());
    for (double v : scores.values.values())
        values.push_back(static_cast<float>(v));
    out["values"] = values;
    return json_response(200, out);
}

ApiResponse SessionService::list_datasets() const
{
    std::map<std::string, std::size_t> counts;
    for (const auto& m : manifest_)
        ++counts[m.dataset];
    ojson list = ojson::array();
    for (const auto& [name, n] : counts)
        list.push_back({{"id", name}, {"items", n}});
    ojson out;
    out["datasets"] = std::move(list);
    return json_response(200, out);
}

ApiResponse SessionService::list_items(const std::string& dataset) const
{
    ojson items = ojson::array();
    for (const auto& m : manifest_)
        if (m.dataset == dataset)
            items.push_back({{"id", m.id}, {"split", m.split}, {"image_path", m.image_path}, {"mask_path", m.mask_path}});
    if (items.empty())
        return not_found("unknown dataset '" + dataset + "'");
    ojson out;
    out["dataset"] = dataset;
    out["items"] = std::move(items);
    return json_response(200, out);
}

void SessionService::mount(httplib::Server& server)
{
    auto reply = [](httplib::Response& res, const ApiResponse& r) {
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    auto guarded = [reply](httplib::Response& res, auto&& fn) {
        try
        {
            reply(res, fn());
        }
        catch (const std::exception& e)
        {
            reply(res, api_error(500, "internal_error", e.what()));
        }
    };

    server.Post("/sessions", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return create_session(req.body); });
    });
    server.Get(R"(/sessions/([^/]+)/suggestion)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return get_suggestion(req.matches[1]); });
    });
    server.Post(R"(/sessions/([^/]+)/label)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return post_label(req.matches[1], req.body); });
    });
    server.Post(R"(/sessions/([^/]+)/stop)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return stop_session(req.matches[1]); });
    });
    server.Get(R"(/sessions/([^/]+)/trajectory)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
        guarded(res, [&] { return get_trajectory(req.matches[1], format); });
    });
    server.Get(R"(/sessions/([^/]+)/heatmap\.png)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return get_heatmap(req.matches[1]); });
    });
    server.Get(R"(/sessions/([^/]+)/scores)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return get_scores(req.matches[1]); });
    });
    server.Get("/datasets", [this, guarded](const httplib::Request&, httplib::Response& res) {
        guarded(res, [&] { return list_datasets(); });
    });
    server.Get(R"(/datasets/([^/]+)/items)", [this, guarded](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return list_items(req.matches[1]); });
    });
}

} // namespace activeprompt
