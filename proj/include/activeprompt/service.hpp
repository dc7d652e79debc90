// service.hpp
//
// HTTP/JSON front end for sessions. SessionService holds the handlers as
// plain functions from request body to (status, body) so they can be tested
// without a socket; mount() wires them into an httplib server.

#pragma once

#include "activeprompt/backbone.hpp"
#include "activeprompt/laplace.hpp"
#include "activeprompt/session.hpp"
#include "activeprompt/synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

namespace httplib
{
class Server;
}

namespace activeprompt
{

struct ServiceConfig
{
    std::filesystem::path data_dir;
    std::filesystem::path posterior_path;
    /// Finished sessions are written here as <item>__<session>.jsonl; empty
    /// disables persistence.
    std::filesystem::path log_dir;
    std::size_t samples = kDefaultSamples;
};

struct ApiResponse
{
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

/// {"http_status", "error_code", "message"}.
ApiResponse api_error(int status, const std::string& code, const std::string& message);

enum class SessionMode
{
    simulated,
    human,
};

class SessionService
{
public:
    /// Loads the manifest of config.data_dir and the posterior. The posterior
    /// is registered as "default" and under its file stem.
    SessionService(const Backbone& backbone, ServiceConfig config);

    ApiResponse create_session(const std::string& body);
    ApiResponse get_suggestion(const std::string& id);
    ApiResponse post_label(const std::string& id, const std::string& body);
    ApiResponse stop_session(const std::string& id);
    /// format "jsonl" returns the raw log text instead of a JSON document.
    ApiResponse get_trajectory(const std::string& id, const std::string& format = "json");
    ApiResponse get_heatmap(const std::string& id);
    ApiResponse get_scores(const std::string& id);
    ApiResponse list_datasets() const;
    ApiResponse list_items(const std::string& dataset) const;

    void mount(httplib::Server& server);

    std::size_t session_count() const;

private:
    struct Entry
    {
        std::string id;
        std::string item_id;
        std::string created_at;
        SessionMode mode = SessionMode::simulated;
        std::unique_ptr<Session> session;
        mutable std::shared_mutex guard;
        bool persisted = false;
    };

    std::shared_ptr<Entry> find(const std::string& id) const;
    std::string new_id();
    /// Must hold the entry's exclusive guard. Stops the session when the
    /// strategy has no next query and returns the suggestion payload.
    nlohmann::ordered_json advance(Entry& entry);
    nlohmann::ordered_json suggestion_payload(const Entry& entry, Pixel q) const;
    void persist(Entry& entry);

    const Backbone* backbone_;
    ServiceConfig config_;
    std::vector<ManifestItem> manifest_;
    std::map<std::string, LaplacePosterior> posteriors_;

    mutable std::shared_mutex sessions_guard_;
    std::map<std::string, std::shared_ptr<Entry>> sessions_;
    std::mutex id_guard_;
    std::mt19937_64 id_rng_;
};

} // namespace activeprompt
