// activeprompt command-line tool: gen-data, train-head, fit-laplace, bench,
// serve, report.

#include "activeprompt/harness.hpp"
#include "activeprompt/metrics.hpp"
#include "activeprompt/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace ap = activeprompt;

namespace
{

constexpr int kExitMissingFile = 1;
constexpr int kExitBadArgument = 2;

std::vector<int> parse_int_list(const std::string& list)
{
    std::vector<int> out;
    std::istringstream in(list);
    std::string cell;
    while (std::getline(in, cell, ','))
    {
        if (cell.empty())
            continue;
        std::size_t used = 0;
        const int v = std::stoi(cell, &used);
        if (used != cell.size())
            throw ap::ContractViolation("'" + cell + "' is not an integer");
        out.push_back(v);
    }
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& list)
{
    std::vector<std::uint64_t> out;
    std::istringstream in(list);
    std::string cell;
    while (std::getline(in, cell, ','))
    {
        if (cell.empty())
            continue;
        std::size_t used = 0;
        const auto v = std::stoull(cell, &used);
        if (used != cell.size())
            throw ap::ContractViolation("'" + cell + "' is not a seed");
        out.push_back(v);
    }
    if (out.empty())
        throw ap::ContractViolation("seed list is empty");
    return out;
}

bool require_file(const std::filesystem::path& p, const char* what)
{
    if (std::filesystem::exists(p))
        return true;
    std::cerr << "error: " << what << " not found: " << p.string() << '\n';
    return false;
}

bool require_dataset(const std::filesystem::path& dir)
{
    return require_file(dir / std::string(ap::kManifestName), "dataset manifest");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Active prompting for interactive segmentation"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
    std::filesystem::path gen_out;
    std::size_t gen_scenes = 20;
    std::uint64_t gen_seed = 0;
    std::string gen_profiles = "blobs,rings,thin";
    int gen_size = 64;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--scenes", gen_scenes, "Scenes per profile")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "Base seed");
    gen->add_option("--profile", gen_profiles, "blobs|rings|thin, or a comma list");
    gen->add_option("--size", gen_size, "Square scene size in pixels")->check(CLI::Range(8, 4096));

    // train-head
    auto* train = app.add_subcommand("train-head", "MAP-train the head on the train/val splits");
    std::filesystem::path train_data, train_out, train_record;
    std::string hidden = "16,8";
    ap::HeadConfig head_config;
    train->add_option("--data", train_data, "Dataset directory")->required();
    train->add_option("--out", train_out, "Head file to write")->required();
    train->add_option("--hidden", hidden, "Hidden channel counts, comma separated");
    train->add_option("--seed", head_config.seed);
    train->add_option("--dropout", head_config.dropout_rate);
    train->add_option("--lr,--learning-rate", head_config.learning_rate);
    train->add_option("--weight-decay", head_config.weight_decay);
    train->add_option("--batch-size", head_config.batch_size);
    train->add_option("--patience", head_config.patience);
    train->add_option("--min-delta", head_config.min_delta);
    train->add_option("--max-epochs", head_config.max_epochs);
    train->add_option("--kernel-size", head_config.kernel_size);
    train->add_option("--pixels-per-example", head_config.pixels_per_example);
    train->add_option("--record", train_record, "Write the training record as JSON");

    // fit-laplace
    auto* fit = app.add_subcommand("fit-laplace", "Fit the diagonal Laplace posterior around a trained head");
    std::filesystem::path fit_head, fit_data, fit_out;
    ap::LaplaceFitConfig fit_config;
    fit->add_option("--head", fit_head, "Head file")->required();
    fit->add_option("--data", fit_data, "Dataset directory")->required();
    fit->add_option("--out", fit_out, "Posterior file to write")->required();
    fit->add_option("--subset", fit_config.subset, "Training examples in the fit")->check(CLI::PositiveNumber);
    fit->add_option("--prior-precision", fit_config.prior_precision)->check(CLI::PositiveNumber);
    fit->add_option("--seed", fit_config.seed);
    fit->add_option("--pixels-per-example", fit_config.pixels_per_example);

    // bench
    auto* bench = app.add_subcommand("bench", "Run BALD and the matched-budget baselines");
    ap::BenchConfig bench_config;
    std::string strategies = "bald,entropy,random,oracle";
    std::string seeds = "0,1,2";
    bench->add_option("--data", bench_config.data_dir)->required();
    bench->add_option("--posterior", bench_config.posterior_path)->required();
    bench->add_option("--strategies", strategies);
    bench->add_option("--budget", bench_config.budget);
    bench->add_option("--tau-mi", bench_config.tau_mi);
    bench->add_option("--tau-ent", bench_config.tau_ent);
    bench->add_option("--samples", bench_config.samples);
    bench->add_option("--seeds", seeds);
    bench->add_option("--out", bench_config.out_path)->required();
    bench->add_option("--split", bench_config.split, "Only items of this split (default: all)");
    bench->add_option("--replay-dir", bench_config.replay_dir, "Recorded sessions for human_replay");
    bench->add_option("--stride", bench_config.stride, "Candidate lattice stride");

    // serve
    auto* serve = app.add_subcommand("serve", "Serve the session API over HTTP");
    int port = 8080;
    std::string host = "127.0.0.1";
    ap::ServiceConfig service_config;
    serve->add_option("--port", port);
    serve->add_option("--host", host);
    serve->add_option("--data", service_config.data_dir)->required();
    serve->add_option("--posterior", service_config.posterior_path)->required();
    serve->add_option("--log-dir", service_config.log_dir, "Where finished sessions are written");
    serve->add_option("--samples", service_config.samples);

    // report
    auto* report = app.add_subcommand("report", "Format a bench CSV");
    std::filesystem::path report_in;
    std::string report_format = "markdown";
    report->add_option("--in", report_in)->required();
    report->add_option("--format", report_format)->check(CLI::IsMember({"markdown", "csv"}));

    CLI11_PARSE(app, argc, argv);

    try
    {
        const ap::ToyBackbone backbone;

        if (*gen)
        {
            std::vector<ap::SceneProfile> profiles;
            std::istringstream in(gen_profiles);
            std::string name;
            while (std::getline(in, name, ','))
                profiles.push_back(ap::parse_profile(name));
            const auto manifest = ap::generate_dataset(gen_out, profiles, gen_scenes, gen_seed, gen_size);
            std::cout << "wrote " << manifest.size() << " scenes to " << gen_out.string() << '\n';
            return 0;
        }

        if (*train)
        {
            if (!require_dataset(train_data))
                return kExitMissingFile;
            head_config.hidden_channels = parse_int_list(hidden);
            head_config.validate();
            const ap::TrainResult result = ap::train_head_on_dataset(train_data, backbone, head_config);
            ap::save_head(train_out, result.params);
            const auto& r = result.record;
            std::cout << "epochs " << r.stop_epoch << " best " << r.best_epoch << " (" << r.stop_reason
                      << "), best val IoU " << r.val_iou.at(static_cast<std::size_t>(r.best_epoch - 1)) << '\n';
            if (!train_record.empty())
            {
                nlohmann::ordered_json j;
                j["train_loss"] = r.train_loss;
                j["val_iou"] = r.val_iou;
                j["stop_epoch"] = r.stop_epoch;
                j["best_epoch"] = r.best_epoch;
                j["stop_reason"] = r.stop_reason;
                std::ofstream(train_record) << j.dump(2) << '\n';
            }
            return 0;
        }

        if (*fit)
        {
            if (!require_file(fit_head, "head file") || !require_dataset(fit_data))
                return kExitMissingFile;
            const ap::HeadParams head = ap::load_head(fit_head);
            const ap::LaplacePosterior posterior = ap::fit_laplace_on_dataset(fit_data, head, backbone, fit_config);
            ap::save_posterior(fit_out, posterior);
            std::cout << "fitted " << posterior.precision.size() << " precisions over " << posterior.subset_size
                      << " examples\n";
            return 0;
        }

        if (*bench)
        {
            try
            {
                bench_config.strategies = ap::parse_strategy_list(strategies);
                bench_config.seeds = parse_seed_list(seeds);
            }
            catch (const std::exception& e)
            {
                std::cerr << "error: " << e.what() << '\n';
                return kExitBadArgument;
            }
            if (!require_dataset(bench_config.data_dir) || !require_file(bench_config.posterior_path, "posterior"))
                return kExitMissingFile;
            const ap::BenchResult result = ap::run_benchmark(backbone, bench_config);
            std::cout << "ran " << result.runs.size() << " sessions, report " << bench_config.out_path.string()
                      << '\n';
            return 0;
        }

        if (*serve)
        {
            if (!require_dataset(service_config.data_dir) ||
                !require_file(service_config.posterior_path, "posterior"))
                return kExitMissingFile;
            ap::SessionService service(backbone, service_config);
            httplib::Server server;
            service.mount(server);
            std::cout << "listening on " << host << ':' << port << std::endl;
            return server.listen(host, port) ? 0 : 1;
        }

        if (*report)
        {
            std::ifstream in(report_in);
            if (!in)
            {
                std::cerr << "error: cannot read " << report_in.string() << '\n';
                return kExitMissingFile;
            }
            std::vector<ap::ReportRow> rows;
            try
            {
                rows = ap::parse_report_csv(in);
            }
            catch (const ap::ContractViolation& e)
            {
                std::cerr << "error: " << e.what() << '\n';
                return 1;
            }
            std::cout << (report_format == "csv" ? ap::format_report_ranked_csv(rows)
                                                 : ap::format_report_markdown(rows));
            return 0;
        }
    }
    catch (const ap::ContractViolation& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return kExitBadArgument;
    }
    catch (const std::exception& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
