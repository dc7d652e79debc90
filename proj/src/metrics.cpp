// metrics.cpp

#include "activeprompt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>

namespace activeprompt
{

DeltaSeries delta_iou_series(const Trajectory& trajectory, double iou0)
{
    DeltaSeries out;
    out.reserve(trajectory.records.size());
    double previous = iou0;
    for (const auto& r : trajectory.records)
    {
        if (!r.iou)
            throw NotComputable("trajectory record " + std::to_string(r.t) + " carries no IoU");
        out.push_back(*r.iou - previous);
        previous = *r.iou;
    }
    return out;
}

NormalizationContext pool_context(std::string dataset, std::span<const DeltaSeries> series)
{
    NormalizationContext ctx;
    ctx.dataset = std::move(dataset);
    bool any = false;
    for (const auto& s : series)
        for (double v : s)
        {
            ctx.pooled_min = any ? std::min(ctx.pooled_min, v) : v;
            ctx.pooled_max = any ? std::max(ctx.pooled_max, v) : v;
            any = true;
        }
    if (!any)
        throw ContractViolation("normalisation pool is empty");
    return ctx;
}

std::vector<double> minmax_normalize(std::span<const double> series, const NormalizationContext& ctx)
{
    if (ctx.pooled_min > ctx.pooled_max)
        throw ContractViolation("normalisation context has min > max");
    std::vector<double> out(series.size(), 0.0);
    const double range = ctx.pooled_max - ctx.pooled_min;
    if (range == 0.0)
        return out;
    for (std::size_t i = 0; i < series.size(); ++i)
        out[i] = (series[i] - ctx.pooled_min) / range;
    return out;
}

CurveSummary peak_mean_auc(std::span<const double> normalized)
{
    if (normalized.empty())
        throw ContractViolation("peak_mean_auc needs a non-empty series");
    CurveSummary s;
    s.peak = *std::max_element(normalized.begin(), normalized.end());
    s.mean_per_iter = std::accumulate(normalized.begin(), normalized.end(), 0.0) / static_cast<double>(normalized.size());
    if (normalized.size() == 1)
    {
        s.auc = normalized.front();
        return s;
    }
    double area = 0.0;
    for (std::size_t i = 1; i < normalized.size(); ++i)
        area += 0.5 * (normalized[i - 1] + normalized[i]);
    s.auc = area / static_cast<double>(normalized.size() - 1);
    return s;
}

double expected_calibration_error(std::span<const double> probs, std::span<const std::uint8_t> labels, int bins)
{
    if (probs.size() != labels.size())
        throw ContractViolation("ECE: probabilities and labels differ in length");
    if (bins < 1)
        throw ContractViolation("ECE needs at least one bin");
    if (probs.empty())
        return 0.0;
    std::vector<double> conf(static_cast<std::size_t>(bins), 0.0);
    std::vector<double> acc(static_cast<std::size_t>(bins), 0.0);
    std::vector<std::size_t> count(static_cast<std::size_t>(bins), 0);
    for (std::size_t i = 0; i < probs.size(); ++i)
    {
        const double p = probs[i];
        if (!(p >= 0.0 && p <= 1.0))
            throw ContractViolation("ECE: probability outside [0,1]");
        const auto b = std::min(static_cast<std::size_t>(p * bins), static_cast<std::size_t>(bins - 1));
        conf[b] += p;
        acc[b] += labels[i] != 0 ? 1.0 : 0.0;
        ++count[b];
    }
    const auto n = static_cast<double>(probs.size());
    double ece = 0.0;
    for (std::size_t b = 0; b < count.size(); ++b)
    {
        if (count[b] == 0)
            continue;
        const auto nb = static_cast<double>(count[b]);
        ece += nb / n * std::abs(acc[b] / nb - conf[b] / nb);
    }
    return ece;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

namespace
{

struct MeanStd
{
    double mean = 0.0;
    double stddev = 0.0;
};

MeanStd population(const std::vector<double>& xs)
{
    MeanStd out;
    if (xs.empty())
        return out;
    out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs)
        ss += (x - out.mean) * (x - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(xs.size()));
    return out;
}

double final_iou(const Trajectory& t)
{
    if (!t.records.empty())
    {
        if (!t.records.back().iou)
            throw NotComputable("trajectory carries no IoU");
        return *t.records.back().iou;
    }
    if (!t.iou0)
        throw NotComputable("trajectory carries no initial IoU");
    return *t.iou0;
}

} // namespace

std::vector<ReportGroup> aggregate_report_groups(std::span<const RunResult> runs)
{
    if (runs.empty())
        throw ContractViolation("aggregate_report needs at least one run");

    std::vector<DeltaSeries> series(runs.size());
    std::map<std::string, std::vector<DeltaSeries>> per_dataset;
    for (std::size_t i = 0; i < runs.size(); ++i)
    {
        const auto& t = runs[i].trajectory;
        if (!t.iou0)
            throw NotComputable("run " + runs[i].item_id + " has no initial IoU");
        series[i] = delta_iou_series(t, *t.iou0);
        per_dataset[runs[i].dataset].push_back(series[i]);
    }
    std::map<std::string, NormalizationContext> contexts;
    for (const auto& [dataset, all] : per_dataset)
    {
        const bool any = std::any_of(all.begin(), all.end(), [](const DeltaSeries& s) { return !s.empty(); });
        contexts[dataset] = any ? pool_context(dataset, all) : NormalizationContext{dataset, 0.0, 0.0};
    }

    struct SeedAccumulator
    {
        double peak = 0.0;
        bool has_curve = false;
        std::vector<double> means;
        std::vector<double> aucs;
        std::vector<double> finals;
    };
    std::map<std::pair<std::string, std::string>, std::map<std::uint64_t, SeedAccumulator>> groups;
    for (std::size_t i = 0; i < runs.size(); ++i)
    {
        auto& acc = groups[{runs[i].dataset, runs[i].strategy}][runs[i].seed];
        acc.finals.push_back(final_iou(runs[i].trajectory));
        if (series[i].empty())
            continue;
        const auto normalized = minmax_normalize(series[i], contexts.at(runs[i].dataset));
        const CurveSummary s = peak_mean_auc(normalized);
        acc.peak = acc.has_curve ? std::max(acc.peak, s.peak) : s.peak;
        acc.has_curve = true;
        acc.means.push_back(s.mean_per_iter);
        acc.aucs.push_back(s.auc);
    }

    std::vector<ReportGroup> out;
    for (const auto& [key, seeds] : groups)
    {
        ReportGroup g;
        g.row.dataset = key.first;
        g.row.strategy = key.second;
        g.row.seed_count = seeds.size();
        std::vector<double> peaks, means, aucs, finals;
        for (const auto& [seed, acc] : seeds)
        {
            SeedSummary s;
            s.seed = seed;
            s.peak = acc.peak;
            s.mean_per_iter = population(acc.means).mean;
            s.auc = population(acc.aucs).mean;
            s.final_iou = population(acc.finals).mean;
            peaks.push_back(s.peak);
            means.push_back(s.mean_per_iter);
            aucs.push_back(s.auc);
            finals.push_back(s.final_iou);
            g.seeds.push_back(s);
        }
        const auto p = population(peaks);
        const auto m = population(means);
        const auto a = population(aucs);
        const auto f = population(finals);
        g.row.peak_mean = p.mean;
        g.row.peak_std = p.stddev;
        g.row.meaniter_mean = m.mean;
        g.row.meaniter_std = m.stddev;
        g.row.auc_mean = a.mean;
        g.row.auc_std = a.stddev;
        g.row.final_iou_mean = f.mean;
        g.row.final_iou_std = f.stddev;
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<ReportRow> aggregate_report(std::span<const RunResult> runs)
{
    std::vector<ReportRow> rows;
    for (auto& g : aggregate_report_groups(runs))
        rows.push_back(std::move(g.row));
    return rows;
}

// ---------------------------------------------------------------------------
// CSV and tables
// ---------------------------------------------------------------------------

namespace
{

std::string fixed6(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::vector<std::string> split_commas(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ','))
        out.push_back(cell);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

double parse_number(const std::string& s)
{
    std::size_t used = 0;
    double v = 0.0;
    try
    {
        v = std::stod(s, &used);
    }
    catch (const std::exception&)
    {
        throw ContractViolation("report: '" + s + "' is not a number");
    }
    if (used != s.size() || !std::isfinite(v))
        throw ContractViolation("report: '" + s + "' is not a number");
    return v;
}

struct Metric
{
    const char* name;
    double ReportRow::*field;
};

constexpr Metric kMetrics[] = {
    {"peak", &ReportRow::peak_mean},
    {"meaniter", &ReportRow::meaniter_mean},
    {"auc", &ReportRow::auc_mean},
    {"final_iou", &ReportRow::final_iou_mean},
};

/// rank[i] for the rows of one dataset; 1 = best.
std::vector<int> ranks(const std::vector<const ReportRow*>& rows, double ReportRow::*field)
{
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double va = rows[a]->*field;
        const double vb = rows[b]->*field;
        if (va != vb)
            return va > vb;
        return rows[a]->strategy < rows[b]->strategy;
    });
    std::vector<int> rank(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        rank[order[i]] = static_cast<int>(i) + 1;
    return rank;
}

std::map<std::string, std::vector<const ReportRow*>> by_dataset(std::span<const ReportRow> rows)
{
    std::map<std::string, std::vector<const ReportRow*>> out;
    for (const auto& r : rows)
        out[r.dataset].push_back(&r);
    for (auto& [name, list] : out)
        std::sort(list.begin(), list.end(),
                  [](const ReportRow* a, const ReportRow* b) { return a->strategy < b->strategy; });
    return out;
}

std::string csv_line(const ReportRow& r)
{
    return r.dataset + "," + r.strategy + "," + std::to_string(r.seed_count) + "," + fixed6(r.peak_mean) + "," +
           fixed6(r.peak_std) + "," + fixed6(r.meaniter_mean) + "," + fixed6(r.meaniter_std) + "," +
           fixed6(r.auc_mean) + "," + fixed6(r.auc_std) + "," + fixed6(r.final_iou_mean) + "," +
           fixed6(r.final_iou_std);
}

} // namespace

void write_report_csv(std::ostream& out, std::span<const ReportRow> rows)
{
    std::vector<const ReportRow*> sorted;
    for (const auto& r : rows)
        sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](const ReportRow* a, const ReportRow* b) {
        return std::tie(a->dataset, a->strategy) < std::tie(b->dataset, b->strategy);
    });
    out << kReportHeader << '\n';
    for (const auto* r : sorted)
        out << csv_line(*r) << '\n';
}

std::string report_csv(std::span<const ReportRow> rows)
{
    std::ostringstream out;
    write_report_csv(out, rows);
    return out.str();
}

std::vector<ReportRow> parse_report_csv(std::istream& in)
{
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader)
        throw ContractViolation("report: header does not match the report schema");
    std::vector<ReportRow> rows;
    while (std::getline(in, line))
    {
        if (line.empty())
            continue;
        const auto cells = split_commas(line);
        if (cells.size() != 11 || cells[0].empty() || cells[1].empty())
            throw ContractViolation("report: row has the wrong number of columns: " + line);
        ReportRow r;
        r.dataset = cells[0];
        r.strategy = cells[1];
        const double seeds = parse_number(cells[2]);
        if (seeds < 0 || seeds != std::floor(seeds))
            throw ContractViolation("report: seed_count must be a non-negative integer");
        r.seed_count = static_cast<std::size_t>(seeds);
        r.peak_mean = parse_number(cells[3]);
        r.peak_std = parse_number(cells[4]);
        r.meaniter_mean = parse_number(cells[5]);
        r.meaniter_std = parse_number(cells[6]);
        r.auc_mean = parse_number(cells[7]);
        r.auc_std = parse_number(cells[8]);
        r.final_iou_mean = parse_number(cells[9]);
        r.final_iou_std = parse_number(cells[10]);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string format_report_markdown(std::span<const ReportRow> rows)
{
    std::ostringstream out;
    bool first = true;
    for (const auto& [dataset, list] : by_dataset(rows))
    {
        if (!first)
            out << '\n';
        first = false;
        std::vector<std::vector<int>> metric_ranks;
        for (const auto& m : kMetrics)
            metric_ranks.push_back(ranks(list, m.field));

        out << "### " << dataset << "\n\n";
        out << "| strategy | seeds | peak | mean/iter | auc | final IoU |\n";
        out << "|---|---|---|---|---|---|\n";
        for (std::size_t i = 0; i < list.size(); ++i)
        {
            const ReportRow& r = *list[i];
            const std::pair<double, double> cells[] = {{r.peak_mean, r.peak_std},
                                                       {r.meaniter_mean, r.meaniter_std},
                                                       {r.auc_mean, r.auc_std},
                                                       {r.final_iou_mean, r.final_iou_std}};
            out << "| " << r.strategy << " | " << r.seed_count;
            for (std::size_t m = 0; m < 4; ++m)
            {
                char buf[96];
                std::snprintf(buf, sizeof buf, "%.4f ± %.4f", cells[m].first, cells[m].second);
                std::string text = buf;
                const int rank = metric_ranks[m][i];
                if (rank == 1)
                    text = "**" + text + "**";
                else if (rank == 2)
                    text = "_" + text + "_";
                out << " | " << text;
            }
            out << " |\n";
        }
    }
    return out.str();
}

std::string format_report_ranked_csv(std::span<const ReportRow> rows)
{
    std::ostringstream out;
    out << kReportHeader << ",peak_rank,meaniter_rank,auc_rank,final_iou_rank\n";
    for (const auto& [dataset, list] : by_dataset(rows))
    {
        std::vector<std::vector<int>> metric_ranks;
        for (const auto& m : kMetrics)
            metric_ranks.push_back(ranks(list, m.field));
        for (std::size_t i = 0; i < list.size(); ++i)
        {
            out << csv_line(*list[i]);
            for (const auto& r : metric_ranks)
                out << ',' << r[i];
            out << '\n';
        }
    }
    return out.str();
}

} // namespace activeprompt
