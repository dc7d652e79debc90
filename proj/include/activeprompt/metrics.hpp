// metrics.hpp
//
// Per-iteration IoU gains, per-dataset min-max normalisation, peak / mean /
// AUC summaries, calibration error and the aggregated benchmark report.

#pragma once

#include "activeprompt/session.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace activeprompt
{

/// IoU(S_t) - IoU(S_{t-1}) for t = 1..T.
using DeltaSeries = std::vector<double>;

/// Throws NotComputable when a record has no IoU.
DeltaSeries delta_iou_series(const Trajectory& trajectory, double iou0);

struct NormalizationContext
{
    std::string dataset;
    double pooled_min = 0.0;
    double pooled_max = 0.0;
};

/// Min and max over every value of every series. Throws ContractViolation
/// when all series are empty.
NormalizationContext pool_context(std::string dataset, std::span<const DeltaSeries> series);

/// (x - min) / (max - min); all zeros when max == min.
std::vector<double> minmax_normalize(std::span<const double> series, const NormalizationContext& ctx);

struct CurveSummary
{
    double peak = 0.0;
    double mean_per_iter = 0.0;
    double auc = 0.0; ///< trapezoid over 1..T divided by T - 1

    bool operator==(const CurveSummary&) const = default;
};

/// Throws ContractViolation for an empty series.
CurveSummary peak_mean_auc(std::span<const double> normalized);

/// Equal-width bins on [0,1] (last bin closed); sum_b n_b / N * |acc_b - conf_b|
/// where acc_b is the mean label and conf_b the mean probability in bin b.
double expected_calibration_error(std::span<const double> probs, std::span<const std::uint8_t> labels,
                                  int bins = 10);

/// One finished simulated session.
struct RunResult
{
    std::string dataset;
    std::string strategy;
    std::uint64_t seed = 0;
    std::string item_id;
    Trajectory trajectory;
};

struct ReportRow
{
    std::string dataset;
    std::string strategy;
    std::size_t seed_count = 0;
    double peak_mean = 0.0;
    double peak_std = 0.0;
    double meaniter_mean = 0.0;
    double meaniter_std = 0.0;
    double auc_mean = 0.0;
    double auc_std = 0.0;
    double final_iou_mean = 0.0;
    double final_iou_std = 0.0;
};

/// Per-seed values behind one report row.
struct SeedSummary
{
    std::uint64_t seed = 0;
    double peak = 0.0;          ///< max normalised gain over images and iterations
    double mean_per_iter = 0.0; ///< averaged over images with at least one iteration
    double auc = 0.0;
    double final_iou = 0.0; ///< averaged over all images
};

struct ReportGroup
{
    ReportRow row;
    std::vector<SeedSummary> seeds;
};

/// Groups runs by (dataset, strategy), normalises per dataset over every
/// strategy, seed and iteration, and aggregates mean and population std
/// across seeds. Sessions with zero iterations count toward final IoU only.
/// Rows are sorted by (dataset, strategy).
std::vector<ReportGroup> aggregate_report_groups(std::span<const RunResult> runs);
std::vector<ReportRow> aggregate_report(std::span<const RunResult> runs);

inline constexpr const char* kReportHeader = "dataset,strategy,seed_count,peak_mean,peak_std,meaniter_mean,"
                                             "meaniter_std,auc_mean,auc_std,final_iou_mean,final_iou_std";

void write_report_csv(std::ostream& out, std::span<const ReportRow> rows);
std::string report_csv(std::span<const ReportRow> rows);
/// Throws ContractViolation when the header or a row does not match the schema.
std::vector<ReportRow> parse_report_csv(std::istream& in);

/// Per-dataset tables, best value per metric in bold and second-best in
/// italics. Higher is better for every metric; ties go to the
/// lexicographically lower strategy.
std::string format_report_markdown(std::span<const ReportRow> rows);
/// The report CSV with a rank column (1 = best) appended per metric.
std::string format_report_ranked_csv(std::span<const ReportRow> rows);

} // namespace activeprompt
