#pragma once

#include <span>
#include <string>
#include <vector>

#include "bias_audit/evaluator.hpp"

namespace bias_audit {

enum class ReportFormat { Markdown, Csv, Json };
std::optional<ReportFormat> parse_report_format(std::string_view s);

/// Free-form notes printed under the Markdown table, one bullet each.
struct ReportNotes {
    std::vector<std::string> lines;
};

/// Markdown: one row per model with a Cons./Calib. column pair per category,
/// values to three decimals, and per model the highest Cons. and the lowest
/// Calib. in bold (all tied cells at the displayed precision). CSV and JSON
/// carry the same values without styling. Throws EmptyMetrics.
std::string emit_report(std::span<const CategoryMetrics> rows, ReportFormat format,
                        const ReportNotes& notes = {});

/// Three-decimal fixed rendering used in the Markdown table.
std::string format_fraction(double v);

}  // namespace bias_audit
