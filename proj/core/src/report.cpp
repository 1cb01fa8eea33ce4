#include "bias_audit/report.hpp"

#include <cstdio>
#include <map>
#include <set>
#include <vector>

namespace bias_audit {

std::optional<ReportFormat> parse_report_format(std::string_view s) {
    if (s == "md" || s == "markdown") return ReportFormat::Markdown;
    if (s == "csv") return ReportFormat::Csv;
    if (s == "json") return ReportFormat::Json;
    return std::nullopt;
}

std::string format_fraction(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

namespace {

std::string markdown(std::span<const CategoryMetrics> rows, const ReportNotes& notes) {
    // Models keep their first-appearance order.
    std::vector<std::string> models;
    std::map<std::string, std::map<AttributeCategory, const CategoryMetrics*>> by_model;
    for (const auto& r : rows) {
        if (!by_model.contains(r.model_id)) models.push_back(r.model_id);
        by_model[r.model_id][r.category] = &r;
    }

    std::string out = "| Model |";
    std::string rule = "|---|";
    for (auto c : kAllCategories) {
        out += " " + std::string(to_string(c)) + " Cons. ↑ | " + std::string(to_string(c)) + " Calib. ↓ |";
        rule += "---:|---:|";
    }
    out += "\n" + rule + "\n";

    for (const auto& model : models) {
        const auto& cells = by_model.at(model);
        // Ties are judged on the displayed values so equal-looking cells agree.
        std::string best_cons;
        std::string best_calib;
        for (const auto& [_, m] : cells) {
            const std::string cons = format_fraction(m->consistency_rate);
            const std::string calib = format_fraction(m->calibration_error);
            if (best_cons.empty() || std::stod(cons) > std::stod(best_cons)) best_cons = cons;
            if (best_calib.empty() || std::stod(calib) < std::stod(best_calib)) best_calib = calib;
        }
        out += "| " + model + " |";
        for (auto c : kAllCategories) {
            auto it = cells.find(c);
            if (it == cells.end()) {
                out += " – | – |";
                continue;
            }
            const std::string cons = format_fraction(it->second->consistency_rate);
            const std::string calib = format_fraction(it->second->calibration_error);
            out += " " + (cons == best_cons ? "**" + cons + "**" : cons) + " |";
            out += " " + (calib == best_calib ? "**" + calib + "**" : calib) + " |";
        }
        out += "\n";
    }
    if (!notes.lines.empty()) {
        out += "\n";
        for (const auto& line : notes.lines) out += "- " + line + "\n";
    }
    return out;
}

}  // namespace

std::string emit_report(std::span<const CategoryMetrics> rows, ReportFormat format, const ReportNotes& notes) {
    if (rows.empty()) throw EmptyMetrics("no metrics to report");
    switch (format) {
        case ReportFormat::Markdown: return markdown(rows, notes);
        case ReportFormat::Csv: return metrics_to_csv(rows);
        case ReportFormat::Json: return metrics_to_json(rows).dump(2) + "\n";
    }
    return {};
}

}  // namespace bias_audit
