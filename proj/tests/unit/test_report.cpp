#include <gtest/gtest.h>

#include <regex>
#include <sstream>

#include "bias_audit/report.hpp"
#include "support.hpp"

namespace bias_audit {
namespace {

using testing::Gen;

std::vector<std::string> split_cells(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, '|');  // leading empty
    while (std::getline(ss, cell, '|')) {
        const auto b = cell.find_first_not_of(' ');
        const auto e = cell.find_last_not_of(' ');
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return out;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string l; std::getline(ss, l);) out.push_back(l);
    return out;
}

TEST(Report, FormatFraction) {
    EXPECT_EQ(format_fraction(0.36), "0.360");
    EXPECT_EQ(format_fraction(0.6594), "0.659");
    EXPECT_EQ(format_fraction(1.0), "1.000");
    EXPECT_EQ(format_fraction(0.0), "0.000");
}

TEST(Report, SingleModelLayout) {
    std::vector<CategoryMetrics> rows;
    double v = 0.1;
    for (auto c : kAllCategories) rows.push_back({"m1", c, v, 0.5 - v, 10}), v += 0.1;
    const auto md = emit_report(rows, ReportFormat::Markdown);
    const auto lines = lines_of(md);
    ASSERT_EQ(lines.size(), 3u);
    const auto header = split_cells(lines[0]);
    ASSERT_EQ(header.size(), 11u);
    EXPECT_EQ(header[0], "Model");
    EXPECT_EQ(header[1], "Demography Cons. ↑");
    EXPECT_EQ(header[10], "Aesthetic Calib. ↓");
    const auto cells = split_cells(lines[2]);
    ASSERT_EQ(cells.size(), 11u);
    EXPECT_EQ(cells[0], "m1");
    EXPECT_EQ(cells[9], "**0.500**");   // highest consistency
    EXPECT_EQ(cells[10], "**0.000**");  // lowest calibration error
    EXPECT_EQ(cells[1], "0.100");
}

TEST(Report, MissingCategoryRendersDash) {
    std::vector<CategoryMetrics> rows{{"m", AttributeCategory::Culture, 0.5, 0.3, 4}};
    const auto cells = split_cells(lines_of(emit_report(rows, ReportFormat::Markdown))[2]);
    EXPECT_EQ(cells[1], "–");
    EXPECT_EQ(cells[3], "**0.500**");
}

TEST(Report, NotesFollowTheTable) {
    std::vector<CategoryMetrics> rows{{"m", AttributeCategory::Culture, 0.5, 0.3, 4}};
    const auto md = emit_report(rows, ReportFormat::Markdown, {{"3 attributes excluded"}});
    EXPECT_NE(md.find("\n\n- 3 attributes excluded\n"), std::string::npos);
}

TEST(Report, SnapshotMatchesFixture) {
    const auto rows = metrics_from_csv(read_file(testing::fixtures_dir() / "report_metrics.csv"));
    ASSERT_EQ(rows.size(), 25u);
    EXPECT_EQ(emit_report(rows, ReportFormat::Markdown), read_file(testing::fixtures_dir() / "report_snapshot.md"));
}

// Bold cells are exactly those equal (at display precision) to the row's best.
TEST(Report, BoldingMatchesOracle) {
    Gen g(31);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<CategoryMetrics> rows;
        const int models = static_cast<int>(g.integer(1, 4));
        for (int m = 0; m < models; ++m) {
            for (auto c : kAllCategories) {
                if (g.coin(0.15)) continue;
                // Coarse grid forces frequent ties.
                rows.push_back({"model" + std::to_string(m), c, g.integer(0, 8) / 8.0, g.integer(0, 8) / 8.0, 3});
            }
        }
        if (rows.empty()) continue;
        const auto lines = lines_of(emit_report(rows, ReportFormat::Markdown));
        for (std::size_t li = 2; li < lines.size(); ++li) {
            const auto cells = split_cells(lines[li]);
            double best_cons = -1, best_calib = 2;
            for (const auto& r : rows) {
                if (r.model_id != cells[0]) continue;
                best_cons = std::max(best_cons, std::stod(format_fraction(r.consistency_rate)));
                best_calib = std::min(best_calib, std::stod(format_fraction(r.calibration_error)));
            }
            for (std::size_t k = 1; k < cells.size(); ++k) {
                if (cells[k] == "–") continue;
                const bool bold = cells[k].starts_with("**");
                const double value = std::stod(bold ? cells[k].substr(2) : cells[k]);
                const double best = (k % 2 == 1) ? best_cons : best_calib;
                EXPECT_EQ(bold, value == best) << lines[li];
            }
        }
    }
}

TEST(Report, CsvAndJsonCarryTheSameValues) {
    Gen g(5);
    std::vector<CategoryMetrics> rows;
    for (auto c : kAllCategories) rows.push_back({"a,b \"q\"", c, g.real(0, 1), g.real(0, 1), 7});
    const auto from_csv = metrics_from_csv(emit_report(rows, ReportFormat::Csv));
    const auto from_json = metrics_from_json(json::parse(emit_report(rows, ReportFormat::Json)));
    ASSERT_EQ(from_csv.size(), rows.size());
    ASSERT_EQ(from_json.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (const auto* got : {&from_csv[i], &from_json[i]}) {
            EXPECT_EQ(got->model_id, rows[i].model_id);
            EXPECT_EQ(got->category, rows[i].category);
            EXPECT_EQ(got->consistency_rate, rows[i].consistency_rate);
            EXPECT_EQ(got->calibration_error, rows[i].calibration_error);
            EXPECT_EQ(got->n_attributes, 7);
        }
    }
    const auto csv = emit_report(rows, ReportFormat::Csv);
    EXPECT_EQ(csv.find("**"), std::string::npos);
}

TEST(Report, EmptyMetricsAndFormats) {
    EXPECT_THROW(emit_report({}, ReportFormat::Markdown), EmptyMetrics);
    EXPECT_EQ(parse_report_format("md"), ReportFormat::Markdown);
    EXPECT_EQ(parse_report_format("csv"), ReportFormat::Csv);
    EXPECT_EQ(parse_report_format("json"), ReportFormat::Json);
    EXPECT_FALSE(parse_report_format("html"));
}

}  // namespace
}  // namespace bias_audit
