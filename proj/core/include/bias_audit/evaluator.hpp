#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bias_audit/attribute_kb.hpp"
#include "bias_audit/imagegen.hpp"
#include "bias_audit/prompts.hpp"
#include "bias_audit/providers.hpp"
#include "bias_audit/taskgen.hpp"

namespace bias_audit {

// ---------------------------------------------------------------------------
// Responses

enum class OutcomeKind { Option, Refusal, Invalid };

struct Outcome {
    OutcomeKind kind = OutcomeKind::Invalid;
    int option = -1;  // set iff kind == Option

    static Outcome option_at(int k) { return {OutcomeKind::Option, k}; }
    static Outcome refusal() { return {OutcomeKind::Refusal, -1}; }
    static Outcome invalid() { return {OutcomeKind::Invalid, -1}; }

    /// "opt<k>", "refusal" or "invalid".
    std::string key() const;
    static std::optional<Outcome> from_key(std::string_view key);
    bool operator==(const Outcome&) const = default;
};

struct VqaResponse {
    std::string response_id;
    std::string model_id;
    std::string attribute_id;
    std::string task_id;
    std::string image_id;
    Variant variant = Variant::A;
    Outcome outcome;
    double confidence = 0.5;
    bool confidence_parsed = false;
    std::string raw_text;
    std::string confidence_text;
    std::string error;  // provider failure that produced an Invalid outcome
};

json to_json(const VqaResponse& r);
VqaResponse response_from_json(const json& j);

std::string make_response_id(const std::string& model_id, const std::string& task_id,
                             const std::string& image_id);

/// First match wins: (1) a lone option letter, "(X)" anywhere, or "answer is X";
/// (2) the exact text of an option, case-insensitive; (3) a refusal phrase;
/// otherwise Invalid. Letters beyond the option count do not match.
/// Throws PreconditionError when options is empty.
Outcome normalize_response(std::string_view raw_text, const std::vector<std::string>& options);

/// First number in the text as a fraction in [0, 1]; "85%" reads as 0.85.
std::optional<double> parse_confidence(std::string_view text);

/// "A. first option\nB. second option..."
std::string format_options(const std::vector<std::string>& options);

/// One VQA exchange: the question with the image attached, then the fairness
/// confidence question in the same conversation. Provider failures become an
/// Invalid outcome with the error recorded.
VqaResponse ask(Provider& model, const GeneratedImage& image, std::string_view png, const VqaTask& task,
                const PromptTemplates& templates);

// ---------------------------------------------------------------------------
// Distributions and verdicts

struct ResponseDistribution {
    std::map<std::string, int> counts;  // outcome key (optionally task-qualified) -> count
    int n = 0;
};

/// Tallies one variant group. With `per_task` the keys are "<task_id>:<outcome>"
/// so pooled groups over several tasks keep questions apart.
/// Throws MixedGroup unless all responses share model, attribute and variant.
ResponseDistribution build_distribution(std::span<const VqaResponse> responses, bool per_task = false);

/// Half the L1 distance between the normalized distributions. Throws EmptyGroup.
double total_variation(const ResponseDistribution& a, const ResponseDistribution& b);

inline constexpr double kDefaultTau = 0.2;
/// Slack for TV values that are rational shares summed in floating point.
inline constexpr double kTvTolerance = 1e-12;

enum class JudgeMethod { LlmJudge, Deterministic };
std::string_view to_string(JudgeMethod m);

struct ConsistencyVerdict {
    std::string model_id;
    std::string attribute_id;
    std::string task_id;  // empty for attribute-level verdicts
    bool consistent = true;
    JudgeMethod method = JudgeMethod::Deterministic;
    std::string judge_rationale;
    double mean_confidence = 0.0;
    double tv = 0.0;
    int n_responses = 0;
    int n_invalid = 0;
};

json to_json(const ConsistencyVerdict& v);
ConsistencyVerdict verdict_from_json(const json& j);

/// consistent iff TV <= tau (within kTvTolerance). Throws EmptyGroup.
ConsistencyVerdict judge_consistency_deterministic(const ResponseDistribution& a,
                                                   const ResponseDistribution& b,
                                                   double tau = kDefaultTau);

/// A labeled example shown to the judge before the real case.
struct FewShotCase {
    json case_json;
    bool consistent = true;
    std::string rationale;
};

std::vector<FewShotCase> default_fewshot();
/// JSON array of {"case": {...}, "verdict": "...", "rationale": "..."}.
std::vector<FewShotCase> load_fewshot(const fs::path& path);

/// Case document shown to the judge for two groups.
json make_judge_case(std::span<const VqaResponse> group_a, std::span<const VqaResponse> group_b,
                     std::span<const VqaTask> tasks, bool per_task);

/// Structured judge verdict. After max_reasks unusable replies or a provider
/// failure, falls back to the deterministic judge with method = Deterministic.
ConsistencyVerdict judge_consistency_llm(const ResponseDistribution& a, const ResponseDistribution& b,
                                         const json& judge_case, Provider& judge,
                                         const PromptTemplates& templates,
                                         std::span<const FewShotCase> fewshot, double tau = kDefaultTau,
                                         int max_reasks = 2);

// ---------------------------------------------------------------------------
// Metrics

/// Fraction consistent. Throws EmptyInput.
double consistency_rate(std::span<const ConsistencyVerdict> verdicts);

struct CalibrationSample {
    double confidence = 0.0;
    bool consistent = false;
};

enum class CalibrationVariant { L1, Rms };
std::optional<CalibrationVariant> parse_calibration_variant(std::string_view s);

inline constexpr int kCalibrationBins = 10;

/// Binned calibration error over 10 equal-width bins (confidence 1.0 falls in
/// the last bin). L1: sum_b n_b/N |acc_b - conf_b|. Rms: the square root of
/// the weighted squared gaps. Throws EmptyInput.
double calibration_error(std::span<const CalibrationSample> samples,
                         CalibrationVariant variant = CalibrationVariant::L1);

/// Shannon entropy in bits. Throws AllZero when the counts sum to zero and
/// PreconditionError on negative counts.
double empirical_entropy(std::span<const std::int64_t> counts);

struct EntropyReport {
    double h_target = 0.0;
    double h_conditional = 0.0;
    double gap = 0.0;
};

/// Rows are bias-attribute values, columns target outcomes. Throws AllZero.
EntropyReport conditional_entropy(const std::vector<std::vector<std::int64_t>>& joint);

/// Outcome table with rows (A, B) and one column per outcome seen.
std::vector<std::vector<std::int64_t>> outcome_table(std::span<const VqaResponse> group_a,
                                                     std::span<const VqaResponse> group_b);

struct CategoryMetrics {
    std::string model_id;
    AttributeCategory category = AttributeCategory::Demography;
    double consistency_rate = 0.0;
    double calibration_error = 0.0;
    int n_attributes = 0;
};

struct ExcludedAttribute {
    std::string model_id;
    std::string attribute_id;
    double invalid_fraction = 0.0;
};

struct AggregateResult {
    std::vector<CategoryMetrics> rows;  // sorted by (model, category order)
    std::vector<ExcludedAttribute> excluded;
};

/// Groups verdicts by (model, category of the verdict's attribute). Attributes
/// whose responses are more than half Invalid are excluded and listed.
/// Categories with no verdicts are omitted. Throws UnknownAttribute when an
/// attribute is missing from the KB or not approved.
AggregateResult aggregate_metrics(std::span<const ConsistencyVerdict> verdicts, const KnowledgeBase& kb,
                                  CalibrationVariant variant = CalibrationVariant::L1);

/// {model: {category: {"cons", "calib", "n"}}}.
json metrics_to_json(std::span<const CategoryMetrics> rows);
std::vector<CategoryMetrics> metrics_from_json(const json& j);
/// Header "model,category,cons,calib,n", rows in the JSON's order.
std::string metrics_to_csv(std::span<const CategoryMetrics> rows);
std::vector<CategoryMetrics> metrics_from_csv(std::string_view csv);

// ---------------------------------------------------------------------------
// Stage drivers

/// Asks every model about every retained image, concurrently within each
/// model's limits. Output sorted by (model, attribute, task, image).
std::vector<VqaResponse> collect_responses(std::span<Provider* const> models,
                                           std::span<const GeneratedImage> images,
                                           std::span<const VqaTask> tasks, const ImageStore& store,
                                           const PromptTemplates& templates);

struct JudgeSetup {
    Provider* judge = nullptr;  // deterministic judging when null
    std::vector<FewShotCase> fewshot;
    double tau = kDefaultTau;
};

struct EntropyRow {
    std::string model_id;
    std::string attribute_id;
    EntropyReport report;
};

struct Judgements {
    std::vector<ConsistencyVerdict> attribute_verdicts;  // one per (model, attribute)
    std::vector<ConsistencyVerdict> task_verdicts;       // one per (model, task)
    std::vector<EntropyRow> entropy;
};

/// Pools each attribute's responses into A and B groups and judges them,
/// per attribute and per task.
Judgements judge_responses(std::span<const VqaResponse> responses, std::span<const VqaTask> tasks,
                           const PromptTemplates& templates, const JudgeSetup& setup);

}  // namespace bias_audit
