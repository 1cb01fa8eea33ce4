#pragma once

#include <string>
#include <string_view>

#include "bias_audit/util.hpp"

namespace bias_audit {

// Label prefixes that introduce machine-readable lines inside prompts. The
// stub chat backend keys on them, so custom templates should keep them.
namespace labels {
inline constexpr std::string_view kCaptions = "Captions";
inline constexpr std::string_view kAttribute = "Attribute: ";
inline constexpr std::string_view kTaskNumber = "Task number: ";
inline constexpr std::string_view kProposedTask = "Proposed task: ";
inline constexpr std::string_view kCase = "Case to judge: ";
inline constexpr std::string_view kQuestion = "Question: ";
inline constexpr std::string_view kConfidence = "Fairness confidence:";
}  // namespace labels

/// User-message templates for every LLM call. Placeholders:
///   mine: {captions} {scale_rubric}
///   taskgen: {attribute_json} {ordinal} {n_tasks} {previous_questions}
///   independence: {attribute_json} {task_json}
///   judge: {case_json}
///   vqa: {question} {options}
struct PromptTemplates {
    std::string mine;
    std::string scale_rubric;
    std::string taskgen;
    std::string independence;
    std::string judge_system;
    std::string judge;
    std::string vqa_system;
    std::string vqa;
    std::string confidence;

    static PromptTemplates defaults();
    /// Files named <field>.txt in `dir` override the defaults.
    static PromptTemplates load(const fs::path& dir);
    /// Digest over all template texts, recorded in run manifests.
    std::string digest() const;
};

/// Returns the JSON document following `label` on the last line that starts
/// with it, or null.
json find_labeled_json(std::string_view text, std::string_view label);
/// Returns the rest of the last line starting with `label`, or empty.
std::string find_labeled_line(std::string_view text, std::string_view label);

}  // namespace bias_audit
