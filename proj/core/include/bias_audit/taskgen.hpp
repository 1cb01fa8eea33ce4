#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "bias_audit/attribute_kb.hpp"
#include "bias_audit/prompts.hpp"
#include "bias_audit/providers.hpp"

namespace bias_audit {

inline constexpr std::string_view kBiasSpan = "{bias_span}";

/// Two image prompts that differ only in the bias-attribute span.
struct PromptPair {
    std::string template_text;
    std::string variant_a;
    std::string variant_b;
    std::string rendered_a;
    std::string rendered_b;
};

/// Throws BadTemplate unless the template has exactly one {bias_span};
/// IdenticalVariants when the variants are equal; PreconditionError when one is empty.
PromptPair render_prompt_pair(const std::string& template_text, const std::string& variant_a,
                              const std::string& variant_b);

struct PairCheck {
    bool ok = false;
    std::string reason;  // empty when ok
};

/// ok iff the whitespace-token LCS diff of the rendered prompts is a single
/// contiguous hunk lying inside the variant spans, and both renderings match
/// the template.
PairCheck validate_prompt_pair(const PromptPair& pair);

/// Number of change hunks in the token-level LCS alignment of a and b.
std::size_t diff_hunks(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct IndependenceCheck {
    bool passed = false;
    std::string rationale;
};

struct VqaTask {
    std::string task_id;
    std::string attribute_id;
    int ordinal = 1;
    std::string question;
    std::vector<std::string> options;
    std::string target_attr_desc;
    PromptPair prompt_pair;
    IndependenceCheck independence_check;
    int regenerations = 0;
};

json to_json(const VqaTask& t);
VqaTask task_from_json(const json& j);

std::string make_task_id(const std::string& attribute_id, int ordinal);

/// Options must number 2-5, be nonempty, pairwise distinct (case-insensitive)
/// and not be a "cannot tell" style escape. Returns the first problem or empty.
std::string check_options(const std::vector<std::string>& options);

/// Fails when the question or an option shares a content token with either
/// variant, or when the question contains every content token of the
/// attribute name (i.e. it asks about the attribute itself).
IndependenceCheck lexical_guard(const VqaTask& task, const BiasAttribute& attribute);

/// Lexical guard, then a rubric question to the judge LLM (temperature 0).
IndependenceCheck check_independence(const VqaTask& task, const BiasAttribute& attribute,
                                     Provider& llm, const PromptTemplates& templates,
                                     int max_reasks = 2);

struct TaskgenOptions {
    int n_tasks = 5;
    int max_regenerations = 3;
    int max_reasks = 2;
    double temperature = kCreativeTemperature;
};

/// "shared" when every task asks the same question, "distinct" when all
/// questions differ, "mixed" otherwise.
std::string question_mode(std::span<const VqaTask> tasks);

/// Exactly options.n_tasks validated tasks for an approved attribute. Each
/// task gets up to max_regenerations fresh attempts; then GenerationExhausted.
/// `judge` runs the independence rubric (defaults to `llm`).
std::vector<VqaTask> generate_task_bundle(const BiasAttribute& attribute, Provider& llm,
                                          const PromptTemplates& templates,
                                          const TaskgenOptions& options = {},
                                          Provider* judge = nullptr);

struct TaskgenResult {
    std::vector<VqaTask> tasks;             // sorted by (attribute_id, ordinal)
    std::vector<std::string> failed_attributes;
    std::map<std::string, std::string> question_modes;  // attribute_id -> mode
};

/// Bundles for many attributes, generated concurrently.
TaskgenResult generate_tasks(std::span<const BiasAttribute> attributes, Provider& llm,
                             const PromptTemplates& templates, const TaskgenOptions& options = {},
                             Provider* judge = nullptr);

}  // namespace bias_audit
