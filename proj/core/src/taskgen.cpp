#include "bias_audit/taskgen.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <set>
#include <tuple>
#include <variant>

#include <spdlog/spdlog.h>

namespace bias_audit {

namespace {

struct Hunk {
    std::size_t a_begin, a_end, b_begin, b_end;
};

std::vector<Hunk> lcs_hunks(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t n = a.size();
    const std::size_t m = b.size();
    // suffix[i][j] = LCS length of a[i:] and b[j:]
    std::vector<std::vector<std::uint32_t>> suffix(n + 1, std::vector<std::uint32_t>(m + 1, 0));
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t j = m; j-- > 0;) {
            suffix[i][j] = a[i] == b[j] ? suffix[i + 1][j + 1] + 1
                                        : std::max(suffix[i + 1][j], suffix[i][j + 1]);
        }
    }
    std::vector<Hunk> hunks;
    std::optional<Hunk> open;
    std::size_t i = 0;
    std::size_t j = 0;
    auto close = [&] {
        if (open) {
            open->a_end = i;
            open->b_end = j;
            hunks.push_back(*open);
            open.reset();
        }
    };
    while (i < n || j < m) {
        if (i < n && j < m && a[i] == b[j] && suffix[i][j] == suffix[i + 1][j + 1] + 1) {
            close();
            ++i;
            ++j;
            continue;
        }
        if (!open) open = Hunk{i, i, j, j};
        if (j >= m || (i < n && suffix[i + 1][j] >= suffix[i][j + 1])) {
            ++i;
        } else {
            ++j;
        }
    }
    close();
    return hunks;
}

struct TokenSpan {
    std::size_t begin, end;
};

std::vector<TokenSpan> token_spans(const std::string& s) {
    std::vector<TokenSpan> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        if (i >= s.size()) break;
        std::size_t b = i;
        while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        out.push_back({b, i});
    }
    return out;
}

bool tokens_inside(const std::vector<TokenSpan>& spans, std::size_t first, std::size_t last,
                   std::size_t region_begin, std::size_t region_end) {
    for (std::size_t k = first; k < last; ++k) {
        if (!(spans[k].begin < region_end && spans[k].end > region_begin)) return false;
    }
    return true;
}

std::set<std::string> content_tokens(std::string_view text) {
    return name_token_set(text);  // same stopword handling as duplicate screening
}

constexpr std::array<std::string_view, 10> kEscapeOptions = {
    "cannot tell",   "can't tell",      "cannot be determined", "can't be determined",
    "cannot determine", "not enough information", "unknown", "not sure", "unsure", "undetermined"};

}  // namespace

PromptPair render_prompt_pair(const std::string& template_text, const std::string& variant_a,
                              const std::string& variant_b) {
    const auto first = template_text.find(kBiasSpan);
    if (first == std::string::npos) throw BadTemplate("template has no {bias_span} placeholder");
    if (template_text.find(kBiasSpan, first + kBiasSpan.size()) != std::string::npos) {
        throw BadTemplate("template has more than one {bias_span} placeholder");
    }
    const std::string a = trim(variant_a);
    const std::string b = trim(variant_b);
    if (a.empty() || b.empty()) throw PreconditionError("variants must be nonempty");
    if (a == b) throw IdenticalVariants("variants are identical: '" + a + "'");
    PromptPair p;
    p.template_text = template_text;
    p.variant_a = a;
    p.variant_b = b;
    const std::string prefix = template_text.substr(0, first);
    const std::string suffix = template_text.substr(first + kBiasSpan.size());
    p.rendered_a = prefix + a + suffix;
    p.rendered_b = prefix + b + suffix;
    return p;
}

std::size_t diff_hunks(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    return lcs_hunks(a, b).size();
}

PairCheck validate_prompt_pair(const PromptPair& pair) {
    const auto ta = split_whitespace(pair.rendered_a);
    const auto tb = split_whitespace(pair.rendered_b);
    const auto hunks = lcs_hunks(ta, tb);
    if (hunks.empty()) return {false, "no difference"};
    if (hunks.size() > 1) return {false, "multiple spans"};

    const auto pos = pair.template_text.find(kBiasSpan);
    if (pos == std::string::npos ||
        pair.template_text.find(kBiasSpan, pos + kBiasSpan.size()) != std::string::npos) {
        return {false, "template must hold exactly one {bias_span}"};
    }
    const std::string prefix = pair.template_text.substr(0, pos);
    const std::string suffix = pair.template_text.substr(pos + kBiasSpan.size());
    if (pair.rendered_a != prefix + pair.variant_a + suffix ||
        pair.rendered_b != prefix + pair.variant_b + suffix) {
        return {false, "rendered prompt does not match template"};
    }
    const Hunk& h = hunks.front();
    const bool inside_a = tokens_inside(token_spans(pair.rendered_a), h.a_begin, h.a_end,
                                        prefix.size(), prefix.size() + pair.variant_a.size());
    const bool inside_b = tokens_inside(token_spans(pair.rendered_b), h.b_begin, h.b_end,
                                        prefix.size(), prefix.size() + pair.variant_b.size());
    if (!inside_a || !inside_b) return {false, "difference outside the bias span"};
    return {true, {}};
}

// ---------------------------------------------------------------------------

json to_json(const VqaTask& t) {
    return {{"task_id", t.task_id},
            {"attribute_id", t.attribute_id},
            {"ordinal", t.ordinal},
            {"question", t.question},
            {"options", t.options},
            {"target_attr_desc", t.target_attr_desc},
            {"prompt_pair",
             {{"template", t.prompt_pair.template_text},
              {"variant_a", t.prompt_pair.variant_a},
              {"variant_b", t.prompt_pair.variant_b},
              {"rendered_a", t.prompt_pair.rendered_a},
              {"rendered_b", t.prompt_pair.rendered_b}}},
            {"independence_check",
             {{"passed", t.independence_check.passed}, {"rationale", t.independence_check.rationale}}},
            {"regenerations", t.regenerations}};
}

VqaTask task_from_json(const json& j) {
    VqaTask t;
    try {
        t.task_id = j.at("task_id").get<std::string>();
        t.attribute_id = j.at("attribute_id").get<std::string>();
        t.ordinal = j.value("ordinal", 1);
        t.question = j.at("question").get<std::string>();
        t.options = j.at("options").get<std::vector<std::string>>();
        t.target_attr_desc = j.value("target_attr_desc", "");
        const auto& p = j.at("prompt_pair");
        t.prompt_pair.template_text = p.at("template").get<std::string>();
        t.prompt_pair.variant_a = p.at("variant_a").get<std::string>();
        t.prompt_pair.variant_b = p.at("variant_b").get<std::string>();
        t.prompt_pair.rendered_a = p.at("rendered_a").get<std::string>();
        t.prompt_pair.rendered_b = p.at("rendered_b").get<std::string>();
        const auto& ic = j.at("independence_check");
        t.independence_check.passed = ic.at("passed").get<bool>();
        t.independence_check.rationale = ic.value("rationale", "");
        t.regenerations = j.value("regenerations", 0);
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("task record: ") + e.what());
    }
    return t;
}

std::string make_task_id(const std::string& attribute_id, int ordinal) {
    return attribute_id + "-t" + std::to_string(ordinal);
}

std::string check_options(const std::vector<std::string>& options) {
    if (options.size() < 2 || options.size() > 5) return "need 2 to 5 options";
    std::set<std::string> seen;
    for (const auto& o : options) {
        const std::string norm = to_lower(trim(o));
        if (norm.empty()) return "empty option";
        if (!seen.insert(norm).second) return "duplicate option '" + o + "'";
        for (auto escape : kEscapeOptions) {
            if (norm.find(escape) != std::string::npos) return "escape option '" + o + "' not allowed";
        }
    }
    return {};
}

IndependenceCheck lexical_guard(const VqaTask& task, const BiasAttribute& attribute) {
    std::set<std::string> variant_tokens = content_tokens(task.prompt_pair.variant_a);
    for (auto& t : content_tokens(task.prompt_pair.variant_b)) variant_tokens.insert(t);

    auto overlap = [&](const std::string& text) -> std::string {
        for (const auto& t : content_tokens(text)) {
            if (variant_tokens.contains(t)) return t;
        }
        return {};
    };
    if (auto t = overlap(task.question); !t.empty()) {
        return {false, "question mentions variant token '" + t + "'"};
    }
    for (const auto& o : task.options) {
        if (auto t = overlap(o); !t.empty()) {
            return {false, "option '" + o + "' mentions variant token '" + t + "'"};
        }
    }
    const auto name_tokens = content_tokens(attribute.name);
    const auto question_tokens = content_tokens(task.question);
    if (!name_tokens.empty() &&
        std::includes(question_tokens.begin(), question_tokens.end(), name_tokens.begin(),
                      name_tokens.end())) {
        return {false, "question asks about the bias attribute itself"};
    }
    return {true, "lexical guard passed"};
}

namespace {

json attribute_prompt_json(const BiasAttribute& a) {
    return {{"name", a.name},
            {"description", a.description},
            {"category", std::string(to_string(a.category))}};
}

json task_prompt_json(const VqaTask& t) {
    return {{"question", t.question},
            {"options", t.options},
            {"target_attribute", t.target_attr_desc},
            {"variant_a", t.prompt_pair.variant_a},
            {"variant_b", t.prompt_pair.variant_b}};
}

}  // namespace

IndependenceCheck check_independence(const VqaTask& task, const BiasAttribute& attribute,
                                     Provider& llm, const PromptTemplates& templates,
                                     int max_reasks) {
    auto guard = lexical_guard(task, attribute);
    if (!guard.passed) return guard;

    ChatRequest req;
    req.purpose = "independence";
    req.temperature = kJudgeTemperature;
    req.max_tokens = 512;
    req.response_format = ResponseFormat::Structured;
    req.messages.push_back(
        {"user",
         render_placeholders(templates.independence,
                             {{"attribute_json", attribute_prompt_json(attribute).dump()},
                              {"task_json", task_prompt_json(task).dump()}}),
         {}});
    for (int attempt = 0;; ++attempt) {
        std::string raw;
        try {
            raw = llm.chat(req).text;
            json j = parse_structured_reply(raw);
            if (j.is_object() && j.contains("independent") && j["independent"].is_boolean()) {
                return {j["independent"].get<bool>(), j.value("rationale", "")};
            }
        } catch (const SchemaError& e) {
            raw = e.raw_reply();
        }
        if (attempt >= max_reasks) return {false, "independence judge reply unparseable"};
        req.messages.push_back({"assistant", raw, {}});
        req.messages.push_back(
            {"user", "Reply again with only {\"independent\": true|false, \"rationale\": \"...\"}.", {}});
    }
}

std::string question_mode(std::span<const VqaTask> tasks) {
    std::set<std::string> questions;
    for (const auto& t : tasks) questions.insert(t.question);
    if (questions.size() <= 1) return "shared";
    if (questions.size() == tasks.size()) return "distinct";
    return "mixed";
}

namespace {

/// One attempt: ask, parse, validate. Returns the task or the reason it failed.
std::variant<VqaTask, std::string> attempt_task(const BiasAttribute& attribute, int ordinal,
                                                const std::vector<std::string>& previous,
                                                const std::string& last_problem, int attempt,
                                                Provider& llm, Provider& judge,
                                                const PromptTemplates& templates,
                                                const TaskgenOptions& options) {
    ChatRequest req;
    req.purpose = "taskgen";
    req.temperature = options.temperature;
    req.max_tokens = 1024;
    req.response_format = ResponseFormat::Structured;
    json prev = previous;
    std::string prompt = render_placeholders(templates.taskgen,
                                             {{"attribute_json", attribute_prompt_json(attribute).dump()},
                                              {"ordinal", std::to_string(ordinal)},
                                              {"n_tasks", std::to_string(options.n_tasks)},
                                              {"previous_questions", prev.dump()}});
    if (attempt > 0) {
        // Regenerations must differ from the cached request of the failed attempt.
        prompt += "\nAttempt " + std::to_string(attempt + 1) +
                  ". The previous attempt was rejected: " + last_problem + "\n";
    }
    req.messages.push_back({"user", prompt, {}});

    json j;
    try {
        j = parse_structured_reply(llm.chat(req).text);
    } catch (const SchemaError& e) {
        return std::string("reply not JSON");
    }
    if (!j.is_object()) return std::string("reply is not an object");
    VqaTask t;
    t.attribute_id = attribute.id;
    t.ordinal = ordinal;
    t.task_id = make_task_id(attribute.id, ordinal);
    try {
        t.question = trim(j.at("question").get<std::string>());
        t.options = j.at("options").get<std::vector<std::string>>();
        for (auto& o : t.options) o = trim(o);
        t.target_attr_desc = j.value("target_attribute", "");
        t.prompt_pair = render_prompt_pair(j.at("template").get<std::string>(),
                                           j.at("variant_a").get<std::string>(),
                                           j.at("variant_b").get<std::string>());
    } catch (const json::exception& e) {
        return std::string("missing or mistyped field");
    } catch (const Error& e) {
        return std::string(e.what());
    }
    if (t.question.empty()) return std::string("empty question");
    if (auto problem = check_options(t.options); !problem.empty()) return problem;
    if (auto check = validate_prompt_pair(t.prompt_pair); !check.ok) return check.reason;
    t.independence_check = check_independence(t, attribute, judge, templates, options.max_reasks);
    if (!t.independence_check.passed) {
        return "independence check failed: " + t.independence_check.rationale;
    }
    return t;
}

}  // namespace

std::vector<VqaTask> generate_task_bundle(const BiasAttribute& attribute, Provider& llm,
                                          const PromptTemplates& templates,
                                          const TaskgenOptions& options, Provider* judge) {
    if (attribute.status != AttributeStatus::Approved) {
        throw PreconditionError("attribute " + attribute.id + " is not approved");
    }
    Provider& rubric = judge ? *judge : llm;
    std::vector<VqaTask> tasks;
    std::vector<std::string> previous;
    for (int ordinal = 1; ordinal <= options.n_tasks; ++ordinal) {
        std::string problem;
        bool done = false;
        for (int attempt = 0; attempt <= options.max_regenerations; ++attempt) {
            auto result = attempt_task(attribute, ordinal, previous, problem, attempt, llm, rubric,
                                       templates, options);
            if (auto* task = std::get_if<VqaTask>(&result)) {
                task->regenerations = attempt;
                previous.push_back(task->question);
                tasks.push_back(std::move(*task));
                done = true;
                break;
            }
            problem = std::get<std::string>(result);
            spdlog::info("attribute {} task {} attempt {} rejected: {}", attribute.id, ordinal,
                         attempt + 1, problem);
        }
        if (!done) throw GenerationExhausted(attribute.id);
    }
    return tasks;
}

TaskgenResult generate_tasks(std::span<const BiasAttribute> attributes, Provider& llm,
                             const PromptTemplates& templates, const TaskgenOptions& options,
                             Provider* judge) {
    using Bundle = std::optional<std::vector<VqaTask>>;
    auto bundles = parallel_map<Bundle>(
        attributes.size(), static_cast<std::size_t>(llm.config().max_in_flight),
        [&](std::size_t i) -> Bundle {
            try {
                return generate_task_bundle(attributes[i], llm, templates, options, judge);
            } catch (const GenerationExhausted& e) {
                spdlog::warn("{}", e.what());
                return std::nullopt;
            }
        });
    TaskgenResult out;
    for (std::size_t i = 0; i < attributes.size(); ++i) {
        if (!bundles[i]) {
            out.failed_attributes.push_back(attributes[i].id);
            continue;
        }
        out.question_modes[attributes[i].id] = question_mode(*bundles[i]);
        for (auto& t : *bundles[i]) out.tasks.push_back(std::move(t));
    }
    std::sort(out.tasks.begin(), out.tasks.end(), [](const VqaTask& a, const VqaTask& b) {
        return std::tie(a.attribute_id, a.ordinal) < std::tie(b.attribute_id, b.ordinal);
    });
    std::sort(out.failed_attributes.begin(), out.failed_attributes.end());
    return out;
}

}  // namespace bias_audit
