#include "bias_audit/miner.hpp"

#include <cmath>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

namespace bias_audit {

std::optional<CaptionFormat> parse_caption_format(std::string_view s) {
    if (s == "tsv") return CaptionFormat::Tsv;
    if (s == "jsonl") return CaptionFormat::Jsonl;
    return std::nullopt;
}

std::vector<Caption> ingest_captions(const fs::path& path, CaptionFormat format) {
    if (!fs::exists(path)) throw Error("caption file not found: " + path.string());
    const std::string data = read_file(path);
    std::vector<Caption> out;
    std::map<std::string, int> per_image;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < data.size()) {
        std::size_t nl = data.find('\n', pos);
        std::string line = data.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? data.size() : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;

        Caption c;
        if (format == CaptionFormat::Tsv) {
            auto tab = line.find('\t');
            if (tab == std::string::npos) throw ParseError(line_no, "expected image_id<TAB>caption");
            std::string first = trim(std::string_view(line).substr(0, tab));
            c.text = trim(std::string_view(line).substr(tab + 1));
            if (auto hash = first.find('#'); hash != std::string::npos) {
                c.image_id = first.substr(0, hash);
                c.caption_id = first;
            } else {
                c.image_id = first;
            }
        } else {
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object()) throw ParseError(line_no, "not a JSON object");
            if (!j.contains("text") || !j["text"].is_string()) {
                throw ParseError(line_no, "missing string field \"text\"");
            }
            if (!j.contains("image_id") || !j["image_id"].is_string()) {
                throw ParseError(line_no, "missing string field \"image_id\"");
            }
            c.image_id = j["image_id"].get<std::string>();
            c.text = trim(j["text"].get<std::string>());
            if (j.contains("caption_id") && j["caption_id"].is_string()) {
                c.caption_id = j["caption_id"].get<std::string>();
            }
        }
        if (c.image_id.empty()) throw ParseError(line_no, "empty image id");
        if (c.text.empty()) throw ParseError(line_no, "empty caption text");
        const int ordinal = per_image[c.image_id]++;
        if (c.caption_id.empty()) c.caption_id = c.image_id + "#" + std::to_string(ordinal);
        out.push_back(std::move(c));
    }
    if (out.empty()) throw EmptyFile("no captions in " + path.string());
    return out;
}

json to_json(const MinedCandidate& c) {
    return {{"name", c.name},
            {"description", c.description},
            {"category", std::string(to_string(c.proposed_category))},
            {"impact_score", c.impact_score},
            {"source_caption_ids", c.source_caption_ids}};
}

MinedCandidate candidate_from_json(const json& j) {
    MinedCandidate c;
    try {
        c.name = j.at("name").get<std::string>();
        c.description = j.value("description", "");
        auto cat = parse_category(j.at("category").get<std::string>());
        if (!cat) throw ParseError(0, "unknown category");
        c.proposed_category = *cat;
        c.impact_score = j.at("impact_score").get<int>();
        c.source_caption_ids = j.value("source_caption_ids", std::vector<std::string>{});
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("candidate: ") + e.what());
    }
    return c;
}

ParsedMiningReply parse_mining_reply(const std::string& reply,
                                     const std::vector<std::string>& batch_ids) {
    json j = parse_structured_reply(reply);
    if (!j.is_object() || !j.contains("attributes") || !j["attributes"].is_array()) {
        throw SchemaError("reply lacks an \"attributes\" array", reply);
    }
    const std::set<std::string> allowed(batch_ids.begin(), batch_ids.end());
    ParsedMiningReply out;
    std::size_t index = 0;
    for (const auto& item : j["attributes"]) {
        const std::string where = "item " + std::to_string(index++);
        if (!item.is_object()) {
            out.dropped.push_back(where + ": not an object");
            continue;
        }
        MinedCandidate c;
        if (!item.contains("name") || !item["name"].is_string() || trim(item["name"].get<std::string>()).empty()) {
            out.dropped.push_back(where + ": missing name");
            continue;
        }
        c.name = trim(item["name"].get<std::string>());
        if (split_whitespace(c.name).size() > kMaxCandidateNameTokens) {
            out.dropped.push_back(where + ": name longer than 8 tokens");
            continue;
        }
        c.description = item.contains("description") && item["description"].is_string()
                            ? trim(item["description"].get<std::string>())
                            : "";
        auto cat = item.contains("category") && item["category"].is_string()
                       ? parse_category_lenient(item["category"].get<std::string>())
                       : std::nullopt;
        if (!cat) {
            out.dropped.push_back(where + ": unknown category");
            continue;
        }
        c.proposed_category = *cat;
        const json& score = item.contains("score") ? item["score"] : item.value("impact_score", json());
        if (!score.is_number() || std::floor(score.get<double>()) != score.get<double>() ||
            score.get<double>() < 1 || score.get<double>() > 5) {
            out.dropped.push_back(where + ": score is not an integer in [1,5]");
            continue;
        }
        c.impact_score = static_cast<int>(score.get<double>());
        const json& ids = item.contains("caption_ids") ? item["caption_ids"]
                                                       : item.value("source_caption_ids", json());
        if (ids.is_array()) {
            for (const auto& id : ids) {
                if (id.is_string() && allowed.contains(id.get<std::string>())) {
                    c.source_caption_ids.push_back(id.get<std::string>());
                }
            }
        }
        if (c.source_caption_ids.empty()) {
            out.dropped.push_back(where + ": no caption id from this batch");
            continue;
        }
        out.candidates.push_back(std::move(c));
    }
    return out;
}

std::string render_mining_prompt(std::span<const Caption> batch, const PromptTemplates& templates) {
    std::string lines;
    for (const auto& c : batch) {
        // Keep each caption on one line so ids stay attached to their text.
        std::string text = c.text;
        for (char& ch : text) {
            if (ch == '\n' || ch == '\r') ch = ' ';
        }
        lines += "[" + c.caption_id + "] " + text + "\n";
    }
    if (!lines.empty()) lines.pop_back();
    return render_placeholders(templates.mine,
                               {{"captions", lines}, {"scale_rubric", templates.scale_rubric}});
}

std::vector<MinedCandidate> mine_batch(std::span<const Caption> batch, Provider& llm,
                                       const PromptTemplates& templates, const MinerOptions& options) {
    if (batch.size() > options.batch_size) {
        throw PreconditionError("mining batch of " + std::to_string(batch.size()) +
                                " exceeds the configured maximum " +
                                std::to_string(options.batch_size));
    }
    if (batch.empty()) return {};
    std::vector<std::string> ids;
    for (const auto& c : batch) ids.push_back(c.caption_id);

    ChatRequest req;
    req.purpose = "mine";
    req.temperature = options.temperature;
    req.max_tokens = 4096;
    req.response_format = ResponseFormat::Structured;
    req.messages.push_back({"user", render_mining_prompt(batch, templates), {}});

    for (int attempt = 0;; ++attempt) {
        std::string raw;
        std::string problem;
        try {
            raw = llm.chat(req).text;
            auto parsed = parse_mining_reply(raw, ids);
            for (const auto& reason : parsed.dropped) {
                spdlog::warn("mining batch starting at {}: dropped {}", ids.front(), reason);
            }
            return parsed.candidates;
        } catch (const SchemaError& e) {
            raw = e.raw_reply();
            problem = e.what();
        }
        if (attempt >= options.max_reasks) {
            throw SchemaError("mining reply still malformed after " + std::to_string(options.max_reasks) +
                                  " re-asks: " + problem,
                              raw);
        }
        spdlog::warn("mining batch starting at {}: {}; re-asking", ids.front(), problem);
        req.messages.push_back({"assistant", raw, {}});
        req.messages.push_back({"user",
                                "Your reply could not be used (" + problem +
                                    "). Reply again with only the JSON object in the required form.",
                                {}});
    }
}

std::vector<MinedCandidate> mine_attributes(std::span<const Caption> captions, Provider& llm,
                                            const PromptTemplates& templates,
                                            const MinerOptions& options) {
    const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
    const std::size_t n_batches = (captions.size() + bs - 1) / bs;
    auto per_batch = parallel_map<std::vector<MinedCandidate>>(
        n_batches, static_cast<std::size_t>(llm.config().max_in_flight), [&](std::size_t b) {
            const std::size_t begin = b * bs;
            const std::size_t len = std::min(bs, captions.size() - begin);
            return mine_batch(captions.subspan(begin, len), llm, templates, options);
        });
    std::vector<MinedCandidate> out;
    for (auto& batch : per_batch) {
        for (auto& c : batch) out.push_back(std::move(c));
    }
    return out;
}

ImpactSplit filter_by_impact(std::span<const MinedCandidate> candidates, int min_score) {
    ImpactSplit out;
    for (const auto& c : candidates) {
        (c.impact_score >= min_score ? out.kept : out.dropped).push_back(c);
    }
    return out;
}

std::vector<BiasAttribute> promote_candidates(std::span<const MinedCandidate> candidates,
                                              KnowledgeBase& kb) {
    std::vector<BiasAttribute> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates) {
        if (c.impact_score < 1 || c.impact_score > 5) {
            throw PreconditionError("candidate '" + c.name + "' has impact score out of [1,5]");
        }
        if (split_whitespace(c.name).size() > kMaxCandidateNameTokens) {
            throw PreconditionError("candidate name longer than 8 tokens: " + c.name);
        }
        BiasAttribute rec;
        rec.name = c.name;
        rec.description = c.description;
        rec.category = c.proposed_category;
        rec.impact_score = c.impact_score;
        rec.source_caption_ids = c.source_caption_ids;
        rec.status = AttributeStatus::Candidate;
        rec.id = kb.append(rec);
        out.push_back(*kb.get(rec.id));
    }
    return out;
}

std::size_t apply_impact_filter(KnowledgeBase& kb, int min_score) {
    std::size_t moved = 0;
    for (auto rec : kb.query(KbQuery{.status = std::set{AttributeStatus::Candidate}, .category = {}, .min_score = {}})) {
        if (rec.impact_score >= min_score) continue;
        rec.status = AttributeStatus::FilteredOut;
        kb.append(rec);
        ++moved;
    }
    return moved;
}

}  // namespace bias_audit
