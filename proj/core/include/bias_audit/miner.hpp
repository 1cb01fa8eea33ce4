#pragma once

#include <span>
#include <string>
#include <vector>

#include "bias_audit/attribute_kb.hpp"
#include "bias_audit/prompts.hpp"
#include "bias_audit/providers.hpp"

namespace bias_audit {

struct Caption {
    std::string caption_id;
    std::string image_id;
    std::string text;
};

enum class CaptionFormat { Tsv, Jsonl };
std::optional<CaptionFormat> parse_caption_format(std::string_view s);

/// Reads captions. TSV rows are `image_id<TAB>caption`; a Flickr30k-style
/// `image#k` first column is split into image id and caption id. Missing
/// caption ids become `image_id#k` with k counting that image's rows from 0.
/// Throws EmptyFile or ParseError (with the 1-based line number).
std::vector<Caption> ingest_captions(const fs::path& path, CaptionFormat format);

struct MinedCandidate {
    std::string name;
    std::string description;
    AttributeCategory proposed_category = AttributeCategory::Demography;
    int impact_score = 1;
    std::vector<std::string> source_caption_ids;
};

inline constexpr std::size_t kMaxCandidateNameTokens = 8;

json to_json(const MinedCandidate& c);
MinedCandidate candidate_from_json(const json& j);

struct MinerOptions {
    std::size_t batch_size = 20;
    int max_reasks = 2;
    double temperature = kCreativeTemperature;
};

struct ParsedMiningReply {
    std::vector<MinedCandidate> candidates;
    std::vector<std::string> dropped;  // one reason per dropped item
};

/// Parses a structured mining reply. Items with bad fields, or with no caption
/// id from `batch_ids`, are dropped with a reason. Throws SchemaError when the
/// reply as a whole has the wrong shape.
ParsedMiningReply parse_mining_reply(const std::string& reply,
                                     const std::vector<std::string>& batch_ids);

/// Renders the user prompt for one batch.
std::string render_mining_prompt(std::span<const Caption> batch, const PromptTemplates& templates);

/// One mining request for at most options.batch_size captions, with up to
/// options.max_reasks re-asks on schema violations.
std::vector<MinedCandidate> mine_batch(std::span<const Caption> batch, Provider& llm,
                                       const PromptTemplates& templates, const MinerOptions& options = {});

/// Splits captions into batches, mines them concurrently up to the provider's
/// in-flight limit and concatenates results in batch order.
std::vector<MinedCandidate> mine_attributes(std::span<const Caption> captions, Provider& llm,
                                            const PromptTemplates& templates,
                                            const MinerOptions& options = {});

struct ImpactSplit {
    std::vector<MinedCandidate> kept;
    std::vector<MinedCandidate> dropped;
};

/// kept: impact_score >= min_score, dropped: the rest; both in input order.
ImpactSplit filter_by_impact(std::span<const MinedCandidate> candidates, int min_score = 4);

/// Appends one candidate-status record per input and returns the stored records.
std::vector<BiasAttribute> promote_candidates(std::span<const MinedCandidate> candidates,
                                              KnowledgeBase& kb);

/// Moves every candidate-status record scored below min_score to filtered_out.
/// Returns how many records moved.
std::size_t apply_impact_filter(KnowledgeBase& kb, int min_score = 4);

}  // namespace bias_audit
