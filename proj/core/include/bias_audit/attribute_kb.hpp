#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bias_audit/errors.hpp"
#include "bias_audit/util.hpp"

namespace bias_audit {

/// The five broad categories bias attributes are grouped into. Serialized
/// names are the short forms used throughout reports.
enum class AttributeCategory { Demography, Culture, Geography, Behavior, Aesthetic };

inline constexpr std::array<AttributeCategory, 5> kAllCategories = {
    AttributeCategory::Demography, AttributeCategory::Culture, AttributeCategory::Geography,
    AttributeCategory::Behavior, AttributeCategory::Aesthetic};

std::string_view to_string(AttributeCategory c);
/// Exact match on the serialized name.
std::optional<AttributeCategory> parse_category(std::string_view s);
/// Case-insensitive; also accepts the long form ("Cultural and Historical Contexts").
std::optional<AttributeCategory> parse_category_lenient(std::string_view s);

enum class AttributeStatus { Candidate, FilteredOut, Approved, Rejected, Merged };

std::string_view to_string(AttributeStatus s);
std::optional<AttributeStatus> parse_status(std::string_view s);

/// candidate -> {filtered_out, approved, rejected, merged}; approved -> rejected.
bool is_legal_transition(AttributeStatus from, AttributeStatus to);

struct BiasAttribute {
    std::string id;
    std::string name;
    std::string description;
    AttributeCategory category = AttributeCategory::Demography;
    int impact_score = 1;
    std::vector<std::string> source_caption_ids;
    AttributeStatus status = AttributeStatus::Candidate;
    std::string merged_into;  // set iff status == Merged
    std::int64_t created_at_ms = 0;
    json extra = json::object();  // unknown keys from the log, carried across revisions

    /// Content equality ignoring created_at.
    bool same_content(const BiasAttribute& other) const;
};

json to_json(const BiasAttribute& a);
/// Throws ParseError(0, ...) on missing or mistyped fields.
BiasAttribute attribute_from_json(const json& j);

/// Throws PreconditionError when a record breaks its field invariants.
void validate_attribute(const BiasAttribute& a);

struct KbQuery {
    std::optional<std::set<AttributeStatus>> status;
    std::optional<std::set<AttributeCategory>> category;
    std::optional<int> min_score;
};

/// Append-only log of attribute revisions plus an index of the latest revision
/// per id. Writers hold an exclusive lock on `<path>.lock`; read-only handles
/// see the last fully written line at open/refresh time.
class KnowledgeBase {
public:
    enum class Mode { ReadOnly, ReadWrite };

    /// In-memory knowledge base with no backing file.
    KnowledgeBase();
    ~KnowledgeBase();
    KnowledgeBase(KnowledgeBase&&) noexcept;
    KnowledgeBase& operator=(KnowledgeBase&&) noexcept;
    KnowledgeBase(const KnowledgeBase&) = delete;
    KnowledgeBase& operator=(const KnowledgeBase&) = delete;

    /// Throws KbLocked when another writer holds the file.
    static KnowledgeBase open(const fs::path& path, Mode mode = Mode::ReadWrite);

    /// Appends a revision and returns its id. An empty id gets a fresh one.
    /// Throws IllegalTransition or DuplicateId as described on is_legal_transition.
    std::string append(BiasAttribute record);

    std::vector<BiasAttribute> query(const KbQuery& q = {}) const;
    std::optional<BiasAttribute> get(const std::string& id) const;
    std::vector<BiasAttribute> log() const;
    std::size_t distinct_ids() const;
    std::size_t log_size() const;

    /// Re-reads the backing file (read-only handles).
    void refresh();

    const fs::path& path() const { return path_; }
    bool writable() const { return mode_ == Mode::ReadWrite; }

    /// Builds the latest-revision index from a log, applying the same
    /// transition rules as append.
    static std::map<std::string, BiasAttribute> replay(std::span<const BiasAttribute> log);

private:
    void apply_locked(BiasAttribute& record, bool stamp);
    void load_locked();
    std::string fresh_id_locked() const;

    fs::path path_;
    Mode mode_ = Mode::ReadWrite;
    int lock_fd_ = -1;
    int log_fd_ = -1;
    mutable std::mutex mu_;
    std::vector<BiasAttribute> log_;
    std::map<std::string, BiasAttribute> index_;
    std::int64_t last_stamp_ms_ = 0;
};

/// Stopwords dropped before name-token comparison.
inline constexpr std::array<std::string_view, 6> kDedupStopwords = {"the", "of", "a", "an", "in",
                                                                     "for"};

std::set<std::string> name_token_set(std::string_view name);
double jaccard(const std::set<std::string>& a, const std::set<std::string>& b);

/// Pairs (by index into `records`) whose name-token Jaccard is >= jaccard_min.
std::vector<std::pair<std::size_t, std::size_t>> duplicate_pairs(
    std::span<const BiasAttribute> records, double jaccard_min = 0.8);

/// Connected components of duplicate_pairs as id lists; singletons omitted.
/// Each cluster is sorted, clusters are ordered by their first id.
std::vector<std::vector<std::string>> find_duplicates(std::span<const BiasAttribute> records,
                                                      double jaccard_min = 0.8);

}  // namespace bias_audit
