#include "bias_audit/attribute_kb.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "bias_audit/errors.hpp"

namespace bias_audit {

namespace {

constexpr std::array<std::pair<AttributeCategory, std::string_view>, 5> kCategoryNames = {{
    {AttributeCategory::Demography, "Demography"},
    {AttributeCategory::Culture, "Culture"},
    {AttributeCategory::Geography, "Geography"},
    {AttributeCategory::Behavior, "Behavior"},
    {AttributeCategory::Aesthetic, "Aesthetic"},
}};

constexpr std::array<std::pair<AttributeCategory, std::string_view>, 5> kCategoryLongNames = {{
    {AttributeCategory::Demography, "demographic attributes"},
    {AttributeCategory::Culture, "cultural and historical contexts"},
    {AttributeCategory::Geography, "geographic and environmental settings"},
    {AttributeCategory::Behavior, "social roles and behavioral patterns"},
    {AttributeCategory::Aesthetic, "aesthetic, design, and object preferences"},
}};

constexpr std::array<std::pair<AttributeStatus, std::string_view>, 5> kStatusNames = {{
    {AttributeStatus::Candidate, "candidate"},
    {AttributeStatus::FilteredOut, "filtered_out"},
    {AttributeStatus::Approved, "approved"},
    {AttributeStatus::Rejected, "rejected"},
    {AttributeStatus::Merged, "merged"},
}};

const std::set<std::string> kKnownKeys = {"id",          "name",   "description",
                                          "category",    "impact_score", "source_caption_ids",
                                          "status",      "merged_into",  "created_at"};

}  // namespace

std::string_view to_string(AttributeCategory c) {
    for (const auto& [k, v] : kCategoryNames) {
        if (k == c) return v;
    }
    return "?";
}

std::optional<AttributeCategory> parse_category(std::string_view s) {
    for (const auto& [k, v] : kCategoryNames) {
        if (v == s) return k;
    }
    return std::nullopt;
}

std::optional<AttributeCategory> parse_category_lenient(std::string_view s) {
    const std::string lower = to_lower(trim(s));
    for (const auto& [k, v] : kCategoryNames) {
        if (to_lower(v) == lower) return k;
    }
    for (const auto& [k, v] : kCategoryLongNames) {
        if (lower == v || lower.starts_with(v)) return k;
    }
    return std::nullopt;
}

std::string_view to_string(AttributeStatus s) {
    for (const auto& [k, v] : kStatusNames) {
        if (k == s) return v;
    }
    return "?";
}

std::optional<AttributeStatus> parse_status(std::string_view s) {
    for (const auto& [k, v] : kStatusNames) {
        if (v == s) return k;
    }
    return std::nullopt;
}

bool is_legal_transition(AttributeStatus from, AttributeStatus to) {
    using S = AttributeStatus;
    switch (from) {
        case S::Candidate:
            return to == S::FilteredOut || to == S::Approved || to == S::Rejected || to == S::Merged;
        case S::Approved:
            return to == S::Rejected;
        case S::FilteredOut:
        case S::Rejected:
        case S::Merged:
            return false;
    }
    return false;
}

bool BiasAttribute::same_content(const BiasAttribute& o) const {
    return id == o.id && name == o.name && description == o.description &&
           category == o.category && impact_score == o.impact_score &&
           source_caption_ids == o.source_caption_ids && status == o.status &&
           merged_into == o.merged_into && extra == o.extra;
}

json to_json(const BiasAttribute& a) {
    json j = a.extra.is_object() ? a.extra : json::object();
    j["id"] = a.id;
    j["name"] = a.name;
    j["description"] = a.description;
    j["category"] = std::string(to_string(a.category));
    j["impact_score"] = a.impact_score;
    j["source_caption_ids"] = a.source_caption_ids;
    j["status"] = std::string(to_string(a.status));
    if (a.status == AttributeStatus::Merged) j["merged_into"] = a.merged_into;
    j["created_at"] = format_iso8601_ms(a.created_at_ms);
    return j;
}

BiasAttribute attribute_from_json(const json& j) {
    if (!j.is_object()) throw ParseError(0, "attribute record is not an object");
    BiasAttribute a;
    try {
        a.id = j.at("id").get<std::string>();
        a.name = j.at("name").get<std::string>();
        a.description = j.value("description", "");
        auto cat = parse_category(j.at("category").get<std::string>());
        if (!cat) throw ParseError(0, "unknown category " + j.at("category").dump());
        a.category = *cat;
        a.impact_score = j.at("impact_score").get<int>();
        a.source_caption_ids = j.value("source_caption_ids", std::vector<std::string>{});
        auto st = parse_status(j.at("status").get<std::string>());
        if (!st) throw ParseError(0, "unknown status " + j.at("status").dump());
        a.status = *st;
        a.merged_into = j.value("merged_into", "");
        if (j.contains("created_at")) a.created_at_ms = parse_iso8601_ms(j["created_at"]);
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("attribute record: ") + e.what());
    }
    for (const auto& [k, v] : j.items()) {
        if (!kKnownKeys.contains(k)) a.extra[k] = v;
    }
    return a;
}

void validate_attribute(const BiasAttribute& a) {
    if (a.impact_score < 1 || a.impact_score > 5) {
        throw PreconditionError("impact_score out of [1,5]: " + std::to_string(a.impact_score));
    }
    if (trim(a.name).empty()) throw PreconditionError("attribute name is empty");
    if ((a.status == AttributeStatus::Merged) != !a.merged_into.empty()) {
        throw PreconditionError("merged_into must be set exactly when status is merged");
    }
}

// ---------------------------------------------------------------------------
// KnowledgeBase

KnowledgeBase::KnowledgeBase() = default;

KnowledgeBase::~KnowledgeBase() {
    if (log_fd_ >= 0) ::close(log_fd_);
    if (lock_fd_ >= 0) {
        ::flock(lock_fd_, LOCK_UN);
        ::close(lock_fd_);
    }
}

KnowledgeBase::KnowledgeBase(KnowledgeBase&& o) noexcept { *this = std::move(o); }

KnowledgeBase& KnowledgeBase::operator=(KnowledgeBase&& o) noexcept {
    if (this == &o) return *this;
    if (log_fd_ >= 0) ::close(log_fd_);
    if (lock_fd_ >= 0) ::close(lock_fd_);
    path_ = std::move(o.path_);
    mode_ = o.mode_;
    lock_fd_ = std::exchange(o.lock_fd_, -1);
    log_fd_ = std::exchange(o.log_fd_, -1);
    log_ = std::move(o.log_);
    index_ = std::move(o.index_);
    last_stamp_ms_ = o.last_stamp_ms_;
    return *this;
}

KnowledgeBase KnowledgeBase::open(const fs::path& path, Mode mode) {
    KnowledgeBase kb;
    kb.path_ = path;
    kb.mode_ = mode;
    if (mode == Mode::ReadWrite) {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        fs::path lock_path = path;
        lock_path += ".lock";
        kb.lock_fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT, 0644);
        if (kb.lock_fd_ < 0) throw Error("cannot open lock file " + lock_path.string());
        if (::flock(kb.lock_fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(kb.lock_fd_);
            kb.lock_fd_ = -1;
            throw KbLocked("knowledge base is locked by another writer: " + path.string());
        }
        kb.log_fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (kb.log_fd_ < 0) throw Error("cannot open " + path.string());
    }
    std::lock_guard lock(kb.mu_);
    kb.load_locked();
    return kb;
}

void KnowledgeBase::load_locked() {
    log_.clear();
    index_.clear();
    last_stamp_ms_ = 0;
    if (path_.empty() || !fs::exists(path_)) return;
    std::size_t line = 0;
    for (const auto& row : read_jsonl(path_)) {
        ++line;
        BiasAttribute rec;
        try {
            rec = attribute_from_json(row);
        } catch (const ParseError& e) {
            throw ParseError(line, e.what());
        }
        apply_locked(rec, /*stamp=*/false);
        log_.push_back(rec);
    }
}

void KnowledgeBase::refresh() {
    std::lock_guard lock(mu_);
    load_locked();
}

std::string KnowledgeBase::fresh_id_locked() const {
    std::size_t n = index_.size() + 1;
    for (;;) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "attr-%06zu", n);
        if (!index_.contains(buf)) return buf;
        ++n;
    }
}

void KnowledgeBase::apply_locked(BiasAttribute& rec, bool stamp) {
    validate_attribute(rec);
    auto it = index_.find(rec.id);
    if (it == index_.end()) {
        if (rec.status != AttributeStatus::Candidate) {
            throw IllegalTransition("new record " + rec.id + " must start as candidate, got " +
                                    std::string(to_string(rec.status)));
        }
    } else {
        const BiasAttribute& prev = it->second;
        if (prev.status == rec.status) {
            if (prev.same_content(rec)) throw DuplicateId("record " + rec.id + " already present");
            throw IllegalTransition("record " + rec.id + ": " + std::string(to_string(prev.status)) +
                                    " -> " + std::string(to_string(rec.status)) +
                                    " is not a transition");
        }
        if (!is_legal_transition(prev.status, rec.status)) {
            throw IllegalTransition("record " + rec.id + ": " + std::string(to_string(prev.status)) +
                                    " -> " + std::string(to_string(rec.status)));
        }
    }
    if (rec.status == AttributeStatus::Merged) {
        if (rec.merged_into == rec.id) throw IllegalTransition("record cannot merge into itself");
        auto target = index_.find(rec.merged_into);
        if (target == index_.end()) {
            throw IllegalTransition("merge target " + rec.merged_into + " does not exist");
        }
        if (target->second.status == AttributeStatus::Merged) {
            throw IllegalTransition("merge target " + rec.merged_into + " is itself merged");
        }
    }
    if (stamp) {
        rec.created_at_ms = std::max(now_epoch_ms(), last_stamp_ms_);
    } else if (rec.created_at_ms < last_stamp_ms_) {
        throw ParseError(0, "created_at decreases at record " + rec.id);
    }
    last_stamp_ms_ = rec.created_at_ms;
    index_[rec.id] = rec;
}

std::string KnowledgeBase::append(BiasAttribute record) {
    std::lock_guard lock(mu_);
    if (mode_ == Mode::ReadOnly) throw PreconditionError("knowledge base opened read-only");
    if (record.id.empty()) record.id = fresh_id_locked();
    // Only this id's entry can change; keep it for rollback.
    std::optional<BiasAttribute> saved_entry;
    if (auto it = index_.find(record.id); it != index_.end()) saved_entry = it->second;
    auto saved_stamp = last_stamp_ms_;
    apply_locked(record, /*stamp=*/true);
    if (log_fd_ >= 0) {
        const std::string line = to_json(record).dump() + "\n";
        ssize_t w = ::write(log_fd_, line.data(), line.size());
        if (w != static_cast<ssize_t>(line.size())) {
            if (saved_entry) {
                index_[record.id] = std::move(*saved_entry);
            } else {
                index_.erase(record.id);
            }
            last_stamp_ms_ = saved_stamp;
            throw Error("short write to " + path_.string());
        }
        ::fdatasync(log_fd_);
    }
    log_.push_back(record);
    return record.id;
}

std::vector<BiasAttribute> KnowledgeBase::query(const KbQuery& q) const {
    std::lock_guard lock(mu_);
    std::vector<BiasAttribute> out;
    for (const auto& [id, rec] : index_) {
        if (q.status && !q.status->contains(rec.status)) continue;
        if (q.category && !q.category->contains(rec.category)) continue;
        if (q.min_score && rec.impact_score < *q.min_score) continue;
        out.push_back(rec);
    }
    return out;
}

std::optional<BiasAttribute> KnowledgeBase::get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::vector<BiasAttribute> KnowledgeBase::log() const {
    std::lock_guard lock(mu_);
    return log_;
}

std::size_t KnowledgeBase::distinct_ids() const {
    std::lock_guard lock(mu_);
    return index_.size();
}

std::size_t KnowledgeBase::log_size() const {
    std::lock_guard lock(mu_);
    return log_.size();
}

std::map<std::string, BiasAttribute> KnowledgeBase::replay(std::span<const BiasAttribute> log) {
    KnowledgeBase kb;
    std::lock_guard lock(kb.mu_);
    for (BiasAttribute rec : log) kb.apply_locked(rec, /*stamp=*/false);
    return kb.index_;
}

// ---------------------------------------------------------------------------
// Duplicate screening

std::set<std::string> name_token_set(std::string_view name) {
    std::set<std::string> out;
    for (auto& t : word_tokens(name)) {
        if (std::find(kDedupStopwords.begin(), kDedupStopwords.end(), t) == kDedupStopwords.end()) {
            out.insert(std::move(t));
        }
    }
    return out;
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 0.0;
    std::size_t inter = 0;
    for (const auto& t : a) inter += b.count(t);
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::pair<std::size_t, std::size_t>> duplicate_pairs(
    std::span<const BiasAttribute> records, double jaccard_min) {
    std::vector<std::set<std::string>> tokens;
    tokens.reserve(records.size());
    for (const auto& r : records) tokens.push_back(name_token_set(r.name));
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t j = i + 1; j < records.size(); ++j) {
            if (jaccard(tokens[i], tokens[j]) >= jaccard_min) out.emplace_back(i, j);
        }
    }
    return out;
}

std::vector<std::vector<std::string>> find_duplicates(std::span<const BiasAttribute> records,
                                                      double jaccard_min) {
    if (records.empty()) throw PreconditionError("find_duplicates needs at least one record");
    std::vector<std::size_t> parent(records.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (auto [i, j] : duplicate_pairs(records, jaccard_min)) parent[find(i)] = find(j);

    std::map<std::size_t, std::vector<std::string>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) groups[find(i)].push_back(records[i].id);
    std::vector<std::vector<std::string>> clusters;
    for (auto& [root, ids] : groups) {
        if (ids.size() < 2) continue;
        std::sort(ids.begin(), ids.end());
        clusters.push_back(std::move(ids));
    }
    std::sort(clusters.begin(), clusters.end());
    return clusters;
}

}  // namespace bias_audit
