#include "bias_audit/imagegen.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <map>
#include <set>
#include <tuple>

#include <spdlog/spdlog.h>

namespace bias_audit {

std::string_view to_string(Variant v) { return v == Variant::A ? "A" : "B"; }

std::optional<Variant> parse_variant(std::string_view s) {
    if (s == "A") return Variant::A;
    if (s == "B") return Variant::B;
    return std::nullopt;
}

namespace {

std::string_view verdict_name(const std::optional<Verdict>& v) {
    if (!v) return "unset";
    return *v == Verdict::Keep ? "keep" : "reject";
}

/// Single-writer append-only JSONL file; each line is durable once appended.
class JsonlAppender {
public:
    explicit JsonlAppender(const fs::path& path) {
        fs::create_directories(path.parent_path());
        fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) throw Error("cannot open " + path.string() + ": " + std::strerror(errno));
    }
    ~JsonlAppender() {
        if (fd_ >= 0) ::close(fd_);
    }
    JsonlAppender(const JsonlAppender&) = delete;
    JsonlAppender& operator=(const JsonlAppender&) = delete;

    void append(const json& row) {
        const std::string line = row.dump() + "\n";
        std::lock_guard lock(mu_);
        std::size_t off = 0;
        while (off < line.size()) {
            ssize_t n = ::write(fd_, line.data() + off, line.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw Error(std::string("checkpoint write failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
        ::fdatasync(fd_);
    }

private:
    int fd_ = -1;
    std::mutex mu_;
};

PairFilterResult filter_from_json(const json& j) {
    PairFilterResult r;
    r.task_id = j.value("task_id", "");
    r.pair_index = j.value("pair_index", 0);
    r.s_aa = j.at("s_aa").get<double>();
    r.s_ab = j.at("s_ab").get<double>();
    r.s_bb = j.at("s_bb").get<double>();
    r.s_ba = j.at("s_ba").get<double>();
    const std::string v = j.value("verdict", "unset");
    if (v == "keep") r.verdict = Verdict::Keep;
    if (v == "reject") r.verdict = Verdict::Reject;
    r.reason = j.value("reason", "");
    return r;
}

}  // namespace

json to_json(const PairFilterResult& r) {
    return {{"task_id", r.task_id},       {"pair_index", r.pair_index},
            {"s_aa", r.s_aa},             {"s_ab", r.s_ab},
            {"s_bb", r.s_bb},             {"s_ba", r.s_ba},
            {"verdict", verdict_name(r.verdict)}, {"reason", r.reason}};
}

json to_json(const GeneratedImage& g) {
    return {{"image_id", g.image_id},         {"task_id", g.task_id},
            {"variant", to_string(g.variant)}, {"pair_index", g.pair_index},
            {"attempt", g.attempt},           {"seed", g.seed},
            {"content_hash", g.content_hash}, {"path", g.path}};
}

GeneratedImage image_from_json(const json& j) {
    GeneratedImage g;
    try {
        g.image_id = j.at("image_id").get<std::string>();
        g.task_id = j.at("task_id").get<std::string>();
        auto v = parse_variant(j.at("variant").get<std::string>());
        if (!v) throw ParseError(0, "variant must be A or B");
        g.variant = *v;
        g.pair_index = j.at("pair_index").get<int>();
        g.attempt = j.value("attempt", 0);
        g.seed = j.at("seed").get<std::int64_t>();
        g.content_hash = j.at("content_hash").get<std::string>();
        g.path = j.at("path").get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("image record: ") + e.what());
    }
    return g;
}

// ---------------------------------------------------------------------------

ImageStore::ImageStore(fs::path root, std::string record_prefix)
    : root_(std::move(root)), record_prefix_(std::move(record_prefix)) {
    fs::create_directories(root_);
}

fs::path ImageStore::path_for(const std::string& hash) const {
    return root_ / hash.substr(0, 2) / (hash + ".png");
}

std::string ImageStore::record_path(const std::string& hash) const {
    return (fs::path(record_prefix_) / hash.substr(0, 2) / (hash + ".png")).generic_string();
}

std::string ImageStore::put(std::string_view png) {
    std::string hash = sha256_hex(png);
    const fs::path p = path_for(hash);
    if (!fs::exists(p)) {
        fs::create_directories(p.parent_path());
        write_file_atomic(p, png);
    }
    return hash;
}

std::string ImageStore::get(const std::string& hash) const { return read_file(path_for(hash)); }

std::int64_t pair_seed(std::int64_t base_seed, int n_pairs, int retry, int pair_index) {
    return base_seed + static_cast<std::int64_t>(n_pairs) * retry + pair_index;
}

std::int64_t task_base_seed(std::int64_t run_seed, std::size_t task_index, int n_pairs, int max_retries) {
    return run_seed + static_cast<std::int64_t>(task_index) * n_pairs * (max_retries + 1);
}

std::string make_image_id(const std::string& task_id, int pair_index, int attempt, Variant v) {
    return task_id + "-p" + std::to_string(pair_index) + "-r" + std::to_string(attempt) + "-" +
           std::string(to_string(v));
}

std::pair<GeneratedImage, GeneratedImage> generate_pair(const VqaTask& task, Provider& generator,
                                                        ImageStore& store, int pair_index, int attempt,
                                                        std::int64_t seed, ImageSize size) {
    auto one = [&](Variant v) {
        const std::string& prompt =
            v == Variant::A ? task.prompt_pair.rendered_a : task.prompt_pair.rendered_b;
        const std::string png = generator.generate_image(prompt, seed, size.width, size.height);
        GeneratedImage g;
        g.image_id = make_image_id(task.task_id, pair_index, attempt, v);
        g.task_id = task.task_id;
        g.variant = v;
        g.pair_index = pair_index;
        g.attempt = attempt;
        g.seed = seed;
        g.content_hash = store.put(png);
        g.path = store.record_path(g.content_hash);
        return g;
    };
    auto a = one(Variant::A);
    auto b = one(Variant::B);
    return {std::move(a), std::move(b)};
}

std::vector<GeneratedImage> generate_pairs(const VqaTask& task, Provider& generator, ImageStore& store,
                                           int n_pairs, std::int64_t base_seed, ImageSize size) {
    if (n_pairs < 1) throw PreconditionError("n_pairs must be at least 1");
    std::vector<GeneratedImage> out;
    out.reserve(2 * static_cast<std::size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i) {
        auto [a, b] = generate_pair(task, generator, store, i, 0, pair_seed(base_seed, n_pairs, 0, i), size);
        out.push_back(std::move(a));
        out.push_back(std::move(b));
    }
    return out;
}

PairFilterResult score_pair(std::string_view png_a, std::string_view png_b, const std::string& prompt_a,
                            const std::string& prompt_b, Provider& scorer) {
    PairFilterResult r;
    r.s_aa = scorer.score_image_text(png_a, prompt_a);
    r.s_ab = scorer.score_image_text(png_a, prompt_b);
    r.s_bb = scorer.score_image_text(png_b, prompt_b);
    r.s_ba = scorer.score_image_text(png_b, prompt_a);
    return r;
}

PairFilterResult score_pair(const GeneratedImage& img_a, const GeneratedImage& img_b,
                            const std::string& prompt_a, const std::string& prompt_b, Provider& scorer,
                            const ImageStore& store) {
    auto r = score_pair(store.get(img_a.content_hash), store.get(img_b.content_hash), prompt_a, prompt_b,
                        scorer);
    r.task_id = img_a.task_id;
    r.pair_index = img_a.pair_index;
    return r;
}

PairFilterResult filter_pair(PairFilterResult result, double threshold) {
    const std::string t = format_double(threshold);
    result.reason.clear();
    if (!(result.s_aa > threshold)) {
        result.reason = "s_aa ≤ " + t;
    } else if (!(result.s_bb > threshold)) {
        result.reason = "s_bb ≤ " + t;
    } else if (!(result.s_aa >= result.s_ab) || !(result.s_bb >= result.s_ba)) {
        result.reason = "mismatched prompt preferred";
    }
    result.verdict = result.reason.empty() ? Verdict::Keep : Verdict::Reject;
    return result;
}

// ---------------------------------------------------------------------------

json to_json(const PairOutcome& o) {
    json images = json::array();
    for (const auto& g : o.images) images.push_back(to_json(g));
    json filters = json::array();
    for (const auto& f : o.filters) filters.push_back(to_json(f));
    return {{"task_id", o.task_id},     {"pair_index", o.pair_index}, {"retries", o.retries},
            {"unfillable", o.unfillable}, {"images", images},         {"filters", filters},
            {"attempt_notes", o.attempt_notes}};
}

PairOutcome pair_outcome_from_json(const json& j) {
    PairOutcome o;
    try {
        o.task_id = j.at("task_id").get<std::string>();
        o.pair_index = j.at("pair_index").get<int>();
        o.retries = j.at("retries").get<int>();
        o.unfillable = j.at("unfillable").get<bool>();
        for (const auto& g : j.at("images")) o.images.push_back(image_from_json(g));
        for (const auto& f : j.at("filters")) o.filters.push_back(filter_from_json(f));
        o.attempt_notes = j.at("attempt_notes").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("pair outcome: ") + e.what());
    }
    return o;
}

PairOutcome fill_pair(const VqaTask& task, int pair_index, Provider& generator, Provider& scorer,
                      ImageStore& store, const ImagegenOptions& options, std::int64_t base_seed,
                      int first_retry) {
    PairOutcome out;
    out.task_id = task.task_id;
    out.pair_index = pair_index;
    for (int retry = first_retry; retry <= options.max_retries; ++retry) {
        const std::int64_t seed = pair_seed(base_seed, options.n_pairs, retry, pair_index);
        std::pair<GeneratedImage, GeneratedImage> pair;
        PairFilterResult scores;
        try {
            pair = generate_pair(task, generator, store, pair_index, retry, seed, options.size);
            scores = score_pair(pair.first, pair.second, task.prompt_pair.rendered_a,
                                task.prompt_pair.rendered_b, scorer, store);
        } catch (const ContentRefused& e) {
            out.attempt_notes.push_back(std::string("refused: ") + e.what());
            spdlog::info("{} pair {} attempt {} refused: {}", task.task_id, pair_index, retry, e.what());
            continue;
        }
        auto verdict = filter_pair(scores, options.threshold);
        out.images.push_back(pair.first);
        out.images.push_back(pair.second);
        out.filters.push_back(verdict);
        if (verdict.verdict == Verdict::Keep) {
            out.attempt_notes.push_back("keep");
            out.retries = retry;
            return out;
        }
        out.attempt_notes.push_back(verdict.reason);
    }
    out.unfillable = true;
    out.retries = options.max_retries;
    spdlog::warn("{} pair {} unfillable after {} retries", task.task_id, pair_index, options.max_retries);
    return out;
}

std::vector<PairOutcome> regenerate_rejected(const VqaTask& task, std::span<const int> rejected_pairs,
                                             Provider& generator, Provider& scorer, ImageStore& store,
                                             const ImagegenOptions& options, std::int64_t base_seed) {
    std::vector<PairOutcome> out;
    for (int p : rejected_pairs) {
        out.push_back(fill_pair(task, p, generator, scorer, store, options, base_seed, 1));
    }
    return out;
}

std::vector<json> manifest_rows(const PairOutcome& o) {
    std::map<int, const PairFilterResult*> filter_by_attempt;
    std::size_t f = 0;
    // Images come in (A, B) pairs, one filter result per pair, in attempt order.
    for (std::size_t i = 0; i + 1 < o.images.size(); i += 2) {
        if (f < o.filters.size()) filter_by_attempt[o.images[i].attempt] = &o.filters[f++];
    }
    std::vector<json> rows;
    for (const auto& g : o.images) {
        json row = to_json(g);
        const PairFilterResult* fr = filter_by_attempt.count(g.attempt) ? filter_by_attempt[g.attempt] : nullptr;
        if (fr) {
            row["filter"] = {{"s_aa", fr->s_aa}, {"s_ab", fr->s_ab}, {"s_bb", fr->s_bb}, {"s_ba", fr->s_ba},
                             {"verdict", verdict_name(fr->verdict)}, {"reason", fr->reason}};
        }
        row["retained"] = fr != nullptr && fr->verdict == Verdict::Keep;
        rows.push_back(std::move(row));
    }
    return rows;
}

ImagesStageResult run_images_stage(std::span<const VqaTask> tasks, Provider& generator, Provider& scorer,
                                   const fs::path& run_dir, const ImagegenOptions& options,
                                   std::int64_t run_seed) {
    if (options.n_pairs < 1) throw PreconditionError("n_pairs must be at least 1");
    const fs::path images_dir = run_dir / "images";
    const fs::path progress_path = images_dir / "progress.jsonl";
    ImageStore store(images_dir / "store");

    using Slot = std::pair<std::string, int>;
    std::map<Slot, PairOutcome> done;
    if (fs::exists(progress_path)) {
        for (const auto& row : read_jsonl(progress_path)) {
            auto o = pair_outcome_from_json(row);
            done[{o.task_id, o.pair_index}] = std::move(o);
        }
    }

    // Seeds depend on the task's position in id order, not on input order.
    std::vector<const VqaTask*> ordered;
    for (const auto& t : tasks) ordered.push_back(&t);
    std::sort(ordered.begin(), ordered.end(),
              [](const VqaTask* a, const VqaTask* b) { return a->task_id < b->task_id; });

    struct Todo {
        const VqaTask* task;
        std::size_t task_index;
        int pair_index;
    };
    std::vector<Todo> todo;
    ImagesStageResult result;
    for (std::size_t ti = 0; ti < ordered.size(); ++ti) {
        for (int p = 0; p < options.n_pairs; ++p) {
            if (done.count({ordered[ti]->task_id, p})) {
                ++result.resumed_pairs;
            } else {
                todo.push_back({ordered[ti], ti, p});
            }
        }
    }
    if (result.resumed_pairs > 0) {
        spdlog::info("images: resuming with {} pair slots already done, {} to go", result.resumed_pairs,
                     todo.size());
    }

    JsonlAppender progress(progress_path);
    std::mutex done_mu;
    parallel_for(todo.size(), static_cast<std::size_t>(std::max(1, generator.config().max_in_flight)),
                 [&](std::size_t k) {
                     const Todo& t = todo[k];
                     const auto base = task_base_seed(run_seed, t.task_index, options.n_pairs,
                                                      options.max_retries);
                     auto outcome = fill_pair(*t.task, t.pair_index, generator, scorer, store, options, base);
                     progress.append(to_json(outcome));
                     std::lock_guard lock(done_mu);
                     done[{outcome.task_id, outcome.pair_index}] = std::move(outcome);
                 });
    result.generated_pairs = todo.size();

    // Only slots of the current task list make it into the manifest.
    std::set<std::string> wanted;
    for (const auto* t : ordered) wanted.insert(t->task_id);
    for (auto& [slot, outcome] : done) {
        if (!wanted.count(slot.first) || slot.second >= options.n_pairs) continue;
        for (auto& row : manifest_rows(outcome)) result.manifest.push_back(std::move(row));
        result.outcomes.push_back(outcome);
    }
    std::sort(result.manifest.begin(), result.manifest.end(), [](const json& a, const json& b) {
        return a["image_id"].get<std::string>() < b["image_id"].get<std::string>();
    });
    return result;
}

std::vector<ManifestViolation> audit_manifest(std::span<const json> rows, const fs::path& run_dir,
                                              double threshold) {
    std::vector<ManifestViolation> out;
    std::set<std::tuple<std::string, std::string, int>> seen;
    for (const auto& row : rows) {
        const std::string id = row.value("image_id", "?");
        if (!row.value("retained", false)) continue;
        if (!row.contains("filter")) {
            out.push_back({id, "retained without filter scores"});
            continue;
        }
        PairFilterResult r = filter_from_json(row["filter"]);
        auto rechecked = filter_pair(r, threshold);
        if (rechecked.verdict != Verdict::Keep) {
            out.push_back({id, "retained pair fails filter: " + rechecked.reason});
        }
        const fs::path p = run_dir / row.value("path", "");
        const std::string hash = row.value("content_hash", "");
        if (!fs::exists(p)) {
            out.push_back({id, "image file missing"});
        } else if (file_digest(p) != hash) {
            out.push_back({id, "content hash does not match file bytes"});
        }
        auto key = std::make_tuple(row.value("task_id", ""), row.value("variant", ""), row.value("pair_index", -1));
        if (!seen.insert(key).second) out.push_back({id, "duplicate (task_id, variant, pair_index)"});
    }
    return out;
}

std::vector<GeneratedImage> retained_images(std::span<const json> rows) {
    std::vector<GeneratedImage> out;
    for (const auto& row : rows) {
        if (row.value("retained", false)) out.push_back(image_from_json(row));
    }
    return out;
}

}  // namespace bias_audit
