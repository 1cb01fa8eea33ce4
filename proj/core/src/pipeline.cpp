#include "bias_audit/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdio>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

#include "bias_audit/miner.hpp"
#include "bias_audit/report.hpp"
#include "bias_audit/stubs.hpp"

namespace bias_audit {

namespace {

constexpr std::array<std::string_view, 6> kStageNames = {"mine", "curate", "tasks", "images", "eval", "report"};
constexpr std::array<std::string_view, 4> kStatusNames = {"pending", "running", "complete", "failed"};

std::string now_iso() { return format_iso8601_ms(now_epoch_ms()); }

std::string fresh_run_id() {
    std::random_device rd;
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06x", static_cast<unsigned>(rd() & 0xffffff));
    std::string stamp = format_iso8601_ms(now_epoch_ms()).substr(0, 19);
    std::erase(stamp, '-');
    std::erase(stamp, ':');
    return "run-" + stamp + "-" + buf;
}

void write_json_file(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    write_file_atomic(p, j.dump(2) + "\n");
}

template <typename T>
std::vector<json> to_rows(const std::vector<T>& items) {
    std::vector<json> rows;
    rows.reserve(items.size());
    for (const auto& x : items) rows.push_back(to_json(x));
    return rows;
}

void write_rows(const fs::path& p, const std::vector<json>& rows) {
    fs::create_directories(p.parent_path());
    write_jsonl_atomic(p, rows);
}

/// Stages whose outputs a stage reads.
std::vector<Stage> consumed(Stage s) {
    switch (s) {
        case Stage::Mine: return {};
        case Stage::Curate: return {Stage::Mine};
        case Stage::Tasks: return {Stage::Curate};
        case Stage::Images: return {Stage::Tasks};
        case Stage::Eval: return {Stage::Images, Stage::Tasks};
        case Stage::Report: return {Stage::Eval};
    }
    return {};
}

}  // namespace

std::string_view to_string(Stage s) { return kStageNames[static_cast<std::size_t>(s)]; }

std::optional<Stage> parse_stage(std::string_view s) {
    for (std::size_t i = 0; i < kStageNames.size(); ++i) {
        if (kStageNames[i] == s) return kAllStages[i];
    }
    return std::nullopt;
}

std::optional<Stage> predecessor(Stage s) {
    if (s == Stage::Mine) return std::nullopt;
    return static_cast<Stage>(static_cast<int>(s) - 1);
}

std::string_view to_string(StageStatus s) { return kStatusNames[static_cast<std::size_t>(s)]; }

std::optional<StageStatus> parse_stage_status(std::string_view s) {
    for (std::size_t i = 0; i < kStatusNames.size(); ++i) {
        if (kStatusNames[i] == s) return static_cast<StageStatus>(i);
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------

json RunManifest::to_json() const {
    json stages_json = json::object();
    for (auto s : kAllStages) {
        const auto& c = at(s);
        stages_json[std::string(bias_audit::to_string(s))] = {
            {"status", bias_audit::to_string(c.status)}, {"started_at", c.started_at},
            {"finished_at", c.finished_at},             {"input_digest", c.input_digest},
            {"output_digest", c.output_digest},         {"detail", c.detail}};
    }
    return {{"run_id", run_id},
            {"config_digest", config_digest},
            {"templates_digest", templates_digest},
            {"seeds", seeds},
            {"provider_versions", provider_versions},
            {"stages", stages_json}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    try {
        m.run_id = j.at("run_id").get<std::string>();
        m.config_digest = j.at("config_digest").get<std::string>();
        m.templates_digest = j.value("templates_digest", "");
        m.seeds = j.value("seeds", json::object());
        m.provider_versions = j.value("provider_versions", json::object());
        for (const auto& [name, c] : j.at("stages").items()) {
            auto s = parse_stage(name);
            auto st = parse_stage_status(c.at("status").get<std::string>());
            if (!s || !st) throw ParseError(0, "bad stage entry " + name);
            StageCheckpoint cp;
            cp.status = *st;
            cp.started_at = c.value("started_at", "");
            cp.finished_at = c.value("finished_at", "");
            cp.input_digest = c.value("input_digest", "");
            cp.output_digest = c.value("output_digest", "");
            cp.detail = c.value("detail", json::object());
            m.stages[*s] = cp;
        }
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("run manifest: ") + e.what());
    }
    return m;
}

const StageCheckpoint& RunManifest::at(Stage s) const {
    static const StageCheckpoint kPending;
    auto it = stages.find(s);
    return it == stages.end() ? kPending : it->second;
}

// ---------------------------------------------------------------------------

std::optional<FileLock> FileLock::try_acquire(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd < 0) throw Error("cannot open lock file " + path.string());
    if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd);
        return std::nullopt;
    }
    return FileLock(fd);
}

FileLock::FileLock(FileLock&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}

FileLock& FileLock::operator=(FileLock&& other) noexcept {
    if (this != &other) {
        if (fd_ >= 0) ::close(fd_);
        fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
}

FileLock::~FileLock() {
    if (fd_ >= 0) ::close(fd_);
}

// ---------------------------------------------------------------------------

ProviderRegistry build_providers(const RunConfig& cfg, const fs::path& cache_dir, std::shared_ptr<Clock> clock) {
    ProviderRegistry reg;
    auto cache = std::make_shared<ResponseCache>(cache_dir);
    if (!clock) clock = std::make_shared<SystemClock>();
    for (const auto& [id, pc] : cfg.providers) {
        ProviderRuntime rt;
        rt.clock = clock;
        rt.cache = cache;
        reg.add(std::make_shared<Provider>(pc, make_backend(pc, cfg.stub), rt));
    }
    return reg;
}

std::vector<VqaTask> load_tasks(const fs::path& path) {
    std::vector<VqaTask> out;
    for (const auto& row : read_jsonl(path)) out.push_back(task_from_json(row));
    return out;
}

std::size_t approve_all_candidates(KnowledgeBase& kb) {
    std::size_t n = 0;
    for (auto rec : kb.query(KbQuery{.status = std::set{AttributeStatus::Candidate}, .category = {}, .min_score = {}})) {
        rec.status = AttributeStatus::Approved;
        kb.append(rec);
        ++n;
    }
    return n;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const ProviderError*>(&e)) return kExitProvider;
    if (dynamic_cast<const Error*>(&e)) return kExitPrecondition;
    return 1;
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(RunConfig config, fs::path run_dir, RunOptions options)
    : config_(std::move(config)), layout_{std::move(run_dir)}, options_(std::move(options)) {
    fs::create_directories(layout_.root);
    kb_path_ = options_.kb_path.empty() ? layout_.root / "kb.jsonl" : options_.kb_path;
    lock_ = FileLock::try_acquire(layout_.lock());
    if (!lock_) throw RunLocked("run directory is in use by another process: " + layout_.root.string());

    const std::string cfg_digest = config_.digest();
    if (fs::exists(layout_.manifest())) {
        json j = json::parse(read_file(layout_.manifest()), nullptr, false);
        if (j.is_discarded()) throw ParseError(0, "run manifest is not valid JSON: " + layout_.manifest().string());
        manifest_ = RunManifest::from_json(j);
        if (manifest_.config_digest != cfg_digest) {
            if (!options_.force) {
                throw DigestMismatch("configuration changed since this run started; use --force to continue");
            }
            spdlog::warn("configuration changed since the run started; continuing because of --force");
        }
    } else {
        manifest_.run_id = fresh_run_id();
        for (auto s : kAllStages) manifest_.stages[s] = {};
    }
    manifest_.config_digest = cfg_digest;
    manifest_.templates_digest = templates().digest();
    manifest_.seeds["run_seed"] = seed();
    for (const auto& [id, pc] : config_.providers) {
        manifest_.provider_versions[id] = {{"kind", to_string(pc.kind)}, {"model", pc.model}, {"base_url", pc.base_url}};
    }
    save();
}

std::int64_t Pipeline::seed() const { return options_.seed.value_or(config_.seed); }

std::vector<std::string> Pipeline::models() const {
    return options_.models.empty() ? config_.roles.models : options_.models;
}

PromptTemplates Pipeline::templates() const {
    if (config_.templates_dir.empty()) return PromptTemplates::defaults();
    return PromptTemplates::load(resolve_path(config_, config_.templates_dir));
}

ProviderRegistry& Pipeline::providers() {
    if (!providers_) {
        fs::path cache = config_.cache_dir.empty() ? layout_.cache() : fs::path(config_.cache_dir);
        if (cache.is_relative()) cache = layout_.root / cache;
        providers_ = std::make_unique<ProviderRegistry>(build_providers(config_, cache));
    }
    return *providers_;
}

void Pipeline::save() { write_json_file(layout_.manifest(), manifest_.to_json()); }

std::string Pipeline::output_digest(Stage s) const {
    switch (s) {
        case Stage::Mine: return files_digest({layout_.candidates(), layout_.mine_summary()});
        case Stage::Curate: return file_digest(kb_path_);
        case Stage::Tasks: return file_digest(layout_.tasks());
        case Stage::Images: return file_digest(layout_.image_manifest());
        case Stage::Eval:
            return files_digest({layout_.metrics_json(), layout_.metrics_csv(), layout_.verdicts(), layout_.responses()});
        case Stage::Report: return files_digest({layout_.report_md(), layout_.report_csv(), layout_.report_json()});
    }
    return {};
}

std::string Pipeline::input_digest(Stage s) const {
    std::string acc = manifest_.config_digest + "\n" + manifest_.templates_digest + "\n" + std::to_string(seed());
    if (s == Stage::Mine && !config_.captions.empty()) {
        acc += "\n" + file_digest(resolve_path(config_, config_.captions));
    }
    if (s == Stage::Eval) {
        for (const auto& m : models()) acc += "\nmodel:" + m;
    }
    for (auto producer : consumed(s)) acc += "\n" + output_digest(producer);
    return sha256_hex(acc);
}

const StageCheckpoint& Pipeline::run_stage(Stage s) {
    if (auto pred = predecessor(s)) {
        if (manifest_.at(*pred).status != StageStatus::Complete) {
            if (!options_.force) {
                throw PredecessorIncomplete("stage " + std::string(to_string(s)) + " needs " +
                                            std::string(to_string(*pred)) + " to be complete");
            }
            spdlog::warn("running {} with {} incomplete because of --force", to_string(s), to_string(*pred));
        }
    }
    for (auto producer : consumed(s)) {
        const auto& cp = manifest_.at(producer);
        if (cp.status != StageStatus::Complete) continue;
        if (output_digest(producer) != cp.output_digest) {
            if (!options_.force) {
                throw DigestMismatch("outputs of stage " + std::string(to_string(producer)) +
                                     " changed after it completed");
            }
            spdlog::warn("outputs of {} changed after it completed; continuing because of --force", to_string(producer));
        }
    }

    const std::string in = input_digest(s);
    StageCheckpoint& cp = manifest_.stages[s];
    if (cp.status == StageStatus::Complete && cp.input_digest == in && cp.output_digest == output_digest(s) &&
        !options_.force) {
        spdlog::info("stage {} already complete with unchanged inputs", to_string(s));
        return cp;
    }
    if (s == Stage::Images && !cp.input_digest.empty() && cp.input_digest != in) {
        // Checkpointed pairs belong to different tasks or settings.
        std::error_code ec;
        fs::remove(layout_.images_dir() / "progress.jsonl", ec);
    }

    cp.status = StageStatus::Running;
    cp.started_at = now_iso();
    cp.finished_at.clear();
    cp.input_digest = in;
    cp.output_digest.clear();
    save();
    spdlog::info("stage {} started", to_string(s));
    try {
        cp.detail = execute(s);
    } catch (...) {
        cp.status = StageStatus::Failed;
        cp.finished_at = now_iso();
        save();
        throw;
    }
    cp.status = StageStatus::Complete;
    cp.finished_at = now_iso();
    cp.output_digest = output_digest(s);
    save();
    spdlog::info("stage {} complete", to_string(s));
    return cp;
}

json Pipeline::execute(Stage s) {
    switch (s) {
        case Stage::Mine: return run_mine();
        case Stage::Curate: return run_curate();
        case Stage::Tasks: return run_tasks();
        case Stage::Images: return run_images();
        case Stage::Eval: return run_eval();
        case Stage::Report: return run_report();
    }
    return {};
}

json Pipeline::run_mine() {
    if (config_.captions.empty()) throw ConfigError("run.captions is not set");
    if (config_.roles.miner.empty()) throw ConfigError("roles.miner is not set");
    const auto captions = ingest_captions(resolve_path(config_, config_.captions), config_.caption_format);
    auto llm = providers().get(config_.roles.miner);
    MinerOptions mo;
    mo.batch_size = config_.batch_size;
    mo.max_reasks = config_.max_reasks;
    const auto mined = mine_attributes(captions, *llm, templates(), mo);
    const auto split = filter_by_impact(mined, config_.impact_min);

    write_rows(layout_.candidates(), to_rows(mined));
    auto kb = KnowledgeBase::open(kb_path_);
    promote_candidates(mined, kb);
    const std::size_t moved = apply_impact_filter(kb, config_.impact_min);
    const auto candidates = kb.query(KbQuery{.status = std::set{AttributeStatus::Candidate}, .category = {}, .min_score = {}});
    // Every mined attribute can fall below the impact floor.
    const std::size_t n_clusters = candidates.empty() ? 0 : find_duplicates(candidates, config_.jaccard).size();

    json detail = {{"captions", captions.size()},
                   {"mined", mined.size()},
                   {"kept", split.kept.size()},
                   {"filtered_out", moved},
                   {"duplicate_clusters", n_clusters}};
    write_json_file(layout_.mine_summary(), detail);
    return detail;
}

json Pipeline::run_curate() {
    auto kb = KnowledgeBase::open(kb_path_);
    std::size_t approved_now = 0;
    if (options_.auto_approve) approved_now = approve_all_candidates(kb);
    json counts = json::object();
    std::size_t total = 0;
    for (auto c : kAllCategories) {
        const auto n = kb.query(KbQuery{.status = std::set{AttributeStatus::Approved},
                                        .category = std::set{c},
                                        .min_score = {}})
                           .size();
        counts[std::string(to_string(c))] = n;
        total += n;
    }
    return {{"auto_approved", approved_now}, {"approved", counts}, {"approved_total", total}};
}

json Pipeline::run_tasks() {
    if (config_.roles.taskgen.empty()) throw ConfigError("roles.taskgen is not set");
    auto kb = KnowledgeBase::open(kb_path_, KnowledgeBase::Mode::ReadOnly);
    const auto approved =
        kb.query(KbQuery{.status = std::set{AttributeStatus::Approved}, .category = {}, .min_score = {}});
    if (approved.empty()) throw PreconditionError("no approved attributes in " + kb_path_.string());
    auto llm = providers().get(config_.roles.taskgen);
    auto judge = providers().get(config_.roles.independence);
    TaskgenOptions to;
    to.n_tasks = config_.n_tasks;
    to.max_regenerations = config_.max_regenerations;
    to.max_reasks = config_.max_reasks;
    auto result = generate_tasks(approved, *llm, templates(), to, judge.get());
    if (result.tasks.empty()) throw PreconditionError("task generation produced no tasks");
    write_rows(layout_.tasks(), to_rows(result.tasks));
    json detail = {{"attributes", approved.size()},
                   {"tasks", result.tasks.size()},
                   {"failed_attributes", result.failed_attributes},
                   {"question_modes", result.question_modes}};
    write_json_file(layout_.tasks_summary(), detail);
    return {{"attributes", approved.size()},
            {"tasks", result.tasks.size()},
            {"failed_attributes", result.failed_attributes.size()}};
}

json Pipeline::run_images() {
    if (config_.roles.image_gen.empty() || config_.roles.scorer.empty()) {
        throw ConfigError("roles.image_gen and roles.scorer must be set");
    }
    const auto tasks = load_tasks(layout_.tasks());
    ImagegenOptions io;
    io.n_pairs = config_.n_pairs;
    io.max_retries = config_.max_retries;
    io.threshold = config_.clip_threshold;
    io.size = {config_.image_width, config_.image_height};
    auto result = run_images_stage(tasks, *providers().get(config_.roles.image_gen),
                                   *providers().get(config_.roles.scorer), layout_.root, io, seed());

    const auto violations = audit_manifest(result.manifest, layout_.root, config_.clip_threshold);
    if (!violations.empty()) {
        throw StageFailed("image audit failed: " + violations.front().image_id + ": " + violations.front().problem);
    }
    write_rows(layout_.image_manifest(), result.manifest);
    write_rows(layout_.image_outcomes(), to_rows(result.outcomes));

    std::size_t retained = 0;
    for (const auto& row : result.manifest) retained += row.value("retained", false) ? 1 : 0;
    std::size_t unfillable = 0;
    for (const auto& o : result.outcomes) unfillable += o.unfillable ? 1 : 0;
    json detail = {{"tasks", tasks.size()},
                   {"n_pairs", config_.n_pairs},
                   {"pair_slots", result.outcomes.size()},
                   {"pairs_retained", result.outcomes.size() - unfillable},
                   {"pairs_unfillable", unfillable},
                   {"images_generated", result.manifest.size()},
                   {"images_retained", retained},
                   {"resumed_pairs", result.resumed_pairs}};
    write_json_file(layout_.images_summary(), detail);
    return detail;
}

json Pipeline::run_eval() {
    const auto model_ids = models();
    if (model_ids.empty()) throw ConfigError("no models to evaluate: set roles.models or pass --model");
    std::vector<ProviderPtr> owned;
    std::vector<Provider*> model_ptrs;
    for (const auto& id : model_ids) {
        auto p = providers().get(id);
        if (p->config().kind != ProviderKind::VisionChat) {
            throw ConfigError("model '" + id + "' is not a vision_chat provider");
        }
        owned.push_back(p);
        model_ptrs.push_back(p.get());
    }
    const auto tasks = load_tasks(layout_.tasks());
    const auto rows = read_jsonl(layout_.image_manifest());
    const auto images = retained_images(rows);
    if (images.empty()) throw PreconditionError("no retained images to evaluate");
    ImageStore store(layout_.image_store());
    const auto tmpl = templates();

    const auto responses = collect_responses(model_ptrs, images, tasks, store, tmpl);

    JudgeSetup setup;
    setup.tau = config_.tau;
    ProviderPtr judge;
    if (!config_.roles.judge.empty()) {
        judge = providers().get(config_.roles.judge);
        setup.judge = judge.get();
        setup.fewshot = config_.fewshot.empty() ? default_fewshot()
                                                : load_fewshot(resolve_path(config_, config_.fewshot));
    }
    const auto judged = judge_responses(responses, tasks, tmpl, setup);

    auto kb = KnowledgeBase::open(kb_path_, KnowledgeBase::Mode::ReadOnly);
    const auto per_attribute = aggregate_metrics(judged.attribute_verdicts, kb, config_.calibration);
    const auto per_task = aggregate_metrics(judged.task_verdicts, kb, config_.calibration);
    if (per_attribute.rows.empty()) throw EmptyMetrics("no attribute survived evaluation");

    std::vector<json> entropy_rows;
    for (const auto& e : judged.entropy) {
        entropy_rows.push_back({{"model_id", e.model_id},
                                {"attribute_id", e.attribute_id},
                                {"h_target", e.report.h_target},
                                {"h_conditional", e.report.h_conditional},
                                {"gap", e.report.gap}});
    }
    auto excluded_json = [](const std::vector<ExcludedAttribute>& ex) {
        json arr = json::array();
        for (const auto& e : ex) {
            arr.push_back({{"model_id", e.model_id}, {"attribute_id", e.attribute_id}, {"invalid_fraction", e.invalid_fraction}});
        }
        return arr;
    };
    write_rows(layout_.responses(), to_rows(responses));
    write_rows(layout_.verdicts(), to_rows(judged.attribute_verdicts));
    write_rows(layout_.task_verdicts(), to_rows(judged.task_verdicts));
    write_rows(layout_.entropy(), entropy_rows);
    write_json_file(layout_.metrics_per_task(), metrics_to_json(per_task.rows));
    write_json_file(layout_.excluded(), {{"attribute_level", excluded_json(per_attribute.excluded)},
                                         {"task_level", excluded_json(per_task.excluded)}});
    write_json_file(layout_.metrics_json(), metrics_to_json(per_attribute.rows));
    write_file_atomic(layout_.metrics_csv(), metrics_to_csv(per_attribute.rows));

    std::size_t llm_judged = 0;
    for (const auto& v : judged.attribute_verdicts) llm_judged += v.method == JudgeMethod::LlmJudge ? 1 : 0;
    return {{"models", model_ids},
            {"responses", responses.size()},
            {"attribute_verdicts", judged.attribute_verdicts.size()},
            {"llm_judged", llm_judged},
            {"task_verdicts", judged.task_verdicts.size()},
            {"excluded", per_attribute.excluded.size()}};
}

json Pipeline::run_report() {
    const json metrics = json::parse(read_file(layout_.metrics_json()), nullptr, false);
    if (metrics.is_discarded()) throw ParseError(0, "metrics.json is not valid JSON");
    const auto rows = metrics_from_json(metrics);
    ReportNotes notes;
    notes.lines.push_back(std::string("Calibration: 10-bin ") +
                          (config_.calibration == CalibrationVariant::L1 ? "expected calibration error (L1)"
                                                                         : "root-mean-square calibration error"));
    notes.lines.push_back(config_.roles.judge.empty()
                              ? "Judge: total-variation distance, tau " + format_double(config_.tau)
                              : "Judge: " + config_.roles.judge +
                                    " with few-shot examples; total-variation fallback at tau " +
                                    format_double(config_.tau));
    if (fs::exists(layout_.excluded())) {
        const json ex = json::parse(read_file(layout_.excluded()), nullptr, false);
        if (!ex.is_discarded() && ex.contains("attribute_level")) {
            notes.lines.push_back("Excluded for more than half invalid responses: " +
                                  std::to_string(ex["attribute_level"].size()) + " model-attribute pairs");
        }
    }
    fs::create_directories(layout_.report_md().parent_path());
    write_file_atomic(layout_.report_md(), emit_report(rows, ReportFormat::Markdown, notes));
    write_file_atomic(layout_.report_csv(), emit_report(rows, ReportFormat::Csv));
    write_file_atomic(layout_.report_json(), emit_report(rows, ReportFormat::Json));
    return {{"rows", rows.size()}};
}

}  // namespace bias_audit
