#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bias_audit/attribute_kb.hpp"
#include "bias_audit/config.hpp"
#include "bias_audit/evaluator.hpp"
#include "bias_audit/imagegen.hpp"
#include "bias_audit/providers.hpp"
#include "bias_audit/taskgen.hpp"

namespace bias_audit {

enum class Stage { Mine, Curate, Tasks, Images, Eval, Report };
inline constexpr std::array<Stage, 6> kAllStages = {Stage::Mine,   Stage::Curate, Stage::Tasks,
                                                    Stage::Images, Stage::Eval,   Stage::Report};
std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);
std::optional<Stage> predecessor(Stage s);

enum class StageStatus { Pending, Running, Complete, Failed };
std::string_view to_string(StageStatus s);
std::optional<StageStatus> parse_stage_status(std::string_view s);

struct StageCheckpoint {
    StageStatus status = StageStatus::Pending;
    std::string started_at;
    std::string finished_at;
    std::string input_digest;
    std::string output_digest;
    json detail = json::object();  // stage-specific counters
};

struct RunManifest {
    std::string run_id;
    std::string config_digest;
    std::string templates_digest;
    json seeds = json::object();
    json provider_versions = json::object();
    std::map<Stage, StageCheckpoint> stages;

    json to_json() const;
    static RunManifest from_json(const json& j);
    const StageCheckpoint& at(Stage s) const;
};

/// Fixed locations inside a run directory.
struct RunLayout {
    fs::path root;

    fs::path manifest() const { return root / "run.json"; }
    fs::path lock() const { return root / "run.lock"; }
    fs::path cache() const { return root / "cache"; }
    fs::path candidates() const { return root / "mine" / "candidates.jsonl"; }
    fs::path mine_summary() const { return root / "mine" / "summary.json"; }
    fs::path tasks() const { return root / "tasks" / "tasks.jsonl"; }
    fs::path tasks_summary() const { return root / "tasks" / "summary.json"; }
    fs::path images_dir() const { return root / "images"; }
    fs::path image_store() const { return root / "images" / "store"; }
    fs::path image_manifest() const { return root / "images" / "manifest.jsonl"; }
    fs::path image_outcomes() const { return root / "images" / "outcomes.jsonl"; }
    fs::path images_summary() const { return root / "images" / "summary.json"; }
    fs::path responses() const { return root / "eval" / "responses.jsonl"; }
    fs::path verdicts() const { return root / "eval" / "verdicts.jsonl"; }
    fs::path task_verdicts() const { return root / "eval" / "task_verdicts.jsonl"; }
    fs::path entropy() const { return root / "eval" / "entropy.jsonl"; }
    fs::path metrics_json() const { return root / "eval" / "metrics.json"; }
    fs::path metrics_csv() const { return root / "eval" / "metrics.csv"; }
    fs::path metrics_per_task() const { return root / "eval" / "metrics_per_task.json"; }
    fs::path excluded() const { return root / "eval" / "excluded.json"; }
    fs::path report_md() const { return root / "report" / "report.md"; }
    fs::path report_csv() const { return root / "report" / "report.csv"; }
    fs::path report_json() const { return root / "report" / "report.json"; }
};

/// Exclusive flock on a file, released on destruction.
class FileLock {
public:
    /// Returns nullopt when another process holds the lock.
    static std::optional<FileLock> try_acquire(const fs::path& path);
    FileLock(FileLock&& other) noexcept;
    FileLock& operator=(FileLock&& other) noexcept;
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;
    ~FileLock();

private:
    explicit FileLock(int fd) : fd_(fd) {}
    int fd_ = -1;
};

/// Builds providers for every configured id with the run's response cache.
ProviderRegistry build_providers(const RunConfig& cfg, const fs::path& cache_dir,
                                 std::shared_ptr<Clock> clock = nullptr);

struct RunOptions {
    bool force = false;
    std::optional<std::int64_t> seed;
    std::vector<std::string> models;  // overrides roles.models when nonempty
    fs::path kb_path;                 // <run>/kb.jsonl when empty
    /// Curation mode: approve every candidate, or accept the KB as curated.
    bool auto_approve = false;
};

/// One run directory owned by this process for the object's lifetime.
class Pipeline {
public:
    /// Takes the run lock (RunLocked when held) and loads or creates run.json.
    Pipeline(RunConfig config, fs::path run_dir, RunOptions options = {});

    /// Runs a stage after checking its predecessor and input digests.
    /// A complete stage whose inputs and outputs are unchanged is skipped.
    /// On failure the checkpoint is marked failed and the error rethrown.
    const StageCheckpoint& run_stage(Stage s);

    const RunManifest& manifest() const { return manifest_; }
    const RunLayout& layout() const { return layout_; }
    const RunConfig& config() const { return config_; }
    const fs::path& kb_path() const { return kb_path_; }
    std::int64_t seed() const;
    std::vector<std::string> models() const;

private:
    std::string input_digest(Stage s) const;
    std::string output_digest(Stage s) const;
    json execute(Stage s);
    json run_mine();
    json run_curate();
    json run_tasks();
    json run_images();
    json run_eval();
    json run_report();
    void save();
    PromptTemplates templates() const;

    RunConfig config_;
    RunLayout layout_;
    RunOptions options_;
    fs::path kb_path_;
    std::optional<FileLock> lock_;
    RunManifest manifest_;
    std::unique_ptr<ProviderRegistry> providers_;
    ProviderRegistry& providers();
};

/// Reads tasks.jsonl.
std::vector<VqaTask> load_tasks(const fs::path& path);

/// Approves every candidate-status record. Returns how many changed.
std::size_t approve_all_candidates(KnowledgeBase& kb);

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitPrecondition = 2, kExitProvider = 3, kExitConfig = 4 };
/// Maps an exception to its exit code.
int exit_code_for(const std::exception& e);

}  // namespace bias_audit
