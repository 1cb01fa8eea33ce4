#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bias_audit/providers.hpp"
#include "bias_audit/taskgen.hpp"

namespace bias_audit {

enum class Variant { A, B };
std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view s);

struct GeneratedImage {
    std::string image_id;
    std::string task_id;
    Variant variant = Variant::A;
    int pair_index = 0;
    int attempt = 0;  // 0 for the first generation, r for the r-th retry
    std::int64_t seed = 0;
    std::string content_hash;
    std::string path;  // relative to the store root's parent (the run directory)
};

enum class Verdict { Keep, Reject };

/// Four image-prompt similarities; s_xy scores image x against prompt y.
struct PairFilterResult {
    std::string task_id;
    int pair_index = 0;
    double s_aa = 0, s_ab = 0, s_bb = 0, s_ba = 0;
    std::optional<Verdict> verdict;
    std::string reason;  // first failed clause when rejected
};

json to_json(const PairFilterResult& r);

/// Content-addressed PNG store: <root>/<hash[0:2]>/<hash>.png. Image records
/// carry `record_prefix`/<hash[0:2]>/<hash>.png as their path.
class ImageStore {
public:
    explicit ImageStore(fs::path root, std::string record_prefix = "images/store");
    /// Returns the content hash; writing the same bytes twice is a no-op.
    std::string put(std::string_view png);
    fs::path path_for(const std::string& hash) const;
    std::string get(const std::string& hash) const;
    std::string record_path(const std::string& hash) const;
    const fs::path& root() const { return root_; }

private:
    fs::path root_;
    std::string record_prefix_;
};

/// Seed for pair `pair_index` on retry `retry` (0 = first attempt).
std::int64_t pair_seed(std::int64_t base_seed, int n_pairs, int retry, int pair_index);

/// Non-overlapping per-task seed blocks: run_seed + task_index * n_pairs * (max_retries + 1).
std::int64_t task_base_seed(std::int64_t run_seed, std::size_t task_index, int n_pairs, int max_retries);

std::string make_image_id(const std::string& task_id, int pair_index, int attempt, Variant v);

struct ImageSize {
    int width = 256;
    int height = 256;
};

/// Both variants of one pair with the same seed.
std::pair<GeneratedImage, GeneratedImage> generate_pair(const VqaTask& task, Provider& generator,
                                                        ImageStore& store, int pair_index, int attempt,
                                                        std::int64_t seed, ImageSize size = {});

/// 2 * n_pairs images, pair i seeded with base_seed + i.
std::vector<GeneratedImage> generate_pairs(const VqaTask& task, Provider& generator, ImageStore& store,
                                           int n_pairs, std::int64_t base_seed, ImageSize size = {});

/// Scores both images against both prompts; verdict left unset.
PairFilterResult score_pair(std::string_view png_a, std::string_view png_b, const std::string& prompt_a,
                            const std::string& prompt_b, Provider& scorer);
PairFilterResult score_pair(const GeneratedImage& img_a, const GeneratedImage& img_b,
                            const std::string& prompt_a, const std::string& prompt_b, Provider& scorer,
                            const ImageStore& store);

inline constexpr double kDefaultClipThreshold = 0.2;

/// keep iff s_aa > t, s_bb > t, s_aa >= s_ab and s_bb >= s_ba; otherwise the
/// first failed clause in that order becomes the reason.
PairFilterResult filter_pair(PairFilterResult result, double threshold = kDefaultClipThreshold);

/// What happened to one pair slot over its attempts.
struct PairOutcome {
    std::string task_id;
    int pair_index = 0;
    int retries = 0;               // retry index of the kept attempt, or attempts used
    bool unfillable = false;
    std::vector<GeneratedImage> images;            // every generated image, all attempts
    std::vector<PairFilterResult> filters;         // one per scored attempt
    std::vector<std::string> attempt_notes;        // one per attempt: "keep", reason, or refusal
};

json to_json(const PairOutcome& o);
PairOutcome pair_outcome_from_json(const json& j);

struct ImagegenOptions {
    int n_pairs = 5;
    int max_retries = 3;
    double threshold = kDefaultClipThreshold;
    ImageSize size;
};

/// Generate, score and filter one pair slot, retrying with fresh seeds until
/// kept or max_retries retries have failed (then unfillable).
PairOutcome fill_pair(const VqaTask& task, int pair_index, Provider& generator, Provider& scorer,
                      ImageStore& store, const ImagegenOptions& options, std::int64_t base_seed,
                      int first_retry = 0);

/// Retries every rejected pair of a task starting at retry 1.
std::vector<PairOutcome> regenerate_rejected(const VqaTask& task, std::span<const int> rejected_pairs,
                                             Provider& generator, Provider& scorer, ImageStore& store,
                                             const ImagegenOptions& options, std::int64_t base_seed);

/// One row per generated image with its pair attempt's filter result.
std::vector<json> manifest_rows(const PairOutcome& o);

struct ImagesStageResult {
    std::vector<json> manifest;        // sorted by image_id
    std::vector<PairOutcome> outcomes; // sorted by (task_id, pair_index)
    std::size_t generated_pairs = 0;   // pair slots filled in this invocation
    std::size_t resumed_pairs = 0;     // pair slots taken from the checkpoint
};

/// Runs every (task, pair) slot, appending each finished slot to
/// `<run_dir>/images/progress.jsonl`. Slots already in the checkpoint are not
/// regenerated, so an interrupted stage resumes where it stopped.
ImagesStageResult run_images_stage(std::span<const VqaTask> tasks, Provider& generator, Provider& scorer,
                                   const fs::path& run_dir, const ImagegenOptions& options,
                                   std::int64_t run_seed);

struct ManifestViolation {
    std::string image_id;
    std::string problem;
};

/// Re-checks retained rows: filter clauses, content hashes against stored
/// bytes, and uniqueness of (task_id, variant, pair_index).
std::vector<ManifestViolation> audit_manifest(std::span<const json> rows, const fs::path& run_dir,
                                              double threshold = kDefaultClipThreshold);

/// Retained images from manifest rows.
std::vector<GeneratedImage> retained_images(std::span<const json> rows);
GeneratedImage image_from_json(const json& j);
json to_json(const GeneratedImage& g);

}  // namespace bias_audit
