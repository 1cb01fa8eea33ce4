#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bias_audit/evaluator.hpp"
#include "bias_audit/miner.hpp"
#include "bias_audit/providers.hpp"
#include "bias_audit/stubs.hpp"

namespace bias_audit {

/// Parses the TOML subset used by run configs: [section] and [a.b] headers,
/// `key = value` with strings, integers, floats, booleans and single-line
/// arrays, and '#' comments. Returns {"section": {"key": value}} with dotted
/// headers nested. Throws ParseError with the line number.
json parse_toml_subset(std::string_view text);

struct RolesConfig {
    std::string miner;
    std::string taskgen;
    std::string independence;  // defaults to taskgen
    std::string judge;         // empty: deterministic judging
    std::string image_gen;
    std::string scorer;
    std::vector<std::string> models;  // vision models under audit
};

struct RunConfig {
    // [run]
    std::int64_t seed = 20250101;
    std::string captions;  // caption file for `mine`
    CaptionFormat caption_format = CaptionFormat::Tsv;
    std::string templates_dir;
    std::string fewshot;
    std::string cache_dir;  // relative to the run dir when not absolute
    int image_width = 256;
    int image_height = 256;
    // [thresholds]
    int impact_min = 4;
    double clip_threshold = kDefaultClipThreshold;
    double tau = kDefaultTau;
    double jaccard = 0.8;
    // [counts]
    int n_tasks = 5;
    int n_pairs = 1;
    int max_retries = 3;
    int max_regenerations = 3;
    int max_reasks = 2;
    std::size_t batch_size = 20;
    // [eval]
    CalibrationVariant calibration = CalibrationVariant::L1;
    // [stub]
    StubOptions stub;

    RolesConfig roles;
    std::map<std::string, ProviderConfig> providers;

    /// Path the config was read from; relative paths above resolve against its directory.
    fs::path source;

    /// Digest of the canonical form; secrets never appear in configs.
    std::string digest() const;
    json to_json() const;
};

/// Throws ConfigError on unknown keys, bad types or broken references.
RunConfig config_from_document(const json& doc, const fs::path& source = {});
RunConfig load_config(const fs::path& path);

/// Resolves a config-relative path.
fs::path resolve_path(const RunConfig& cfg, const std::string& p);

/// Built-in configuration running every role on stub providers.
std::string default_stub_config_text();

}  // namespace bias_audit
