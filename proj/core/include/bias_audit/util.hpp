#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

namespace bias_audit {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Hashing and encoding.
std::string sha256_hex(std::string_view bytes);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// 64-bit digest of a string, stable across platforms (first 8 bytes of SHA-256).
std::uint64_t stable_hash64(std::string_view text);

/// Maps a digest to a uniform fraction in [0, 1).
double unit_fraction(std::uint64_t h);

// Files.
std::string read_file(const fs::path& path);
/// Writes to a sibling temp file, fsyncs, then renames over the target.
void write_file_atomic(const fs::path& path, std::string_view contents);
/// SHA-256 over one file's bytes, or the empty string when it does not exist.
std::string file_digest(const fs::path& path);
/// Digest over several files (path-tagged), stable under argument order.
std::string files_digest(std::vector<fs::path> paths);

/// Reads one JSON object per line; a trailing line without '\n' is treated as
/// an unfinished write and skipped. Blank lines are ignored.
std::vector<json> read_jsonl(const fs::path& path);
void write_jsonl_atomic(const fs::path& path, const std::vector<json>& rows);

// Time.
std::int64_t now_epoch_ms();
std::string format_iso8601_ms(std::int64_t epoch_ms);
std::int64_t parse_iso8601_ms(const std::string& text);

// Text.
std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
/// Case-folded alphanumeric tokens ('-' and '\'' kept inside words).
std::vector<std::string> word_tokens(std::string_view text);
/// Whitespace-separated tokens, case and punctuation preserved.
std::vector<std::string> split_whitespace(std::string_view text);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
/// Replaces every `{name}` with its value. Unknown placeholders are left as is.
std::string render_placeholders(std::string text,
                                const std::vector<std::pair<std::string, std::string>>& values);
/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// Extracts the first JSON value embedded in an LLM reply: the whole text if it
/// parses, otherwise the contents of a ```json fenced block, otherwise the
/// outermost {...} span. Returns nullopt when nothing parses.
std::optional<json> extract_json(std::string_view reply);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Rethrows the first
/// exception (by index) after all workers finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// parallel_for that collects results into input order.
template <typename T, typename Fn>
std::vector<T> parallel_map(std::size_t n, std::size_t workers, Fn&& fn) {
    std::vector<std::optional<T>> slots(n);
    parallel_for(n, workers, [&](std::size_t i) { slots[i].emplace(fn(i)); });
    std::vector<T> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

}  // namespace bias_audit
