#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bias_audit/attribute_kb.hpp"
#include "bias_audit/config.hpp"
#include "bias_audit/providers.hpp"
#include "bias_audit/stubs.hpp"

namespace bias_audit::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& prefix = "bias_audit_test");
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

/// Directory holding the checked-in test fixtures.
fs::path fixtures_dir();

/// A stub-backed provider with pacing effectively disabled.
ProviderPtr stub_provider(ProviderKind kind, const std::string& id = {}, StubOptions stub = {},
                          std::shared_ptr<ResponseCache> cache = nullptr);

/// A provider over a scripted backend, unpaced.
ProviderPtr scripted_provider(ProviderKind kind, BackendFn fn, const std::string& id = "scripted",
                              std::shared_ptr<Clock> clock = nullptr);

/// The built-in stub configuration document with `patch` merged in (RFC 7386).
json stub_config_document(const json& patch = json::object());
RunConfig stub_config(const json& patch = json::object());

/// Writes `text` as a config file and returns its path.
fs::path write_config(const fs::path& dir, const std::string& text);

/// Appends `n` distinct approved attributes, cycling through the categories
/// (or all in `only` when set). Returns them in id order.
std::vector<BiasAttribute> seed_approved(KnowledgeBase& kb, std::size_t n,
                                         std::optional<AttributeCategory> only = {});

/// Path of the built command-line tool.
fs::path cli_path();

struct ProcessResult {
    int exit_code = -1;  // -1 when killed by a signal
    std::string out;     // stdout
    std::string err;     // stderr
};

/// Runs the CLI with `args` and waits for it.
ProcessResult run_cli(const std::vector<std::string>& args, const std::vector<std::string>& env = {});

/// Starts the CLI without waiting; output goes to /dev/null. Returns the pid.
int spawn_cli(const std::vector<std::string>& args, const std::vector<std::string>& env = {});
/// waitpid wrapper returning the exit code, or -1 for a signal death.
int wait_process(int pid);

/// Seeded generator helpers for property tests.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}
    std::int64_t integer(std::int64_t lo, std::int64_t hi);  // inclusive
    double real(double lo, double hi);                      // [lo, hi)
    bool coin(double p = 0.5);
    std::string word(std::size_t min_len = 2, std::size_t max_len = 8);
    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

}  // namespace bias_audit::testing
