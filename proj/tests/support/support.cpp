#include "support.hpp"

#include <atomic>
#include <cerrno>
#include <cstdlib>

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

namespace bias_audit::testing {

TempDir::TempDir(const std::string& prefix) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (prefix + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

fs::path fixtures_dir() { return BIAS_AUDIT_FIXTURES_DIR; }

namespace {

ProviderConfig unpaced(ProviderKind kind, const std::string& id) {
    ProviderConfig pc;
    pc.provider_id = id.empty() ? "stub-" + std::string(to_string(kind)) : id;
    pc.kind = kind;
    pc.base_url = "stub:";
    pc.model = "stub";
    pc.auth_env = default_auth_env(pc.provider_id);
    pc.max_in_flight = 8;
    pc.requests_per_minute = 1'000'000;
    return pc;
}

}  // namespace

ProviderPtr stub_provider(ProviderKind kind, const std::string& id, StubOptions stub,
                          std::shared_ptr<ResponseCache> cache) {
    ProviderConfig pc = unpaced(kind, id);
    ProviderRuntime rt;
    rt.cache = std::move(cache);
    return std::make_shared<Provider>(pc, make_backend(pc, stub), rt);
}

ProviderPtr scripted_provider(ProviderKind kind, BackendFn fn, const std::string& id,
                              std::shared_ptr<Clock> clock) {
    ProviderConfig pc = unpaced(kind, id);
    pc.base_url = "http://scripted.invalid";
    ProviderRuntime rt;
    rt.clock = std::move(clock);
    return std::make_shared<Provider>(pc, std::make_shared<FunctionBackend>(std::move(fn)), rt);
}

json stub_config_document(const json& patch) {
    json doc = parse_toml_subset(default_stub_config_text());
    doc.merge_patch(patch);
    return doc;
}

RunConfig stub_config(const json& patch) { return config_from_document(stub_config_document(patch)); }

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "config.toml";
    write_file_atomic(p, text);
    return p;
}

std::vector<BiasAttribute> seed_approved(KnowledgeBase& kb, std::size_t n,
                                         std::optional<AttributeCategory> only) {
    std::vector<BiasAttribute> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        BiasAttribute a;
        a.name = "Synthetic Trait " + std::to_string(i + 1);
        a.description = "Synthetic attribute number " + std::to_string(i + 1) + ".";
        a.category = only ? *only : kAllCategories[i % kAllCategories.size()];
        a.impact_score = 4 + static_cast<int>(i % 2);
        a.source_caption_ids = {"synthetic#" + std::to_string(i)};
        a.id = kb.append(a);
        a.status = AttributeStatus::Approved;
        kb.append(a);
        out.push_back(*kb.get(a.id));
    }
    return out;
}

fs::path cli_path() { return BIAS_AUDIT_CLI_PATH; }

namespace {

struct Argv {
    std::vector<std::string> store;
    std::vector<char*> ptrs;
    explicit Argv(std::vector<std::string> s) : store(std::move(s)) {
        for (auto& a : store) ptrs.push_back(a.data());
        ptrs.push_back(nullptr);
    }
};

Argv build_env(const std::vector<std::string>& extra) {
    auto name_of = [](const std::string& kv) { return kv.substr(0, kv.find('=')); };
    std::set<std::string> overridden;
    for (const auto& kv : extra) overridden.insert(name_of(kv));
    std::vector<std::string> env;
    for (char** e = environ; *e; ++e) {
        if (!overridden.contains(name_of(*e))) env.emplace_back(*e);
    }
    env.insert(env.end(), extra.begin(), extra.end());
    return Argv(std::move(env));
}

int spawn(const std::vector<std::string>& args, const std::vector<std::string>& env, const fs::path& out,
          const fs::path& err) {
    std::vector<std::string> full{cli_path().string()};
    full.insert(full.end(), args.begin(), args.end());
    Argv argv(std::move(full));
    Argv envp = build_env(env);
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_addopen(&fa, 1, out.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_addopen(&fa, 2, err.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    pid_t pid = -1;
    const int rc = posix_spawn(&pid, argv.ptrs[0], &fa, nullptr, argv.ptrs.data(), envp.ptrs.data());
    posix_spawn_file_actions_destroy(&fa);
    if (rc != 0) throw Error("posix_spawn failed for " + cli_path().string());
    return pid;
}

}  // namespace

int wait_process(int pid) {
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0) {
        if (errno != EINTR) return -1;
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ProcessResult run_cli(const std::vector<std::string>& args, const std::vector<std::string>& env) {
    TempDir io("bias_audit_cli_io");
    const int pid = spawn(args, env, io / "out", io / "err");
    ProcessResult r;
    r.exit_code = wait_process(pid);
    r.out = read_file(io / "out");
    r.err = read_file(io / "err");
    return r;
}

int spawn_cli(const std::vector<std::string>& args, const std::vector<std::string>& env) {
    return spawn(args, env, "/dev/null", "/dev/null");
}

std::int64_t Gen::integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng_);
}

double Gen::real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

bool Gen::coin(double p) { return std::bernoulli_distribution(p)(rng_); }

std::string Gen::word(std::size_t min_len, std::size_t max_len) {
    const auto len = static_cast<std::size_t>(integer(static_cast<std::int64_t>(min_len),
                                                      static_cast<std::int64_t>(max_len)));
    std::string w;
    for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + integer(0, 25));
    return w;
}

}  // namespace bias_audit::testing
