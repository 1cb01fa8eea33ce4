#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bias_audit/errors.hpp"
#include "bias_audit/util.hpp"

namespace bias_audit {

// ---------------------------------------------------------------------------
// Configuration

enum class ProviderKind { Chat, VisionChat, ImageGen, Scorer };
std::string_view to_string(ProviderKind k);
std::optional<ProviderKind> parse_provider_kind(std::string_view s);

/// Which request/response dialect the HTTP transport speaks. `Wire` is the
/// project's own contract (/v1/chat, /v1/images, /v1/score); the others are
/// translated to and from it.
enum class ApiStyle { Wire, OpenAI, Anthropic };
std::string_view to_string(ApiStyle s);
std::optional<ApiStyle> parse_api_style(std::string_view s);

struct ProviderConfig {
    std::string provider_id;
    ProviderKind kind = ProviderKind::Chat;
    std::string base_url;
    std::string model;
    /// Name of the environment variable holding the key (never the key itself).
    std::string auth_env;
    ApiStyle api_style = ApiStyle::Wire;
    int max_in_flight = 4;
    int requests_per_minute = 60;
    double timeout_seconds = 60.0;
};

/// BIAS_AUDIT_<PROVIDER_ID>_API_KEY with the id upper-cased and non-alphanumerics as '_'.
std::string default_auth_env(std::string_view provider_id);
/// Throws ConfigError on broken invariants.
void validate(const ProviderConfig& c);

// ---------------------------------------------------------------------------
// Requests and responses

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string text;
    std::vector<std::string> images_png;  // raw PNG bytes, base64 on the wire
};

enum class ResponseFormat { Text, Structured };

struct ChatRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
    ResponseFormat response_format = ResponseFormat::Text;
    /// Client-side label ("mine", "vqa", ...). Not sent and not part of the cache key.
    std::string purpose;

    bool has_images() const;
};

struct ChatResponse {
    std::string text;
    std::string finish_reason;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    bool from_cache = false;
};

inline constexpr double kCreativeTemperature = 0.7;
inline constexpr double kJudgeTemperature = 0.0;

json chat_request_to_wire(const ChatRequest& r, const std::string& model);
ChatRequest chat_request_from_wire(const json& body);
json chat_response_to_wire(const ChatResponse& r);
ChatResponse chat_response_from_wire(const json& body);

/// Hex digest of provider id, model and the canonical (sorted-key, compact)
/// serialization of the wire request.
std::string cache_key(std::string_view provider_id, std::string_view model, const json& wire_request);

/// Parses a structured reply: the whole text (optionally inside one ```json
/// fence) must be a single JSON value. Throws SchemaError carrying the raw text.
json parse_structured_reply(const std::string& text);

// ---------------------------------------------------------------------------
// Transport

/// Per-call context handed to backends alongside the wire body.
struct CallContext {
    std::string purpose;
};

/// One wire-contract endpoint call with no caching, pacing or retries.
/// Endpoints are "/v1/chat", "/v1/images" and "/v1/score".
class Backend {
public:
    virtual ~Backend() = default;
    virtual json post(const std::string& endpoint, const json& body, const CallContext& ctx) = 0;
};

using BackendFn = std::function<json(const std::string&, const json&, const CallContext&)>;

/// Adapts a callable; the usual way tests script a provider.
class FunctionBackend : public Backend {
public:
    explicit FunctionBackend(BackendFn fn) : fn_(std::move(fn)) {}
    json post(const std::string& endpoint, const json& body, const CallContext& ctx) override {
        return fn_(endpoint, body, ctx);
    }

private:
    BackendFn fn_;
};

/// HTTP(S) backend. The API key is read from the environment at call time.
std::shared_ptr<Backend> make_http_backend(const ProviderConfig& config);

// ---------------------------------------------------------------------------
// Pacing and retries

class Clock {
public:
    virtual ~Clock() = default;
    virtual double now_seconds() = 0;
    virtual void sleep_for(double seconds) = 0;
};

class SystemClock : public Clock {
public:
    double now_seconds() override;
    void sleep_for(double seconds) override;
};

/// Simulated time: sleeping advances the clock instantly.
class VirtualClock : public Clock {
public:
    double now_seconds() override;
    void sleep_for(double seconds) override;
    std::vector<double> sleeps() const;

private:
    mutable std::mutex mu_;
    double now_ = 0.0;
    std::vector<double> sleeps_;
};

/// Token bucket refilled at requests_per_minute/60 tokens per second, holding
/// at most one minute's worth and starting full.
class TokenBucket {
public:
    TokenBucket(int requests_per_minute, std::shared_ptr<Clock> clock);
    void acquire();

private:
    std::mutex mu_;
    double rate_per_sec_;
    double capacity_;
    double tokens_;
    double last_;
    std::shared_ptr<Clock> clock_;
};

/// Caps concurrent calls; tracks the high-water mark.
class InFlightLimiter {
public:
    explicit InFlightLimiter(int max_in_flight);
    void acquire();
    void release();
    int high_water() const;

    class Guard {
    public:
        explicit Guard(InFlightLimiter& l) : l_(l) { l_.acquire(); }
        ~Guard() { l_.release(); }
        Guard(const Guard&) = delete;
        Guard& operator=(const Guard&) = delete;

    private:
        InFlightLimiter& l_;
    };

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    int max_;
    int active_ = 0;
    int high_water_ = 0;
};

struct RetryPolicy {
    int max_attempts = 5;
    double base_delay_seconds = 1.0;
    double factor = 2.0;
};

/// Only rate limiting and timeouts are retried.
bool is_retryable(const std::exception& e);

/// Invokes `call` under the bucket, backing off on retryable failures.
/// `on_retry(attempt, delay, error)` is invoked before each sleep.
template <typename Call>
auto with_rate_limit_and_retries(
    Call&& call, TokenBucket* bucket, Clock& clock, const RetryPolicy& policy,
    const std::function<void(int, double, const std::exception&)>& on_retry = {}) {
    double delay = policy.base_delay_seconds;
    for (int attempt = 1;; ++attempt) {
        if (bucket) bucket->acquire();
        try {
            return call();
        } catch (const ProviderError& e) {
            if (!is_retryable(e) || attempt >= policy.max_attempts) throw;
            if (on_retry) on_retry(attempt, delay, e);
            clock.sleep_for(delay);
            delay *= policy.factor;
        }
    }
}

// ---------------------------------------------------------------------------
// Cache

/// On-disk response cache: one file per key under a two-hex-char shard.
class ResponseCache {
public:
    explicit ResponseCache(fs::path dir);
    std::optional<std::string> get(const std::string& key) const;
    void put(const std::string& key, std::string_view bytes);
    const fs::path& dir() const { return dir_; }

private:
    fs::path path_for(const std::string& key) const;
    fs::path dir_;
};

// ---------------------------------------------------------------------------
// Provider

struct ProviderRuntime {
    std::shared_ptr<Clock> clock;           // SystemClock when null
    std::shared_ptr<ResponseCache> cache;   // no caching when null
    RetryPolicy retry;
};

struct ProviderStats {
    std::size_t backend_calls = 0;
    std::size_t cache_hits = 0;
    std::size_t retries = 0;
    int in_flight_high_water = 0;
};

/// A configured backend with caching, pacing, in-flight bounding and retries.
/// Shareable across threads.
class Provider {
public:
    Provider(ProviderConfig config, std::shared_ptr<Backend> backend, ProviderRuntime runtime = {});

    ChatResponse chat(const ChatRequest& request);
    std::string generate_image(const std::string& prompt, std::int64_t seed, int width, int height);
    /// Similarity in [-1, 1].
    double score_image_text(std::string_view png, const std::string& text);

    /// Raw wire call with the full cache/limit/retry stack.
    json call(const std::string& endpoint, const json& body, const CallContext& ctx);

    const ProviderConfig& config() const { return config_; }
    ProviderStats stats() const;

private:
    ProviderConfig config_;
    std::shared_ptr<Backend> backend_;
    ProviderRuntime runtime_;
    TokenBucket bucket_;
    InFlightLimiter in_flight_;
    std::atomic<std::size_t> backend_calls_{0};
    std::atomic<std::size_t> cache_hits_{0};
    std::atomic<std::size_t> retries_{0};
};

using ProviderPtr = std::shared_ptr<Provider>;

/// Named set of providers built from configuration.
class ProviderRegistry {
public:
    void add(ProviderPtr p);
    ProviderPtr get(const std::string& id) const;  // throws ConfigError when missing
    bool contains(const std::string& id) const;
    std::vector<std::string> ids() const;

private:
    std::map<std::string, ProviderPtr> providers_;
};

}  // namespace bias_audit
