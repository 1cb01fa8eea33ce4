#include "bias_audit/providers.hpp"

#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <thread>

#include <spdlog/spdlog.h>

namespace bias_audit {

namespace {

constexpr std::array<std::pair<ProviderKind, std::string_view>, 4> kKindNames = {{
    {ProviderKind::Chat, "chat"},
    {ProviderKind::VisionChat, "vision_chat"},
    {ProviderKind::ImageGen, "image_gen"},
    {ProviderKind::Scorer, "scorer"},
}};

constexpr std::array<std::pair<ApiStyle, std::string_view>, 3> kStyleNames = {{
    {ApiStyle::Wire, "wire"},
    {ApiStyle::OpenAI, "openai"},
    {ApiStyle::Anthropic, "anthropic"},
}};

}  // namespace

std::string_view to_string(ProviderKind k) {
    for (const auto& [v, s] : kKindNames) {
        if (v == k) return s;
    }
    return "?";
}

std::optional<ProviderKind> parse_provider_kind(std::string_view s) {
    for (const auto& [v, name] : kKindNames) {
        if (name == s) return v;
    }
    return std::nullopt;
}

std::string_view to_string(ApiStyle st) {
    for (const auto& [v, s] : kStyleNames) {
        if (v == st) return s;
    }
    return "?";
}

std::optional<ApiStyle> parse_api_style(std::string_view s) {
    for (const auto& [v, name] : kStyleNames) {
        if (name == s) return v;
    }
    return std::nullopt;
}

std::string default_auth_env(std::string_view provider_id) {
    std::string id;
    for (char c : provider_id) {
        id.push_back(std::isalnum(static_cast<unsigned char>(c))
                         ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
                         : '_');
    }
    return "BIAS_AUDIT_" + id + "_API_KEY";
}

void validate(const ProviderConfig& c) {
    if (c.provider_id.empty()) throw ConfigError("provider_id is empty");
    if (c.max_in_flight < 1) throw ConfigError(c.provider_id + ": max_in_flight must be >= 1");
    if (c.requests_per_minute < 1) {
        throw ConfigError(c.provider_id + ": requests_per_minute must be >= 1");
    }
    if (!(c.timeout_seconds > 0)) throw ConfigError(c.provider_id + ": timeout_seconds must be > 0");
    if (c.base_url.empty()) throw ConfigError(c.provider_id + ": base_url is empty");
}

// ---------------------------------------------------------------------------

bool ChatRequest::has_images() const {
    for (const auto& m : messages) {
        if (!m.images_png.empty()) return true;
    }
    return false;
}

json chat_request_to_wire(const ChatRequest& r, const std::string& model) {
    json messages = json::array();
    for (const auto& m : r.messages) {
        json content = json::array();
        for (const auto& png : m.images_png) {
            content.push_back({{"type", "image_png_b64"}, {"data", base64_encode(png)}});
        }
        content.push_back({{"type", "text"}, {"text", m.text}});
        messages.push_back({{"role", m.role}, {"content", std::move(content)}});
    }
    return {
        {"model", model},
        {"messages", std::move(messages)},
        {"temperature", r.temperature},
        {"max_tokens", r.max_tokens},
        {"response_format", r.response_format == ResponseFormat::Structured ? "structured" : "text"},
    };
}

ChatRequest chat_request_from_wire(const json& body) {
    ChatRequest r;
    try {
        for (const auto& m : body.at("messages")) {
            ChatMessage msg;
            msg.role = m.at("role").get<std::string>();
            for (const auto& part : m.at("content")) {
                const auto type = part.at("type").get<std::string>();
                if (type == "text") {
                    if (!msg.text.empty()) msg.text += "\n";
                    msg.text += part.at("text").get<std::string>();
                } else if (type == "image_png_b64") {
                    msg.images_png.push_back(base64_decode(part.at("data").get<std::string>()));
                } else {
                    throw ProviderError("unknown content part type '" + type + "'");
                }
            }
            r.messages.push_back(std::move(msg));
        }
        r.temperature = body.value("temperature", 0.0);
        r.max_tokens = body.value("max_tokens", 1024);
        r.response_format = body.value("response_format", "text") == "structured"
                                ? ResponseFormat::Structured
                                : ResponseFormat::Text;
    } catch (const json::exception& e) {
        throw ProviderError(std::string("malformed chat request: ") + e.what());
    }
    return r;
}

json chat_response_to_wire(const ChatResponse& r) {
    return {
        {"text", r.text},
        {"finish_reason", r.finish_reason},
        {"usage", {{"prompt_tokens", r.prompt_tokens}, {"completion_tokens", r.completion_tokens}}},
    };
}

ChatResponse chat_response_from_wire(const json& body) {
    ChatResponse r;
    try {
        r.text = body.at("text").get<std::string>();
        r.finish_reason = body.value("finish_reason", "");
        if (body.contains("usage")) {
            r.prompt_tokens = body["usage"].value("prompt_tokens", 0);
            r.completion_tokens = body["usage"].value("completion_tokens", 0);
        }
    } catch (const json::exception& e) {
        throw ProviderError(std::string("malformed chat response: ") + e.what());
    }
    return r;
}

std::string cache_key(std::string_view provider_id, std::string_view model, const json& wire_request) {
    // nlohmann::json objects are std::map backed, so dump() emits sorted keys.
    std::string material;
    material += provider_id;
    material += '\n';
    material += model;
    material += '\n';
    material += wire_request.dump();
    return sha256_hex(material);
}

json parse_structured_reply(const std::string& text) {
    std::string body = trim(text);
    if (body.starts_with("```")) {
        auto nl = body.find('\n');
        auto end = body.rfind("```");
        if (nl != std::string::npos && end != std::string::npos && end > nl) {
            body = trim(std::string_view(body).substr(nl + 1, end - nl - 1));
        }
    }
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded()) throw SchemaError("reply is not a single JSON value", text);
    return j;
}

// ---------------------------------------------------------------------------

double SystemClock::now_seconds() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void SystemClock::sleep_for(double seconds) {
    if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

double VirtualClock::now_seconds() {
    std::lock_guard lock(mu_);
    return now_;
}

void VirtualClock::sleep_for(double seconds) {
    std::lock_guard lock(mu_);
    sleeps_.push_back(seconds);
    if (seconds > 0) now_ += seconds;
}

std::vector<double> VirtualClock::sleeps() const {
    std::lock_guard lock(mu_);
    return sleeps_;
}

TokenBucket::TokenBucket(int requests_per_minute, std::shared_ptr<Clock> clock)
    : rate_per_sec_(requests_per_minute / 60.0),
      capacity_(requests_per_minute),
      tokens_(requests_per_minute),
      clock_(std::move(clock)) {
    last_ = clock_->now_seconds();
}

void TokenBucket::acquire() {
    std::unique_lock lock(mu_);
    for (;;) {
        const double now = clock_->now_seconds();
        tokens_ = std::min(capacity_, tokens_ + (now - last_) * rate_per_sec_);
        last_ = now;
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        // Sleeping while holding the lock keeps waiters in FIFO-ish order.
        clock_->sleep_for((1.0 - tokens_) / rate_per_sec_);
    }
}

InFlightLimiter::InFlightLimiter(int max_in_flight) : max_(std::max(1, max_in_flight)) {}

void InFlightLimiter::acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return active_ < max_; });
    ++active_;
    high_water_ = std::max(high_water_, active_);
}

void InFlightLimiter::release() {
    {
        std::lock_guard lock(mu_);
        --active_;
    }
    cv_.notify_one();
}

int InFlightLimiter::high_water() const {
    std::lock_guard lock(mu_);
    return high_water_;
}

bool is_retryable(const std::exception& e) {
    return dynamic_cast<const RateLimited*>(&e) != nullptr ||
           dynamic_cast<const Timeout*>(&e) != nullptr;
}

// ---------------------------------------------------------------------------

ResponseCache::ResponseCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path ResponseCache::path_for(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<std::string> ResponseCache::get(const std::string& key) const {
    const auto p = path_for(key);
    if (!fs::exists(p)) return std::nullopt;
    return read_file(p);
}

void ResponseCache::put(const std::string& key, std::string_view bytes) {
    write_file_atomic(path_for(key), bytes);
}

// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<Clock> clock_or_default(const ProviderRuntime& rt) {
    return rt.clock ? rt.clock : std::make_shared<SystemClock>();
}

}  // namespace

Provider::Provider(ProviderConfig config, std::shared_ptr<Backend> backend, ProviderRuntime runtime)
    : config_(std::move(config)),
      backend_(std::move(backend)),
      runtime_([&] {
          runtime.clock = clock_or_default(runtime);
          return runtime;
      }()),
      bucket_(config_.requests_per_minute, runtime_.clock),
      in_flight_(config_.max_in_flight) {
    validate(config_);
}

json Provider::call(const std::string& endpoint, const json& body, const CallContext& ctx) {
    const std::string key = cache_key(config_.provider_id + endpoint, config_.model, body);
    if (runtime_.cache) {
        if (auto hit = runtime_.cache->get(key)) {
            json cached = json::parse(*hit, nullptr, false);
            if (!cached.is_discarded()) {
                ++cache_hits_;
                return cached;
            }
        }
    }
    auto on_retry = [&](int attempt, double delay, const std::exception& e) {
        ++retries_;
        spdlog::warn("provider {}: attempt {} on {} failed ({}); retrying in {:.1f}s",
                     config_.provider_id, attempt, endpoint, e.what(), delay);
    };
    json response = with_rate_limit_and_retries(
        [&] {
            InFlightLimiter::Guard guard(in_flight_);
            ++backend_calls_;
            return backend_->post(endpoint, body, ctx);
        },
        &bucket_, *runtime_.clock, runtime_.retry, on_retry);
    if (runtime_.cache) runtime_.cache->put(key, response.dump());
    return response;
}

ChatResponse Provider::chat(const ChatRequest& request) {
    if (config_.kind != ProviderKind::Chat && config_.kind != ProviderKind::VisionChat) {
        throw PreconditionError("provider " + config_.provider_id + " is not a chat provider");
    }
    if (request.has_images() && config_.kind != ProviderKind::VisionChat) {
        throw PreconditionError("provider " + config_.provider_id +
                                " does not accept image attachments");
    }
    const json wire = chat_request_to_wire(request, config_.model);
    const std::size_t hits_before = cache_hits_.load();
    ChatResponse resp = chat_response_from_wire(call("/v1/chat", wire, {request.purpose}));
    resp.from_cache = cache_hits_.load() != hits_before;
    if (request.response_format == ResponseFormat::Structured) parse_structured_reply(resp.text);
    return resp;
}

std::string Provider::generate_image(const std::string& prompt, std::int64_t seed, int width,
                                     int height) {
    if (config_.kind != ProviderKind::ImageGen) {
        throw PreconditionError("provider " + config_.provider_id + " is not an image generator");
    }
    json body = {{"model", config_.model},
                 {"prompt", prompt},
                 {"seed", seed},
                 {"width", width},
                 {"height", height}};
    json resp = call("/v1/images", body, {"image"});
    if (!resp.contains("png_b64") || !resp["png_b64"].is_string()) {
        throw ProviderError("image response lacks png_b64");
    }
    return base64_decode(resp["png_b64"].get<std::string>());
}

double Provider::score_image_text(std::string_view png, const std::string& text) {
    if (config_.kind != ProviderKind::Scorer) {
        throw PreconditionError("provider " + config_.provider_id + " is not a scorer");
    }
    json body = {{"model", config_.model}, {"image_png_b64", base64_encode(png)}, {"text", text}};
    json resp = call("/v1/score", body, {"score"});
    if (!resp.contains("score") || !resp["score"].is_number()) {
        throw ProviderError("score response lacks a numeric score");
    }
    const double s = resp["score"].get<double>();
    if (!std::isfinite(s) || s < -1.0 || s > 1.0) {
        throw ProviderError("score out of [-1,1]: " + format_double(s));
    }
    return s;
}

ProviderStats Provider::stats() const {
    return {backend_calls_.load(), cache_hits_.load(), retries_.load(), in_flight_.high_water()};
}

// ---------------------------------------------------------------------------

void ProviderRegistry::add(ProviderPtr p) {
    const auto id = p->config().provider_id;
    providers_[id] = std::move(p);
}

ProviderPtr ProviderRegistry::get(const std::string& id) const {
    auto it = providers_.find(id);
    if (it == providers_.end()) throw ConfigError("unknown provider '" + id + "'");
    return it->second;
}

bool ProviderRegistry::contains(const std::string& id) const { return providers_.contains(id); }

std::vector<std::string> ProviderRegistry::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, p] : providers_) out.push_back(id);
    return out;
}

}  // namespace bias_audit
