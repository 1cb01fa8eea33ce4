#include "bias_audit/transport.hpp"

#include <cstdlib>
#include <regex>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "http_server_options.hpp"

namespace bias_audit {

namespace {

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path_prefix;
};

ParsedUrl parse_base_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)", std::regex::icase);
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw ConfigError("unsupported base_url '" + url + "'");
    std::string prefix = m[2].matched ? m[2].str() : "";
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {m[1].str(), prefix};
}

std::string error_snippet(const std::string& body) {
    constexpr std::size_t kMax = 200;
    return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

class HttpBackend : public Backend {
public:
    explicit HttpBackend(ProviderConfig config)
        : config_(std::move(config)), url_(parse_base_url(config_.base_url)) {}

    json post(const std::string& endpoint, const json& body, const CallContext&) override {
        std::string path = url_.path_prefix + endpoint;
        json payload = body;
        if (endpoint == "/v1/chat" && config_.api_style != ApiStyle::Wire) {
            if (config_.api_style == ApiStyle::OpenAI) {
                path = url_.path_prefix + "/chat/completions";
                payload = wire_chat_to_openai(body);
            } else {
                path = url_.path_prefix + "/v1/messages";
                payload = wire_chat_to_anthropic(body);
            }
        } else if (config_.api_style != ApiStyle::Wire) {
            throw ConfigError(config_.provider_id + ": api_style " +
                              std::string(to_string(config_.api_style)) + " only supports chat");
        }

        httplib::Headers headers;
        const std::string env = config_.auth_env.empty() ? default_auth_env(config_.provider_id)
                                                         : config_.auth_env;
        if (const char* key = std::getenv(env.c_str()); key && *key) {
            if (config_.api_style == ApiStyle::Anthropic) {
                headers.emplace("x-api-key", key);
                headers.emplace("anthropic-version", "2023-06-01");
            } else {
                headers.emplace("Authorization", std::string("Bearer ") + key);
            }
        }

        httplib::Client client(url_.scheme_host_port);
        const auto secs = static_cast<time_t>(config_.timeout_seconds);
        const auto usecs = static_cast<time_t>((config_.timeout_seconds - secs) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);

        const std::string context = config_.provider_id + " POST " + path;
        auto res = client.Post(path, headers, payload.dump(), "application/json");
        if (!res) {
            const auto err = res.error();
            if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) {
                throw Timeout(context + ": " + httplib::to_string(err));
            }
            throw ProviderError(context + ": " + httplib::to_string(err));
        }
        if (res->status < 200 || res->status >= 300) {
            spdlog::debug("{} -> {} {}", context, res->status, error_snippet(res->body));
            throw_for_status(res->status, context + " (" + error_snippet(res->body) + ")");
        }
        json out = json::parse(res->body, nullptr, false);
        if (out.is_discarded()) throw ProviderError(context + ": response is not JSON");
        if (endpoint == "/v1/chat") {
            if (config_.api_style == ApiStyle::OpenAI) return openai_chat_to_wire(out);
            if (config_.api_style == ApiStyle::Anthropic) return anthropic_chat_to_wire(out);
        }
        return out;
    }

private:
    ProviderConfig config_;
    ParsedUrl url_;
};

}  // namespace

std::shared_ptr<Backend> make_http_backend(const ProviderConfig& config) {
    return std::make_shared<HttpBackend>(config);
}

void throw_for_status(int status, const std::string& context) {
    if (status >= 200 && status < 300) return;
    const std::string what = context + ": HTTP " + std::to_string(status);
    switch (status) {
        case 401:
        case 403:
            throw AuthError(what);
        case 408:
        case 504:
            throw Timeout(what);
        case 422:
            throw ContentRefused(what);
        case 429:
            throw RateLimited(what);
        default:
            throw ProviderError(what);
    }
}

// ---------------------------------------------------------------------------
// Dialects

json wire_chat_to_openai(const json& wire) {
    json messages = json::array();
    for (const auto& m : wire.at("messages")) {
        json content = json::array();
        for (const auto& part : m.at("content")) {
            if (part.at("type") == "text") {
                content.push_back({{"type", "text"}, {"text", part.at("text")}});
            } else {
                content.push_back(
                    {{"type", "image_url"},
                     {"image_url",
                      {{"url", "data:image/png;base64," + part.at("data").get<std::string>()}}}});
            }
        }
        messages.push_back({{"role", m.at("role")}, {"content", std::move(content)}});
    }
    json out = {{"model", wire.at("model")},
                {"messages", std::move(messages)},
                {"temperature", wire.value("temperature", 0.0)},
                {"max_tokens", wire.value("max_tokens", 1024)}};
    if (wire.value("response_format", "text") == "structured") {
        out["response_format"] = {{"type", "json_object"}};
    }
    return out;
}

json openai_chat_to_wire(const json& response) {
    try {
        const auto& choice = response.at("choices").at(0);
        json usage = response.value("usage", json::object());
        return {{"text", choice.at("message").value("content", "")},
                {"finish_reason", choice.value("finish_reason", "")},
                {"usage",
                 {{"prompt_tokens", usage.value("prompt_tokens", 0)},
                  {"completion_tokens", usage.value("completion_tokens", 0)}}}};
    } catch (const json::exception& e) {
        throw ProviderError(std::string("malformed OpenAI-style response: ") + e.what());
    }
}

json wire_chat_to_anthropic(const json& wire) {
    std::string system;
    json messages = json::array();
    for (const auto& m : wire.at("messages")) {
        if (m.at("role") == "system") {
            for (const auto& part : m.at("content")) {
                if (part.at("type") == "text") {
                    if (!system.empty()) system += "\n";
                    system += part.at("text").get<std::string>();
                }
            }
            continue;
        }
        json content = json::array();
        for (const auto& part : m.at("content")) {
            if (part.at("type") == "text") {
                content.push_back({{"type", "text"}, {"text", part.at("text")}});
            } else {
                content.push_back({{"type", "image"},
                                   {"source",
                                    {{"type", "base64"},
                                     {"media_type", "image/png"},
                                     {"data", part.at("data")}}}});
            }
        }
        messages.push_back({{"role", m.at("role")}, {"content", std::move(content)}});
    }
    json out = {{"model", wire.at("model")},
                {"messages", std::move(messages)},
                {"temperature", wire.value("temperature", 0.0)},
                {"max_tokens", wire.value("max_tokens", 1024)}};
    if (!system.empty()) out["system"] = system;
    return out;
}

json anthropic_chat_to_wire(const json& response) {
    try {
        std::string text;
        for (const auto& block : response.at("content")) {
            if (block.value("type", "") == "text") text += block.at("text").get<std::string>();
        }
        json usage = response.value("usage", json::object());
        return {{"text", text},
                {"finish_reason", response.value("stop_reason", "")},
                {"usage",
                 {{"prompt_tokens", usage.value("input_tokens", 0)},
                  {"completion_tokens", usage.value("output_tokens", 0)}}}};
    } catch (const json::exception& e) {
        throw ProviderError(std::string("malformed Anthropic-style response: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// WireServer

WireServer::WireServer(std::shared_ptr<Backend> chat, std::shared_ptr<Backend> images,
                       std::shared_ptr<Backend> scorer)
    : chat_(std::move(chat)),
      images_(std::move(images)),
      scorer_(std::move(scorer)),
      server_(std::make_unique<httplib::Server>()) {
    detail::exclusive_bind(*server_);
    install_routes();
}

WireServer::~WireServer() { stop(); }

void WireServer::install_routes() {
    auto route = [this](const std::string& endpoint, std::shared_ptr<Backend> backend) {
        server_->Post(endpoint, [endpoint, backend](const httplib::Request& req,
                                                    httplib::Response& res) {
            auto fail = [&](int status, const std::string& msg) {
                res.status = status;
                res.set_content(json{{"error", msg}}.dump(), "application/json");
            };
            if (!backend) return fail(404, "endpoint not served");
            json body = json::parse(req.body, nullptr, false);
            if (body.is_discarded() || !body.is_object()) return fail(400, "body is not a JSON object");
            try {
                res.set_content(backend->post(endpoint, body, {}).dump(), "application/json");
            } catch (const AuthError& e) {
                fail(401, e.what());
            } catch (const RateLimited& e) {
                fail(429, e.what());
            } catch (const Timeout& e) {
                fail(504, e.what());
            } catch (const ContentRefused& e) {
                fail(422, e.what());
            } catch (const ProviderError& e) {
                fail(400, e.what());
            } catch (const json::exception& e) {
                fail(400, e.what());
            } catch (const std::exception& e) {
                fail(500, e.what());
            }
        });
    };
    route("/v1/chat", chat_);
    route("/v1/images", images_);
    route("/v1/score", scorer_);
    server_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"status":"ok"})", "application/json");
    });
}

int WireServer::start(const std::string& host, int port) {
    int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw PortInUse("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

void WireServer::run(const std::string& host, int port) {
    if (!server_->listen(host, port)) throw PortInUse("cannot listen on " + host + ":" + std::to_string(port));
}

void WireServer::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace bias_audit
