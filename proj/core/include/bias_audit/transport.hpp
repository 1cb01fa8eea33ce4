#pragma once

#include <memory>
#include <string>
#include <thread>

#include "bias_audit/providers.hpp"

namespace httplib {
class Server;
}

namespace bias_audit {

// Vendor dialect translation for /v1/chat bodies.
json wire_chat_to_openai(const json& wire);
json openai_chat_to_wire(const json& response);
json wire_chat_to_anthropic(const json& wire);
json anthropic_chat_to_wire(const json& response);

/// Maps an HTTP status from a backend to the typed provider error hierarchy
/// and throws it. 2xx is a no-op.
void throw_for_status(int status, const std::string& context);

/// Serves backends over the wire contract: POST /v1/chat, /v1/images,
/// /v1/score and GET /healthz. A null backend answers 404.
class WireServer {
public:
    WireServer(std::shared_ptr<Backend> chat, std::shared_ptr<Backend> images,
               std::shared_ptr<Backend> scorer);
    ~WireServer();
    WireServer(const WireServer&) = delete;
    WireServer& operator=(const WireServer&) = delete;

    /// Binds and serves on a background thread; port 0 picks a free port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Serves on the calling thread until stop().
    void run(const std::string& host, int port);
    void stop();

private:
    void install_routes();

    std::shared_ptr<Backend> chat_;
    std::shared_ptr<Backend> images_;
    std::shared_ptr<Backend> scorer_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
};

}  // namespace bias_audit
