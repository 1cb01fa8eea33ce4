#pragma once

#include <sys/socket.h>

#include <httplib.h>

namespace bias_audit::detail {

// httplib defaults to SO_REUSEPORT, which lets a second server share a bound
// port silently. SO_REUSEADDR alone keeps restarts fast and makes a taken
// port fail to bind.
inline void exclusive_bind(httplib::Server& server) {
    server.set_socket_options([](socket_t sock) {
        int yes = 1;
        ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
}

}  // namespace bias_audit::detail
