#pragma once

#include "rvm/debugger.h"

#include <functional>
#include <memory>
#include <string>

namespace rvm {

// Serves one DebugSession over newline-delimited JSON on TCP and over a
// WebSocket endpoint (one JSON object per text frame). Requests from every
// client go through one queue and are applied by a single engine thread at
// instruction boundaries; `pause` bypasses the queue.
class DebugServer {
public:
    explicit DebugServer(DebugSession& session);
    ~DebugServer();
    DebugServer(const DebugServer&) = delete;
    DebugServer& operator=(const DebugServer&) = delete;

    // Return the bound port (pass 0 for an ephemeral one).
    uint16_t listen_tcp(const std::string& host, uint16_t port);
    uint16_t listen_ws(const std::string& host, uint16_t port);

    // Starts the network and engine threads.
    void start();
    void stop();

    using Reply = std::function<void(const std::string&)>;
    // In-process client (the CLI REPL). `reply` receives the response line;
    // stop events go to the listener set below.
    void submit(const std::string& request_line, Reply reply);
    void set_event_listener(Reply listener);

    bool session_over() const;

    struct Impl;

private:
    std::unique_ptr<Impl> impl_;
};

// "host:port" -> (host, port). Throws Error on malformed input.
std::pair<std::string, uint16_t> parse_endpoint(const std::string& s);

}  // namespace rvm
