#include "rvm/debug_server.h"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <condition_variable>
#include <deque>
#include <fmt/format.h>
#include <mutex>
#include <set>
#include <thread>

namespace rvm {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;
using nlohmann::ordered_json;

std::pair<std::string, uint16_t> parse_endpoint(const std::string& s) {
    const auto colon = s.rfind(':');
    const std::string host = colon == std::string::npos ? "127.0.0.1" : s.substr(0, colon);
    const std::string port = colon == std::string::npos ? s : s.substr(colon + 1);
    try {
        size_t used = 0;
        const unsigned long p = std::stoul(port, &used);
        if (used == port.size() && p <= 65535) return {host.empty() ? "127.0.0.1" : host, static_cast<uint16_t>(p)};
    } catch (const std::exception&) {
    }
    throw Error("bad endpoint '" + s + "', expected HOST:PORT");
}

namespace {

class Connection : public std::enable_shared_from_this<Connection> {
public:
    virtual ~Connection() = default;
    virtual void start() = 0;
    virtual void send(std::string text) = 0;  // any thread
    virtual void close() = 0;                 // any thread
};

}  // namespace

struct DebugServer::Impl {
    explicit Impl(DebugSession& s) : session(s) {}

    DebugSession& session;
    asio::io_context ioc;
    std::optional<asio::executor_work_guard<asio::io_context::executor_type>> work;
    std::vector<std::pair<std::shared_ptr<tcp::acceptor>, bool>> acceptors;  // (acceptor, websocket)
    std::thread io_thread;
    std::thread engine_thread;

    struct Job {
        json request;
        Reply reply;
        std::function<void()> on_close;
    };
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Job> queue;
    bool stopping = false;
    std::atomic<bool> busy{false};
    std::atomic<bool> over{false};

    std::mutex conns_mu;
    std::set<std::shared_ptr<Connection>> conns;
    Reply listener;

    void on_message(const std::shared_ptr<Connection>& conn, const std::string& line);
    void dispatch(const std::string& line, Reply reply, std::function<void()> on_close);
    void engine_loop();
    void broadcast(const std::string& text);
    void remove(const std::shared_ptr<Connection>& c) {
        std::lock_guard lock(conns_mu);
        conns.erase(c);
    }
    void accept(const std::shared_ptr<tcp::acceptor>& acc, bool ws);
};

namespace {

class TcpConnection final : public Connection {
public:
    TcpConnection(tcp::socket sock, DebugServer::Impl& srv) : sock_(std::move(sock)), srv_(srv) {}

    void start() override {
        send(srv_.session.hello().dump());
        read();
    }

    void send(std::string text) override {
        auto self = shared_from_this();
        asio::post(sock_.get_executor(), [this, self, t = std::move(text)]() mutable {
            out_.push_back(std::move(t) + "\n");
            if (out_.size() == 1) write();
        });
    }

    void close() override {
        auto self = shared_from_this();
        asio::post(sock_.get_executor(), [this, self] {
            boost::system::error_code ec;
            sock_.shutdown(tcp::socket::shutdown_both, ec);
            sock_.close(ec);
        });
    }

private:
    void read() {
        auto self = shared_from_this();
        asio::async_read_until(sock_, buf_, '\n', [this, self](boost::system::error_code ec, size_t n) {
            if (ec) {
                srv_.remove(self);
                return;
            }
            std::string line(asio::buffers_begin(buf_.data()), asio::buffers_begin(buf_.data()) + static_cast<std::ptrdiff_t>(n));
            buf_.consume(n);
            srv_.on_message(self, line);
            read();
        });
    }

    void write() {
        auto self = shared_from_this();
        asio::async_write(sock_, asio::buffer(out_.front()), [this, self](boost::system::error_code ec, size_t) {
            if (ec) {
                srv_.remove(self);
                return;
            }
            out_.pop_front();
            if (!out_.empty()) write();
        });
    }

    tcp::socket sock_;
    DebugServer::Impl& srv_;
    asio::streambuf buf_;
    std::deque<std::string> out_;
};

class WsConnection final : public Connection {
public:
    WsConnection(tcp::socket sock, DebugServer::Impl& srv) : ws_(std::move(sock)), srv_(srv) {}

    void start() override {
        auto self = shared_from_this();
        send(srv_.session.hello().dump());
        ws_.async_accept([this, self](beast::error_code ec) {
            if (ec) {
                srv_.remove(self);
                return;
            }
            open_ = true;
            ws_.text(true);
            if (!out_.empty()) write();
            read();
        });
    }

    void send(std::string text) override {
        auto self = shared_from_this();
        asio::post(ws_.get_executor(), [this, self, t = std::move(text)]() mutable {
            out_.push_back(std::move(t));
            if (open_ && out_.size() == 1) write();
        });
    }

    void close() override {
        auto self = shared_from_this();
        asio::post(ws_.get_executor(), [this, self] {
            if (!open_) return;
            open_ = false;
            ws_.async_close(websocket::close_code::normal, [self](beast::error_code) {});
        });
    }

private:
    void read() {
        auto self = shared_from_this();
        ws_.async_read(buf_, [this, self](beast::error_code ec, size_t) {
            if (ec) {
                open_ = false;
                srv_.remove(self);
                return;
            }
            const std::string text = beast::buffers_to_string(buf_.data());
            buf_.consume(buf_.size());
            srv_.on_message(self, text);
            read();
        });
    }

    void write() {
        auto self = shared_from_this();
        ws_.async_write(asio::buffer(out_.front()), [this, self](beast::error_code ec, size_t) {
            if (ec) {
                open_ = false;
                srv_.remove(self);
                return;
            }
            out_.pop_front();
            if (open_ && !out_.empty()) write();
        });
    }

    websocket::stream<tcp::socket> ws_;
    DebugServer::Impl& srv_;
    beast::flat_buffer buf_;
    std::deque<std::string> out_;
    bool open_ = false;
};

std::string error_line(const std::string& what) {
    ordered_json r;
    r["id"] = nullptr;
    r["ok"] = false;
    r["error"] = what;
    return r.dump();
}

}  // namespace

void DebugServer::Impl::on_message(const std::shared_ptr<Connection>& conn, const std::string& line) {
    std::weak_ptr<Connection> weak = conn;
    dispatch(
        line,
        [weak](const std::string& text) {
            if (auto c = weak.lock()) c->send(text);
        },
        [this, weak] {
            if (auto c = weak.lock()) {
                c->close();
                remove(c);
            }
        });
}

void DebugServer::Impl::dispatch(const std::string& line, Reply reply, std::function<void()> on_close) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) return;
    json req;
    try {
        req = json::parse(line);
    } catch (const json::exception&) {
        reply(error_line("malformed request: not JSON"));
        return;
    }
    if (req.is_object() && req.value("cmd", "") == "pause") {
        const bool running = busy.load();
        if (running) session.request_pause();
        ordered_json r;
        r["id"] = ordered_json::parse(req.value("id", json()).dump());
        r["ok"] = true;
        r["data"]["running"] = running;
        reply(r.dump());
        return;
    }
    {
        std::lock_guard lock(mu);
        queue.push_back(Job{std::move(req), std::move(reply), std::move(on_close)});
    }
    cv.notify_one();
}

void DebugServer::Impl::broadcast(const std::string& text) {
    std::vector<std::shared_ptr<Connection>> targets;
    {
        std::lock_guard lock(conns_mu);
        targets.assign(conns.begin(), conns.end());
    }
    for (auto& c : targets) c->send(text);
    if (listener) listener(text);
}

void DebugServer::Impl::engine_loop() {
    for (;;) {
        Job job;
        {
            std::unique_lock lock(mu);
            cv.wait(lock, [&] { return stopping || !queue.empty(); });
            if (stopping) return;
            job = std::move(queue.front());
            queue.pop_front();
        }
        busy = true;
        DebugSession::Result r = session.handle(job.request);
        busy = false;
        job.reply(r.response.dump());
        if (r.event) broadcast(r.event->dump());
        if (session.ended()) over = true;
        if (r.close && job.on_close) job.on_close();
    }
}

void DebugServer::Impl::accept(const std::shared_ptr<tcp::acceptor>& acc, bool ws) {
    acc->async_accept([this, acc, ws](boost::system::error_code ec, tcp::socket sock) {
        if (ec) return;
        std::shared_ptr<Connection> c;
        if (ws) {
            c = std::make_shared<WsConnection>(std::move(sock), *this);
        } else {
            c = std::make_shared<TcpConnection>(std::move(sock), *this);
        }
        {
            std::lock_guard lock(conns_mu);
            conns.insert(c);
        }
        c->start();
        accept(acc, ws);
    });
}

DebugServer::DebugServer(DebugSession& session) : impl_(std::make_unique<Impl>(session)) {}

DebugServer::~DebugServer() { stop(); }

namespace {

std::shared_ptr<tcp::acceptor> open_acceptor(asio::io_context& ioc, const std::string& host, uint16_t port) {
    boost::system::error_code ec;
    const auto addr = asio::ip::make_address(host == "localhost" ? "127.0.0.1" : host, ec);
    if (ec) throw Error("bad listen address '" + host + "'");
    auto acc = std::make_shared<tcp::acceptor>(ioc);
    const tcp::endpoint ep(addr, port);
    acc->open(ep.protocol());
    acc->set_option(asio::socket_base::reuse_address(true));
    acc->bind(ep, ec);
    if (ec) throw Error(fmt::format("cannot listen on {}:{}: {}", host, port, ec.message()));
    acc->listen();
    return acc;
}

}  // namespace

uint16_t DebugServer::listen_tcp(const std::string& host, uint16_t port) {
    auto acc = open_acceptor(impl_->ioc, host, port);
    impl_->acceptors.emplace_back(acc, false);
    return acc->local_endpoint().port();
}

uint16_t DebugServer::listen_ws(const std::string& host, uint16_t port) {
    auto acc = open_acceptor(impl_->ioc, host, port);
    impl_->acceptors.emplace_back(acc, true);
    return acc->local_endpoint().port();
}

void DebugServer::start() {
    Impl& s = *impl_;
    s.work.emplace(asio::make_work_guard(s.ioc));
    for (auto& [acc, ws] : s.acceptors) s.accept(acc, ws);
    s.io_thread = std::thread([&s] { s.ioc.run(); });
    s.engine_thread = std::thread([&s] { s.engine_loop(); });
}

void DebugServer::stop() {
    Impl& s = *impl_;
    {
        std::lock_guard lock(s.mu);
        if (s.stopping) return;
        s.stopping = true;
    }
    s.cv.notify_all();
    s.session.request_pause();
    if (s.engine_thread.joinable()) s.engine_thread.join();
    asio::post(s.ioc, [&s] {
        for (auto& [acc, ws] : s.acceptors) {
            boost::system::error_code ec;
            acc->close(ec);
        }
        std::lock_guard lock(s.conns_mu);
        for (auto& c : s.conns) c->close();
    });
    s.work.reset();
    if (s.io_thread.joinable()) {
        // Give queued writes a moment, then stop outright.
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        s.ioc.stop();
        s.io_thread.join();
    }
}

void DebugServer::submit(const std::string& request_line, Reply reply) {
    impl_->dispatch(request_line, std::move(reply), {});
}

void DebugServer::set_event_listener(Reply listener) { impl_->listener = std::move(listener); }

bool DebugServer::session_over() const { return impl_->over.load(); }

}  // namespace rvm
