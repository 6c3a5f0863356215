// rvm: assemble guests, record, replay, compare and debug execution logs.

#include "rvm/debug_server.h"
#include "rvm/guest_kit.h"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <atomic>
#include <condition_variable>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <thread>
#include <unistd.h>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace rvm {
namespace {

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& p, std::span<const uint8_t> bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void print_summary(const RunSummary& s, bool with_console) {
    if (with_console && !s.console_output.empty()) {
        std::fwrite(s.console_output.data(), 1, s.console_output.size(), stdout);
        if (s.console_output.back() != '\n') std::fputc('\n', stdout);
    }
    fmt::print("exit: {}\nfinal icount: {}\nretired: {} (user {}, supervisor {})\nevents: {}\n", to_string(s.exit_reason),
               s.final_icount, s.retired, s.stats.user_retired, s.stats.supervisor_retired, s.event_count);
    fmt::print("irqs: {} (timer {}, console {})\ndevice reads: {}\nstate hash: {}\nwall: {:.1f} ms\n",
               s.stats.irq_deliveries, s.stats.timer_irqs, s.stats.console_irqs, s.stats.device_reads,
               to_hex(s.final_state_hash), s.wall_time_ms);
}

// ---------------------------------------------------------------------------

struct AsmArgs {
    std::string src;
    std::string out;
    std::string listing;
    bool disassemble = false;
};

int cmd_asm(const AsmArgs& a) {
    if (a.disassemble) {
        const auto bytes = read_file(a.src);
        const std::string text = disassemble_image(bytes);
        if (a.out.empty()) {
            fmt::print("{}", text);
        } else {
            std::ofstream(a.out) << text;
        }
        return 0;
    }
    if (a.out.empty()) throw CLI::ValidationError("asm", "-o is required");
    const AsmProgram prog = assemble(read_text(a.src), AsmOptions{abi_symbols(), 0, fs::path(a.src).stem().string()});
    write_bytes(a.out, prog.image);
    if (!a.listing.empty()) {
        std::ofstream l(a.listing);
        for (const auto& line : prog.listing) l << fmt::format("{:08x}  {:4}  {}\n", line.addr, line.line, line.text);
    }
    fmt::print("{}: {} bytes, {} labels\n", a.out, prog.image.size(), prog.symbols.size());
    return 0;
}

struct GuestArgs {
    std::string kernel;
    std::vector<std::string> tasks;  // name=path or path
    std::string banner;
    std::string out_dir = ".";
    std::string name = "guest";
};

int cmd_build_guest(const GuestArgs& a) {
    std::vector<GuestTask> tasks;
    for (const auto& arg : a.tasks) {
        const auto eq = arg.find('=');
        const fs::path path = eq == std::string::npos ? arg : arg.substr(eq + 1);
        const std::string name = eq == std::string::npos ? path.stem().string() : arg.substr(0, eq);
        tasks.push_back({name, read_text(path)});
    }
    const std::string banner = a.banner.empty() ? "" : read_text(a.banner);
    const GuestImage g = build_guest_image(read_text(a.kernel), tasks, banner);
    const fs::path dir = a.out_dir;
    fs::create_directories(dir);
    write_bytes(dir / (a.name + ".kernel.img"), g.kernel_image);
    write_bytes(dir / (a.name + ".disk.img"), g.disk_image);
    g.symbols.save(dir / (a.name + ".sym.json"));
    fmt::print("{}: kernel {} bytes, disk {} bytes, {} tasks\n", (dir / a.name).string(), g.kernel_image.size(),
               g.disk_image.size(), tasks.size());
    return 0;
}

struct RecordArgs {
    std::string kernel, disk, stimulus, out;
    std::string profile = "exact";
    uint64_t seed = 0;
    std::string count = "all";
    bool marked_only = false;
    bool allow_unusable = false;
    uint64_t max_instr = kDefaultMaxInstructions;
    uint64_t checkpoint_interval = kDefaultCheckpointInterval;
    bool interactive = false;
    bool quiet = false;
};

int cmd_record(const RecordArgs& a) {
    RecordOptions opts;
    const auto profile = profile_from_string(a.profile);
    if (!profile) throw CLI::ValidationError("--counter-profile", "expected exact, ppc or x86-flaky");
    opts.counter.profile = *profile;
    opts.counter.seed = a.seed;
    opts.counter.count_user = a.count != "supervisor";
    opts.counter.count_supervisor = a.count != "user";
    opts.counter.marked_only = a.marked_only;
    opts.allow_unusable_counter = a.allow_unusable;
    opts.max_instructions = a.max_instr;
    opts.checkpoint_interval = a.checkpoint_interval;

    const auto kernel = read_file(a.kernel);
    const auto disk = DiskImage::load(a.disk);
    const StimulusScript script = a.stimulus.empty() ? StimulusScript{} : StimulusScript::load(a.stimulus);

    StimulusQueue queue;
    if (a.interactive) {
        opts.interactive = &queue;
        opts.echo_console = true;
        // Blocking reads on stdin; the thread is abandoned when the run ends.
        std::thread([&queue] {
            uint8_t buf[256];
            for (;;) {
                const ssize_t n = ::read(STDIN_FILENO, buf, sizeof buf);
                if (n <= 0) return;
                queue.push(std::span<const uint8_t>(buf, static_cast<size_t>(n)));
            }
        }).detach();
    }
    const RunSummary s = record(kernel, disk, script, opts, a.out);
    if (!a.quiet) print_summary(s, !a.interactive);
    return 0;
}

struct ReplayArgs {
    std::string log, kernel, disk, shadow, profile;
    bool verify_only = false;
};

int cmd_replay(const ReplayArgs& a) {
    ReplayOptions opts;
    opts.shadow_log = a.shadow;
    if (!a.profile.empty()) opts.profile = profile_from_string(a.profile);
    const RunSummary s = replay(a.log, read_file(a.kernel), DiskImage::load(a.disk), opts);
    if (s.divergence) {
        fmt::print(stderr, "divergence: {}\n", s.divergence->describe());
        if (!a.verify_only) print_summary(s, false);
        return static_cast<int>(ExitCode::Divergence);
    }
    if (a.verify_only) {
        fmt::print("ok: {} events, final icount {}, state hash {}\n", s.event_count, s.final_icount,
                   to_hex(s.final_state_hash));
    } else {
        print_summary(s, true);
    }
    return 0;
}

int cmd_log_dump(const std::string& path, std::optional<uint64_t> from, std::optional<uint64_t> to) {
    const TraceLog log = read_trace(path);
    fmt::print("{}\n", log.header.to_json().dump());
    for (const Event& e : log.events) {
        if (from && e.seq < *from) continue;
        if (to && e.seq > *to) break;
        fmt::print("{}\n", e.to_json_line());
    }
    return 0;
}

int cmd_verify(const std::string& a, const std::string& b) {
    const LogComparison c = compare_logs(read_trace(a), read_trace(b));
    fmt::print("{}\n", c.message);
    return c.identical ? 0 : static_cast<int>(ExitCode::Divergence);
}

// ---------------------------------------------------------------------------
// debug

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

// REPL line -> protocol request. Returns nullopt for blank lines.
std::optional<json> repl_request(const std::string& line, int id) {
    std::istringstream in(line);
    std::vector<std::string> w;
    for (std::string t; in >> t;) w.push_back(t);
    if (w.empty()) return std::nullopt;
    auto num = [&](size_t i) -> json {
        if (i >= w.size()) throw Error("missing argument");
        return json(std::stoull(w[i], nullptr, 0));
    };
    auto task = [&](size_t i) -> json {
        if (i >= w.size()) return nullptr;
        return w[i] == "kernel" ? json(kKernelTask) : json(std::stoi(w[i]));
    };
    json req{{"id", id}};
    json args = json::object();
    const std::string& c = w[0];
    if (c == "tasks") {
        req["cmd"] = "tasks";
    } else if (c == "regs") {
        req["cmd"] = "regs";
    } else if (c == "x") {
        req["cmd"] = "read-mem";
        if (w.size() < 2) throw Error("usage: x ADDR [LEN]");
        args["addr"] = w[1];
        args["len"] = w.size() > 2 ? num(2) : json(16);
    } else if (c == "b") {
        req["cmd"] = "break-set";
        if (w.size() < 2) throw Error("usage: b ADDR|SYMBOL [TASK]");
        args["addr"] = w[1];
        args["task"] = task(2);
    } else if (c == "d") {
        req["cmd"] = "break-clear";
        args["id"] = num(1);
    } else if (c == "bl") {
        req["cmd"] = "break-list";
    } else if (c == "c") {
        req["cmd"] = "continue";
    } else if (c == "s") {
        req["cmd"] = "step";
        args["task"] = task(1);
    } else if (c == "rs") {
        req["cmd"] = "reverse-step";
        args["task"] = task(1);
    } else if (c == "goto") {
        req["cmd"] = "run-to-icount";
        args["n"] = num(1);
    } else if (c == "where") {
        req["cmd"] = "where";
    } else if (c == "events") {
        req["cmd"] = "events";
        if (w.size() > 1) args["from"] = num(1);
        if (w.size() > 2) args["to"] = num(2);
    } else if (c == "q") {
        req["cmd"] = "detach";
    } else {
        throw Error("unknown command '" + c + "' (tasks regs x b d bl c s rs goto where events q)");
    }
    req["args"] = args;
    return req;
}

struct DebugArgs {
    std::string log, kernel, disk, symbols, listen, ws;
};

int cmd_debug(const DebugArgs& a) {
    auto log = std::make_shared<const TraceLog>(read_trace(a.log));
    SymbolTable symbols;
    if (!a.symbols.empty()) symbols = SymbolTable::load(a.symbols);
    DebugSession session(log, read_file(a.kernel), DiskImage::load(a.disk), a.log, std::move(symbols));
    DebugServer server(session);
    bool networked = false;
    if (!a.listen.empty()) {
        const auto [host, port] = parse_endpoint(a.listen);
        fmt::print("tcp: {}:{}\n", host, server.listen_tcp(host, port));
        networked = true;
    }
    if (!a.ws.empty()) {
        const auto [host, port] = parse_endpoint(a.ws);
        fmt::print("ws: {}:{}\n", host, server.listen_ws(host, port));
        networked = true;
    }
    std::mutex out_mu;
    std::condition_variable printed_cv;
    uint64_t printed = 0;
    server.set_event_listener([&](const std::string& text) {
        std::lock_guard lock(out_mu);
        const json e = json::parse(text);
        fmt::print("[stopped: {} at icount {}, task {}, pc 0x{:08x}]\n", e.value("reason", "?"), e.value("icount", 0),
                   e.value("task_id", 0), e.value("pc", 0u));
        std::fflush(stdout);
        ++printed;
        printed_cv.notify_all();
    });
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.start();
    fmt::print("{}\n", session.hello().dump());
    std::fflush(stdout);

    int id = 0;
    std::string line;
    bool quit = false;
    while (!quit && !server.session_over() && !g_interrupted) {
        {
            std::lock_guard lock(out_mu);
            fmt::print("(rvm) ");
            std::fflush(stdout);
        }
        if (!std::getline(std::cin, line)) break;
        std::optional<json> req;
        try {
            req = repl_request(line, ++id);
        } catch (const std::exception& e) {
            fmt::print("error: {}\n", e.what());
            continue;
        }
        if (!req) continue;
        quit = (*req)["cmd"] == "detach";
        std::promise<std::string> reply;
        auto done = reply.get_future();
        uint64_t printed_before = 0;
        {
            std::lock_guard lock(out_mu);
            printed_before = printed;
        }
        server.submit(req->dump(), [&reply](const std::string& text) { reply.set_value(text); });
        const ordered_json resp = ordered_json::parse(done.get());
        std::unique_lock lock(out_mu);
        if (resp.contains("data") && resp["data"].contains("event")) {
            // Let the listener print the stop before the next prompt.
            printed_cv.wait_for(lock, std::chrono::seconds(1), [&] { return printed > printed_before; });
        }
        if (!resp.value("ok", false)) {
            fmt::print("error: {}\n", resp.value("error", "?"));
        } else if (resp.contains("data") && !resp["data"].contains("event")) {
            // Stop results are printed by the event listener.
            const auto& data = resp["data"];
            if (data.is_array()) {
                for (const auto& item : data) fmt::print("{}\n", item.dump());
            } else if (!data.empty()) {
                fmt::print("{}\n", data.dump());
            }
        }
    }
    // Input closed but clients may still be attached: keep serving.
    if (!quit && networked) {
        while (!server.session_over() && !g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    server.stop();
    return session.ended() && !session.replayer().finished() ? static_cast<int>(ExitCode::Divergence) : 0;
}

int run(int argc, char** argv) {
    CLI::App app{"rvm: deterministic record/replay virtual machine"};
    app.require_subcommand(1);

    AsmArgs asm_args;
    auto* asm_cmd = app.add_subcommand("asm", "Assemble a source file into a flat image");
    asm_cmd->add_option("src", asm_args.src, "Source (or image with --disassemble)")->required();
    asm_cmd->add_option("-o,--out", asm_args.out, "Output image");
    asm_cmd->add_option("--listing", asm_args.listing, "Write an address listing");
    asm_cmd->add_flag("--disassemble", asm_args.disassemble, "Print source that reassembles to the image");

    GuestArgs guest_args;
    auto* guest_cmd = app.add_subcommand("build-guest", "Link kernel and tasks into kernel/disk images and symbols");
    guest_cmd->add_option("--kernel", guest_args.kernel, "Kernel source")->required();
    guest_cmd->add_option("--task", guest_args.tasks, "Task source, NAME=PATH or PATH (repeatable, in task order)");
    guest_cmd->add_option("--banner", guest_args.banner, "Text stored in disk sector 0");
    guest_cmd->add_option("--out-dir", guest_args.out_dir, "Output directory");
    guest_cmd->add_option("--name", guest_args.name, "Output file prefix");

    RecordArgs rec;
    auto* rec_cmd = app.add_subcommand("record", "Run a guest live and write an execution log");
    rec_cmd->add_option("--kernel", rec.kernel)->required();
    rec_cmd->add_option("--disk", rec.disk)->required();
    rec_cmd->add_option("--stimulus", rec.stimulus, "Stimulus script");
    rec_cmd->add_option("--counter-profile", rec.profile)->check(CLI::IsMember({"exact", "ppc", "x86-flaky"}));
    rec_cmd->add_option("--seed", rec.seed, "Noise seed for x86-flaky");
    rec_cmd->add_option("--count", rec.count, "Modes the counter admits")->check(CLI::IsMember({"all", "user", "supervisor"}));
    rec_cmd->add_flag("--marked-only", rec.marked_only, "Count only while the MARK CSR is set");
    rec_cmd->add_flag("--allow-unusable-counter", rec.allow_unusable, "Record with x86-flaky anyway");
    rec_cmd->add_option("--out", rec.out)->required();
    rec_cmd->add_option("--max-instr", rec.max_instr);
    rec_cmd->add_option("--checkpoint-interval", rec.checkpoint_interval)->check(CLI::PositiveNumber);
    rec_cmd->add_flag("--interactive", rec.interactive, "Feed host stdin to the guest console");
    rec_cmd->add_flag("--quiet", rec.quiet);

    ReplayArgs rep;
    auto* rep_cmd = app.add_subcommand("replay", "Re-execute a log and check its state hashes");
    rep_cmd->add_option("--log", rep.log)->required();
    rep_cmd->add_option("--kernel", rep.kernel)->required();
    rep_cmd->add_option("--disk", rep.disk)->required();
    rep_cmd->add_flag("--verify-only", rep.verify_only, "Print only the verdict");
    rep_cmd->add_option("--shadow-log", rep.shadow, "Write the events observed during replay");
    rep_cmd->add_option("--counter-profile", rep.profile, "Replay under another counter model")
        ->check(CLI::IsMember({"exact", "ppc", "x86-flaky"}));

    std::string dump_path;
    std::optional<uint64_t> dump_from, dump_to;
    auto* log_cmd = app.add_subcommand("log", "Inspect logs");
    log_cmd->require_subcommand(1);
    auto* dump_cmd = log_cmd->add_subcommand("dump", "Print the header and events");
    dump_cmd->add_option("log", dump_path)->required();
    dump_cmd->add_option("--from", dump_from, "First seq");
    dump_cmd->add_option("--to", dump_to, "Last seq");

    std::string va, vb;
    auto* verify_cmd = app.add_subcommand("verify", "Compare two logs and report the first difference");
    verify_cmd->add_option("a", va)->required();
    verify_cmd->add_option("b", vb)->required();

    DebugArgs dbg;
    auto* dbg_cmd = app.add_subcommand("debug", "Replay a log under debugger control");
    dbg_cmd->add_option("--log", dbg.log)->required();
    dbg_cmd->add_option("--kernel", dbg.kernel)->required();
    dbg_cmd->add_option("--disk", dbg.disk)->required();
    dbg_cmd->add_option("--symbols", dbg.symbols, "Symbol file from build-guest");
    dbg_cmd->add_option("--listen", dbg.listen, "HOST:PORT for newline-delimited JSON over TCP");
    dbg_cmd->add_option("--ws", dbg.ws, "HOST:PORT for the WebSocket endpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::Usage);
    }

    try {
        if (*asm_cmd) return cmd_asm(asm_args);
        if (*guest_cmd) return cmd_build_guest(guest_args);
        if (*rec_cmd) return cmd_record(rec);
        if (*rep_cmd) return cmd_replay(rep);
        if (*dump_cmd) return cmd_log_dump(dump_path, dump_from, dump_to);
        if (*verify_cmd) return cmd_verify(va, vb);
        if (*dbg_cmd) return cmd_debug(dbg);
    } catch (const CLI::ValidationError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return static_cast<int>(ExitCode::Usage);
    } catch (const Error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return static_cast<int>(ExitCode::Usage);
    }
    return static_cast<int>(ExitCode::Usage);
}

}  // namespace
}  // namespace rvm

int main(int argc, char** argv) { return rvm::run(argc, argv); }
