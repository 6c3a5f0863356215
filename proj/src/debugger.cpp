#include "rvm/debugger.h"

#include <fmt/format.h>

namespace rvm {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view task_state_name(uint32_t code) {
    switch (code) {
        case abi::kStateReady: return "ready";
        case abi::kStateRunning: return "running";
        case abi::kStateBlocked: return "blocked";
        case abi::kStateExited: return "exited";
        default: return "";
    }
}

ordered_json TaskView::to_json() const {
    return ordered_json{{"task_id", task_id}, {"state", state}, {"pc", pc}, {"regs", regs}, {"is_current", is_current}};
}

namespace {

uint32_t word_at(const MachineState& m, uint32_t addr) {
    uint32_t v = 0;
    if (!m.read_word(addr, v)) {
        throw GuestLayoutError(fmt::format("task table word at {:#x} is outside guest memory", addr));
    }
    return v;
}

}  // namespace

int attributed_task(const MachineState& m) {
    if (m.status.mode != CpuMode::User) return kKernelTask;
    uint32_t cur = 0;
    m.read_word(abi::kCurrentAddr, cur);
    return static_cast<int>(cur);
}

std::vector<TaskView> read_tasks(const MachineState& m) {
    const uint32_t n = word_at(m, abi::kNumTasksAddr);
    if (n > abi::kMaxTasks) {
        throw GuestLayoutError(fmt::format("NUM_TASKS is {}; at most {} tasks are plausible", n, abi::kMaxTasks));
    }
    const uint32_t current = word_at(m, abi::kCurrentAddr);
    const bool user = m.status.mode == CpuMode::User;
    if (user && n > 0 && current >= n) {
        throw GuestLayoutError(fmt::format("CURRENT is {} with {} tasks", current, n));
    }
    std::vector<TaskView> out;
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t d = abi::descriptor(i);
        const uint32_t state = word_at(m, d + abi::kDescState);
        const auto name = task_state_name(state);
        if (name.empty()) {
            throw GuestLayoutError(fmt::format("task {} has unknown state code {}", i, state));
        }
        TaskView v;
        v.task_id = static_cast<int>(i);
        v.state = std::string(name);
        v.is_current = user && i == current;
        if (v.is_current) {
            v.pc = m.pc;
            v.regs = m.regs;
        } else {
            v.pc = word_at(m, d + abi::kDescPc);
            for (uint32_t r = 0; r < 16; ++r) v.regs[r] = word_at(m, d + abi::kDescRegs + 4 * r);
        }
        out.push_back(std::move(v));
    }
    return out;
}

ordered_json StopEvent::to_json() const {
    ordered_json j{{"event", "stopped"}, {"reason", reason},     {"icount", icount},
                   {"task_id", task_id}, {"pc", pc},             {"retired", position.retired},
                   {"substep", position.substep}};
    if (breakpoint) j["breakpoint"] = *breakpoint;
    return j;
}

uint32_t parse_address(const json& v) {
    if (v.is_number_unsigned()) {
        const auto x = v.get<uint64_t>();
        if (x > UINT32_MAX) throw DebugCommandError("address out of range");
        return static_cast<uint32_t>(x);
    }
    if (v.is_number_integer()) {
        const auto x = v.get<int64_t>();
        if (x < 0 || x > UINT32_MAX) throw DebugCommandError("address out of range");
        return static_cast<uint32_t>(x);
    }
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        try {
            size_t used = 0;
            const unsigned long long x = std::stoull(s, &used, 0);
            if (used == s.size() && x <= UINT32_MAX) return static_cast<uint32_t>(x);
        } catch (const std::exception&) {
        }
        throw DebugCommandError("bad address '" + s + "'");
    }
    throw DebugCommandError("address must be a number or a string");
}

DebugSession::DebugSession(std::shared_ptr<const TraceLog> log, std::vector<uint8_t> kernel_image,
                           std::shared_ptr<const DiskImage> disk, std::filesystem::path log_path, SymbolTable symbols)
    : log_(log),
      replayer_(std::move(log), std::move(kernel_image), std::move(disk), Replayer::Options{std::move(log_path)}),
      symbols_(std::move(symbols)) {}

ordered_json DebugSession::hello() const {
    const TraceHeader& h = log_->header;
    ordered_json header{{"format_version", h.format_version},
                        {"isa_version", h.isa_version},
                        {"mem_size", h.mem_size},
                        {"counter_profile", to_string(h.counter_config.profile)},
                        {"checkpoint_interval", h.checkpoint_interval},
                        {"kernel_image_hash", to_hex(h.kernel_image_hash)},
                        {"disk_image_hash", to_hex(h.disk_image_hash)},
                        {"created_at", h.created_at}};
    return ordered_json{{"event", "hello"},
                        {"protocol", kProtocolVersion},
                        {"header", header},
                        {"final_icount", log_->final_icount()},
                        {"event_count", log_->events.size()},
                        {"complete", log_->complete()},
                        {"symbols", !symbols_.empty()},
                        {"icount", replayer_.icount()}};
}

StopEvent DebugSession::here(const std::string& reason) const {
    const MachineState& m = replayer_.machine();
    StopEvent s;
    s.reason = reason;
    s.icount = replayer_.icount();
    s.task_id = attributed_task(m);
    s.pc = m.pc;
    s.position = replayer_.position();
    return s;
}

std::optional<StopEvent> DebugSession::end_stop() {
    switch (replayer_.prepare()) {
        case Replayer::Next::Halted: return here("halt");
        case Replayer::Next::End: return here("end");
        default: return std::nullopt;
    }
}

int DebugSession::set_breakpoint(uint32_t addr, std::optional<int> task) {
    for (const auto& [id, bp] : breakpoints_) {
        if (bp.addr == addr && bp.task == task) return id;
    }
    const int id = next_bp_++;
    breakpoints_[id] = Breakpoint{id, addr, task};
    return id;
}

void DebugSession::clear_breakpoint(int id) {
    if (breakpoints_.erase(id) == 0) throw DebugCommandError(fmt::format("no breakpoint {}", id));
}

StopEvent DebugSession::cont() {
    take_pause();
    bool first = true;
    for (;;) {
        if (auto s = end_stop()) return *s;
        const MachineState& m = replayer_.machine();
        if (!first && m.status.mode == CpuMode::User && replayer_.prepare() == Replayer::Next::Execute) {
            const int current = attributed_task(m);
            for (const auto& [id, bp] : breakpoints_) {
                if (bp.addr == m.pc && (!bp.task || *bp.task == current)) {
                    StopEvent s = here("breakpoint");
                    s.breakpoint = id;
                    return s;
                }
            }
        }
        if (take_pause()) return here("pause");
        replayer_.advance();
        first = false;
    }
}

StopEvent DebugSession::step_task(int task) {
    take_pause();
    for (;;) {
        if (auto s = end_stop()) return *s;
        if (take_pause()) return here("pause");
        const int owner = attributed_task(replayer_.machine());
        const StepInfo info = replayer_.advance();
        if (info.retired && owner == task) {
            StopEvent s = here("step");
            s.task_id = task;
            return s;
        }
    }
}

std::optional<ReplayPosition> DebugSession::last_attributed_before(ReplayPosition end, int task) {
    std::vector<uint64_t> marks = replayer_.checkpoints().retired_marks_before(end.retired + 1);
    if (marks.empty() || marks.back() != 0) marks.push_back(0);
    ReplayPosition window_end = end;
    for (const uint64_t mark : marks) {
        const ReplayPosition start{mark, 0};
        if (!(start < window_end)) continue;
        replayer_.restore(replayer_.checkpoints().load_by_retired(mark));
        if (replayer_.position() != start) {
            replayer_.restore(Checkpoint{});
        }
        std::optional<ReplayPosition> found;
        while (replayer_.position() < window_end) {
            const ReplayPosition pos = replayer_.position();
            const int owner = attributed_task(replayer_.machine());
            const StepInfo info = replayer_.advance();
            if (!info.stepped) break;
            if (info.retired && owner == task) found = pos;
        }
        if (found) return found;
        window_end = start;
    }
    return std::nullopt;
}

StopEvent DebugSession::reverse_step(int task) {
    const ReplayPosition now = replayer_.position();
    const Replayer::Snapshot saved = replayer_.snapshot();
    std::optional<ReplayPosition> target;
    try {
        target = last_attributed_before(now, task);
    } catch (...) {
        replayer_.restore(saved);
        throw;
    }
    if (!target) {
        replayer_.restore(saved);
        throw DebugCommandError(task == kKernelTask ? "at start: the kernel has no earlier instruction"
                                                    : fmt::format("at start: task {} has no earlier instruction", task));
    }
    replayer_.seek_position(*target);
    StopEvent s = here("step");
    s.task_id = task;
    return s;
}

StopEvent DebugSession::run_to_icount(uint64_t target) {
    if (target < replayer_.icount()) {
        replayer_.seek(target);
        return here("icount");
    }
    if (target > log_->final_icount()) {
        throw DebugCommandError(fmt::format("icount {} is past the end of the log ({})", target, log_->final_icount()));
    }
    if (!replayer_.run_until(target)) {
        if (auto s = end_stop()) return *s;
    }
    return here("icount");
}

DebugSession::Result DebugSession::handle(const json& request) {
    Result r;
    json id = nullptr;
    try {
        if (!request.is_object()) throw DebugCommandError("request must be a JSON object");
        if (request.contains("id")) id = request["id"];
        if (!request.contains("cmd") || !request["cmd"].is_string()) throw DebugCommandError("missing cmd");
        const std::string cmd = request["cmd"].get<std::string>();
        const json args = request.contains("args") ? request["args"] : json::object();
        if (!args.is_object()) throw DebugCommandError("args must be an object");
        if (ended_ && cmd != "detach") throw DebugCommandError("session ended");
        ordered_json data = dispatch(cmd, args, r);
        r.response = ordered_json{{"id", id}, {"ok", true}, {"data", std::move(data)}};
    } catch (const DivergenceError& e) {
        ended_ = true;
        r.response = ordered_json{{"id", id}, {"ok", false}, {"error", e.what()}, {"divergence", e.divergence().to_json()}};
    } catch (const json::exception& e) {
        r.response = ordered_json{{"id", id}, {"ok", false}, {"error", std::string("malformed args: ") + e.what()}};
    } catch (const std::exception& e) {
        r.response = ordered_json{{"id", id}, {"ok", false}, {"error", e.what()}};
    }
    return r;
}

ordered_json DebugSession::dispatch(const std::string& cmd, const json& args, Result& r) {
    auto task_arg = [&](int fallback) {
        if (!args.contains("task") || args["task"].is_null()) return fallback;
        return args["task"].get<int>();
    };
    auto stop = [&](const StopEvent& s) {
        r.event = s.to_json();
        return s.to_json();
    };
    const MachineState& m = replayer_.machine();
    // Addresses may also name a symbol from the loaded table.
    auto address = [&](const json& v) {
        if (v.is_string()) {
            if (const auto a = symbols_.lookup(v.get<std::string>())) return *a;
        }
        return parse_address(v);
    };

    if (cmd == "attach") {
        ordered_json j = hello();
        j.erase("event");
        j["stop"] = here("attach").to_json();
        return j;
    }
    if (cmd == "tasks") {
        ordered_json list = ordered_json::array();
        for (const auto& t : read_tasks(m)) list.push_back(t.to_json());
        return list;
    }
    if (cmd == "regs") {
        return ordered_json{{"pc", m.pc},
                            {"r", m.regs},
                            {"mode", m.status.mode == CpuMode::User ? "user" : "supervisor"},
                            {"ie", m.status.ie},
                            {"csrs", m.csrs},
                            {"icount", replayer_.icount()},
                            {"task_id", attributed_task(m)}};
    }
    if (cmd == "read-mem") {
        const uint32_t addr = address(args.at("addr"));
        const uint32_t len = args.at("len").get<uint32_t>();
        if (len > kMaxReadMem) throw DebugCommandError(fmt::format("len is limited to {}", kMaxReadMem));
        if (uint64_t{addr} + len > m.mem.size()) throw DebugCommandError("range outside guest memory");
        std::string hex;
        for (uint32_t i = 0; i < len; ++i) hex += fmt::format("{:02x}", m.mem[addr + i]);
        ordered_json words = ordered_json::array();
        for (uint32_t i = 0; i + 4 <= len; i += 4) {
            words.push_back(uint32_t{m.mem[addr + i]} | uint32_t{m.mem[addr + i + 1]} << 8 |
                            uint32_t{m.mem[addr + i + 2]} << 16 | uint32_t{m.mem[addr + i + 3]} << 24);
        }
        return ordered_json{{"addr", addr}, {"len", len}, {"hex", hex}, {"words", words}};
    }
    if (cmd == "break-set") {
        std::optional<int> task;
        if (args.contains("task") && !args["task"].is_null()) task = args["task"].get<int>();
        if (task && *task < 0) throw DebugCommandError("breakpoints filter user tasks only");
        const uint32_t addr = address(args.at("addr"));
        const int bid = set_breakpoint(addr, task);
        return ordered_json{{"id", bid}, {"addr", addr}, {"task", task ? ordered_json(*task) : ordered_json()}};
    }
    if (cmd == "break-clear") {
        clear_breakpoint(args.at("id").get<int>());
        return ordered_json::object();
    }
    if (cmd == "break-list") {
        ordered_json list = ordered_json::array();
        for (const auto& [bid, bp] : breakpoints_) {
            list.push_back({{"id", bid}, {"addr", bp.addr}, {"task", bp.task ? ordered_json(*bp.task) : ordered_json()}});
        }
        return list;
    }
    if (cmd == "continue") return stop(cont());
    if (cmd == "step") return stop(step_task(task_arg(attributed_task(m))));
    if (cmd == "reverse-step") return stop(reverse_step(task_arg(attributed_task(m))));
    if (cmd == "run-to-icount") return stop(run_to_icount(args.at("n").get<uint64_t>()));
    if (cmd == "where") {
        ordered_json j{{"pc", m.pc}, {"icount", replayer_.icount()}, {"task_id", attributed_task(m)},
                       {"mode", m.status.mode == CpuMode::User ? "user" : "supervisor"}};
        const auto sym = symbols_.nearest(m.pc);
        j["symbol"] = sym ? ordered_json(*sym) : ordered_json();
        if (const ListingLine* l = symbols_.line_at(m.pc)) {
            j["unit"] = l->unit;
            j["line"] = l->line;
            j["source"] = l->text;
        }
        uint32_t w = 0;
        if (m.read_word(m.pc, w)) j["instruction"] = disassemble(decode(w));
        return j;
    }
    if (cmd == "events") {
        const auto& ev = log_->events;
        const uint64_t from = args.contains("from") ? args["from"].get<uint64_t>() : 1;
        const uint64_t to = args.contains("to") ? args["to"].get<uint64_t>() : (ev.empty() ? 0 : ev.back().seq);
        ordered_json list = ordered_json::array();
        for (const auto& e : ev) {
            if (e.seq >= from && e.seq <= to) list.push_back(ordered_json::parse(e.to_json_line()));
        }
        return ordered_json{{"events", list}, {"cursor", replayer_.cursor()}};
    }
    if (cmd == "detach") {
        r.close = true;
        return ordered_json::object();
    }
    if (cmd == "write-mem" || cmd == "write-reg") throw DebugCommandError("read-only replay");
    throw DebugCommandError("unknown command '" + cmd + "'");
}

}  // namespace rvm
