#include "support.h"

#include "rvm/debugger.h"

#include <doctest.h>

#include <random>

using namespace rvm;
using namespace rvm::test;
using nlohmann::json;

namespace {

// A recorded sample guest plus a debug session over it.
struct Fixture {
    TempDir dir{"rvm-dbg"};
    GuestImage g;
    std::shared_ptr<const TraceLog> log;

    explicit Fixture(const std::string& which, const char* script = nullptr) : g(sample_guest(which)) {
        SimRecord r;
        r.checkpoint_interval = 50'000;
        r.run(g, script ? StimulusScript::parse(script) : guest_stimulus(which + ".stim"), path());
        log = std::make_shared<const TraceLog>(read_trace(path()));
    }
    std::filesystem::path path() const { return dir / "g.log"; }
    std::unique_ptr<DebugSession> session() const {
        return std::make_unique<DebugSession>(log, g.kernel_image, disk_of(g), path(), g.symbols);
    }
    Replayer replayer() const { return Replayer(log, g.kernel_image, disk_of(g), {path()}); }
};

json req(const std::string& cmd, json args = json::object()) { return json{{"id", 1}, {"cmd", cmd}, {"args", args}}; }

const char* kEcho = "AT 30 CONSOLE 68 69\nAT 60 CONSOLE 0a\nAT 80 CONSOLE 71\n";

}  // namespace

TEST_CASE("ready tasks resume with the context the table shows") {
    Fixture f("racey");
    Replayer r = f.replayer();
    std::mt19937_64 rng(3);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        r.seek(rng() % (f.log->final_icount() - 1));
        for (const TaskView& t : read_tasks(r.machine())) {
            if (t.state != "ready") continue;
            Replayer probe = f.replayer();
            probe.restore(r.snapshot());
            while (probe.prepare() != Replayer::Next::End && probe.prepare() != Replayer::Next::Halted) {
                if (attributed_task(probe.machine()) == t.task_id) break;
                probe.advance();
            }
            REQUIRE(attributed_task(probe.machine()) == t.task_id);
            CHECK(probe.machine().pc == t.pc);
            CHECK(probe.machine().regs == t.regs);
            ++checked;
        }
    }
    CHECK(checked >= 20);
}

TEST_CASE("breakpoints stop before the instruction, in the right task") {
    Fixture f("racey");
    auto s = f.session();
    const uint32_t loop = *f.g.symbols.lookup("racey0:loop");
    const uint32_t loop1 = *f.g.symbols.lookup("racey1:loop");
    const int id = s->set_breakpoint(loop1);
    for (int i = 0; i < 5; ++i) {
        const StopEvent e = s->cont();
        REQUIRE(e.reason == "breakpoint");
        CHECK(e.breakpoint == id);
        CHECK(e.pc == loop1);
        CHECK(s->replayer().machine().pc == loop1);
        CHECK(e.task_id == 1);
    }
    s->clear_breakpoint(id);
    // Task 0's code filtered to task 2 (echo) never fires.
    s->set_breakpoint(loop, 2);
    CHECK(s->cont().reason == "halt");
    CHECK_THROWS_AS(s->clear_breakpoint(99), DebugCommandError);
}

TEST_CASE("stops are deterministic across sessions") {
    Fixture f("racey");
    std::vector<StopEvent> runs[2];
    for (auto& out : runs) {
        auto s = f.session();
        s->set_breakpoint(*f.g.symbols.lookup("racey0:delay"));
        s->set_breakpoint(*f.g.symbols.lookup("racey1:loop"));
        for (int i = 0; i < 20; ++i) out.push_back(s->cont());
        out.push_back(s->step_task(0));
        out.push_back(s->reverse_step(0));
    }
    CHECK(runs[0] == runs[1]);
}

TEST_CASE("step and reverse-step agree with seek") {
    Fixture f("racey");
    auto s = f.session();
    std::mt19937_64 rng(11);
    s->run_to_icount(50'000);
    for (int i = 0; i < 30; ++i) {
        const int task = static_cast<int>(rng() % 3) - (rng() % 4 == 0 ? 1 : 0);
        const Digest before = s->replayer().state_hash();
        const ReplayPosition pos = s->replayer().position();
        const StopEvent fwd = s->step_task(task);
        if (fwd.reason != "step") continue;
        CHECK(fwd.task_id == task);
        const StopEvent back = s->reverse_step(task);
        CHECK(back.reason == "step");
        // Landing before the stepped instruction: at or after the start point.
        CHECK(pos <= back.position);
        CHECK(attributed_task(s->replayer().machine()) == task);
        Replayer oracle = f.replayer();
        oracle.seek_position(back.position);
        CHECK(oracle.state_hash() == s->replayer().state_hash());
        if (back.position == pos) CHECK(s->replayer().state_hash() == before);
        // Forward again retires the same instruction.
        const StopEvent again = s->step_task(task);
        CHECK(again == fwd);
    }
}

TEST_CASE("reverse-step right after a step restores the state exactly") {
    Fixture f("echo", kEcho);
    auto s = f.session();
    s->set_breakpoint(*f.g.symbols.lookup("echo:start"));
    REQUIRE(s->cont().reason == "breakpoint");
    int exact = 0;
    for (int i = 0; i < 40; ++i) {
        // Only when task 0's instruction is next does the step start where reverse lands.
        const bool next_is_task = attributed_task(s->replayer().machine()) == 0 &&
                                  s->replayer().prepare() == Replayer::Next::Execute;
        const Digest h = s->replayer().state_hash();
        const ReplayPosition p = s->replayer().position();
        const StopEvent fwd = s->step_task(0);
        if (fwd.reason != "step") break;
        s->reverse_step(0);
        if (next_is_task) {
            CHECK(s->replayer().state_hash() == h);
            CHECK(s->replayer().position() == p);
            ++exact;
        }
        CHECK(s->step_task(0) == fwd);
    }
    CHECK(exact >= 10);
}

TEST_CASE("reverse-step at the first instruction of a task") {
    Fixture f("echo", kEcho);
    auto s = f.session();
    try {
        s->reverse_step(0);
        FAIL("expected an error");
    } catch (const DebugCommandError& e) {
        CHECK(std::string(e.what()) == "at start: task 0 has no earlier instruction");
    }
    CHECK(s->replayer().icount() == 0);
    s->step_task(0);
    s->reverse_step(0);
    CHECK_THROWS_AS(s->reverse_step(0), DebugCommandError);
}

TEST_CASE("inspection is neutral") {
    Fixture f("echo", kEcho);
    auto plain = f.replayer();
    plain.run_to_end();

    auto s = f.session();
    s->set_breakpoint(*f.g.symbols.lookup("echo:start"));
    REQUIRE(s->cont().reason == "breakpoint");
    const Digest h = s->replayer().state_hash();
    for (const char* cmd : {"tasks", "regs", "where", "break-list", "attach"}) {
        CHECK(s->handle(req(cmd)).response["ok"] == true);
    }
    CHECK(s->handle(req("read-mem", {{"addr", "0x1000"}, {"len", 64}})).response["ok"] == true);
    CHECK(s->handle(req("events", {{"from", 1}, {"to", 5}})).response["ok"] == true);
    CHECK(s->replayer().state_hash() == h);

    const auto w = s->handle(req("write-mem", {{"addr", 0}, {"bytes", "00"}})).response;
    CHECK(w["ok"] == false);
    CHECK(w["error"] == "read-only replay");
    CHECK(s->replayer().state_hash() == h);

    s->step_task(0);
    s->reverse_step(0);
    s->clear_breakpoint(1);
    CHECK(s->cont().reason == "halt");
    CHECK(s->replayer().state_hash() == plain.state_hash());
    CHECK(s->replayer().icount() == plain.icount());
}

TEST_CASE("read-mem of the shared word at halt") {
    Fixture f("racey");
    auto s = f.session();
    REQUIRE(s->cont().reason == "halt");
    const auto r = s->handle(req("read-mem", {{"addr", "0x2000"}, {"len", 4}})).response;
    REQUIRE(r["ok"] == true);
    const uint32_t v = r["data"]["words"][0];
    CHECK(v == word_at(s->replayer().machine(), 0x2000));
    CHECK(v >= 1000);
    CHECK(v <= 2000);
    CHECK(r["data"]["hex"].get<std::string>().size() == 8);
    const uint32_t start = *f.g.symbols.lookup("racey1:start");
    const auto sym = s->handle(req("read-mem", {{"addr", "racey1:start"}, {"len", 4}})).response;
    REQUIRE(sym["ok"] == true);
    CHECK(sym["data"]["addr"] == start);
    CHECK(sym["data"]["words"][0] == word_at(s->replayer().machine(), start));
    CHECK(s->handle(req("read-mem", {{"addr", 0}, {"len", kMaxReadMem + 1}})).response["ok"] == false);
}

TEST_CASE("response and event shapes") {
    Fixture f("echo", kEcho);
    auto s = f.session();
    auto regs = s->handle(req("regs")).response;
    CHECK(regs["id"] == 1);
    CHECK(regs["ok"] == true);
    const auto& d = regs["data"];
    std::vector<std::string> keys;
    for (auto it = d.begin(); it != d.end(); ++it) keys.push_back(it.key());
    CHECK(keys == std::vector<std::string>{"pc", "r", "mode", "ie", "csrs", "icount", "task_id"});
    CHECK(d["r"].size() == 16);
    CHECK(d["mode"] == "supervisor");
    CHECK(d["task_id"] == kKernelTask);

    const auto hello = s->hello();
    CHECK(hello["event"] == "hello");
    CHECK(hello["protocol"] == kProtocolVersion);
    CHECK(hello["final_icount"] == f.log->final_icount());

    auto step = s->handle(req("step", {{"task", 0}}));
    REQUIRE(step.event.has_value());
    CHECK((*step.event)["event"] == "stopped");
    CHECK((*step.event)["reason"] == "step");
    CHECK((*step.event)["task_id"] == 0);
    CHECK(step.response["data"] == *step.event);

    const auto bad = s->handle(json{{"id", 7}, {"cmd", "frobnicate"}}).response;
    CHECK(bad["id"] == 7);
    CHECK(bad["ok"] == false);
    CHECK(s->handle(json{{"id", 8}}).response["error"] == "missing cmd");
    CHECK(s->handle(req("break-set", {{"addr", "0x100"}, {"task", -1}})).response["ok"] == false);

    const auto back = s->handle(req("run-to-icount", {{"n", 1234}}));
    CHECK(back.response["data"]["icount"] == 1234);
    CHECK(s->handle(req("run-to-icount", {{"n", f.log->final_icount() + 1}})).response["ok"] == false);

    const auto det = s->handle(req("detach"));
    CHECK(det.close);
}

TEST_CASE("tasks view while a task waits for input") {
    Fixture f("echo", "AT 200 CONSOLE 71\n");
    auto s = f.session();
    s->run_to_icount(f.log->final_icount() / 2);
    const auto tasks = read_tasks(s->replayer().machine());
    REQUIRE(tasks.size() == 1);
    CHECK(tasks[0].state == "blocked");
}

TEST_CASE("pause interrupts continue") {
    Fixture f("ticker");
    auto s = f.session();
    s->request_pause();
    // A pause requested before the command starts is dropped.
    CHECK(s->cont().reason == "halt");
}

TEST_CASE("address parsing") {
    CHECK(parse_address(json(16)) == 16);
    CHECK(parse_address(json("0x10")) == 16);
    CHECK(parse_address(json("16")) == 16);
    CHECK_THROWS_AS(parse_address(json("x")), DebugCommandError);
    CHECK_THROWS_AS(parse_address(json(-1)), DebugCommandError);
    CHECK_THROWS_AS(parse_address(json(true)), DebugCommandError);
}
