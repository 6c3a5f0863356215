#include "support.h"

#include <doctest.h>

#include <fstream>
#include <random>

using namespace rvm;
using namespace rvm::test;

namespace {

DeviceState devices_with(std::shared_ptr<const DiskImage> disk) {
    DeviceState d;
    d.disk.image = std::move(disk);
    return d;
}

// ~8000 instructions, then HALT.
const char* kCounting = R"(
        ADDI r1, r0, 0
        LI   r2, 4000
loop:   ADDI r1, r1, 1
        BNE  r1, r2, loop
        HALT
)";

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
    std::ofstream out(p);
    for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST_CASE("event lines have a fixed key order") {
    CHECK(Event::irq(5, 1).to_json_line() == R"({"seq":0,"icount":5,"kind":"IrqDelivery","line":1})");
    Event r = Event::read(7, reg::kConsoleRx, 0x41);
    r.seq = 3;
    CHECK(r.to_json_line() == R"({"seq":3,"icount":7,"kind":"DeviceRead","addr":4026531844,"value":65})");
}

TEST_CASE("writer ordering rules") {
    TempDir dir;
    TraceWriter w(dir / "a.log", TraceHeader{});
    Event a = Event::irq(100, 0);
    a.seq = 1;
    Event b = Event::irq(100, 1);
    b.seq = 2;
    w.append(a);
    w.append(b);  // same icount, later seq
    Event back = Event::irq(99, 0);
    back.seq = 3;
    CHECK_THROWS_AS(w.append(back), CorruptLogError);
    Event dup = Event::irq(200, 0);
    dup.seq = 2;
    CHECK_THROWS_AS(w.append(dup), CorruptLogError);
    Event h = Event::halt(300);
    h.seq = 3;
    w.append(h);
    Event after = Event::irq(300, 0);
    after.seq = 4;
    CHECK_THROWS_AS(w.append(after), CorruptLogError);
}

TEST_CASE("1000 events round-trip through the file format") {
    TempDir dir;
    TraceHeader h;
    h.counter_config.profile = CounterProfile::PpcMpc7441;
    h.counter_config.count_supervisor = false;
    h.checkpoint_interval = 1234;
    h.kernel_image_hash = Sha256::of(std::vector<uint8_t>{1, 2, 3});
    h.created_at = "2020-01-01T00:00:00Z";
    std::vector<Event> events;
    std::mt19937_64 rng(3);
    uint64_t icount = 0;
    for (uint64_t seq = 1; seq <= 999; ++seq) {
        icount += rng() % 50;
        Event e;
        switch (rng() % 3) {
            case 0: e = Event::irq(icount, rng() % 2); break;
            case 1: e = Event::read(icount, reg::kTimerNow, static_cast<uint32_t>(rng())); break;
            default: {
                Digest d;
                for (auto& b : d) b = static_cast<uint8_t>(rng());
                e = Event::state_hash(icount, d);
            }
        }
        e.seq = seq;
        events.push_back(e);
    }
    Event halt = Event::halt(icount + 1);
    halt.seq = 1000;
    events.push_back(halt);
    {
        TraceWriter w(dir / "t.log", h);
        for (const auto& e : events) w.append(e);
    }
    const TraceLog log = read_trace(dir / "t.log");
    CHECK(log.events == events);
    CHECK(log.header.to_json() == h.to_json());
    CHECK(log.complete());
    CHECK(log.final_icount() == icount + 1);
}

TEST_CASE("reader rejects corrupt logs") {
    TempDir dir;
    const std::string header = TraceHeader{}.to_json().dump();
    write_lines(dir / "bad_json.log", {header, "{not json"});
    CHECK_THROWS_AS(read_trace(dir / "bad_json.log"), CorruptLogError);
    write_lines(dir / "backwards.log", {header, R"({"seq":1,"icount":100,"kind":"IrqDelivery","line":0})",
                                        R"({"seq":2,"icount":99,"kind":"IrqDelivery","line":0})"});
    CHECK_THROWS_AS(read_trace(dir / "backwards.log"), CorruptLogError);
    write_lines(dir / "after_halt.log", {header, R"({"seq":1,"icount":100,"kind":"Halt"})",
                                         R"({"seq":2,"icount":100,"kind":"IrqDelivery","line":0})"});
    CHECK_THROWS_AS(read_trace(dir / "after_halt.log"), CorruptLogError);
    write_lines(dir / "kind.log", {header, R"({"seq":1,"icount":100,"kind":"Bogus"})"});
    CHECK_THROWS_AS(read_trace(dir / "kind.log"), CorruptLogError);
    CHECK_THROWS_AS(read_trace(dir / "missing.log"), CorruptLogError);
}

TEST_CASE("serialization is canonical and sensitive") {
    auto disk = empty_disk();
    const MachineState m = reset(bare_image(kCounting));
    const DeviceState d = devices_with(disk);
    const CounterConfig cfg;
    const auto a = serialize_state(m, CounterState{}, cfg, d);
    CHECK(a == serialize_state(m, CounterState{}, cfg, d));
    CHECK(serialize_pieces(m, CounterState{}, cfg, d).digest() == Sha256::of(a));

    MachineState one_byte = m;
    one_byte.mem[0x8000] ^= 1;
    CHECK(serialize_state(one_byte, CounterState{}, cfg, d) != a);

    MachineState r5 = m;
    r5.regs[5] ^= 1;
    CHECK(state_hash(r5, CounterState{}, cfg, d) != state_hash(m, CounterState{}, cfg, d));

    // Host-side device state is outside the hash.
    DeviceState noisy = d;
    noisy.console_tx_sink = {1, 2, 3};
    noisy.timer_deadline_ms = 77;
    CHECK(state_hash(m, CounterState{}, cfg, noisy) == state_hash(m, CounterState{}, cfg, d));

    DeviceState overlay = d;
    overlay.disk.overlay[2] = Sector{};
    CHECK(state_hash(m, CounterState{}, cfg, overlay) != state_hash(m, CounterState{}, cfg, d));
}

TEST_CASE("deserialize(serialize(s)) == s") {
    auto disk = empty_disk();
    MachineState m = reset(bare_image(kCounting));
    m.regs[3] = 0xDEADBEEF;
    m.pc = 0x40;
    m.status = Status{CpuMode::User, true};
    m.csrs[static_cast<unsigned>(Csr::Epc)] = 0x1234;
    m.retired = 99;
    m.mode_switches = 4;
    CounterConfig ppc;
    ppc.profile = CounterProfile::PpcMpc7441;
    const CounterState c = counter_from_checkpoint(ppc, 95, 4);
    DeviceState d = devices_with(disk);
    Sector s{};
    s[7] = 9;
    d.disk.overlay[1] = s;
    d.disk.sector_reg = 1;
    d.disk.status_reg = 1;
    const auto bytes = serialize_state(m, c, ppc, d);
    const RestoredState r = deserialize_state(bytes, ppc);
    CHECK(r.machine == m);
    CHECK(r.counter.raw == c.raw);
    CHECK(r.counter.mode_switch_snapshot == c.mode_switch_snapshot);
    CHECK(r.overlay == d.disk.overlay);
    CHECK(r.disk_sector == 1);
    CHECK(r.disk_status == 1);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 1);
    CHECK_THROWS_AS(deserialize_state(truncated, ppc), CorruptLogError);
}

TEST_CASE("checkpoints: nearest at or below, transparent on restore") {
    TempDir dir;
    const auto image = bare_image(kCounting);
    RecordOptions o;
    o.checkpoint_interval = 5000;
    const RunSummary s = record(image, empty_disk(), {}, o, dir / "c.log");
    REQUIRE(s.exit_reason == ExitReason::Halted);
    REQUIRE(s.final_icount > 7000);
    auto log = std::make_shared<const TraceLog>(read_trace(dir / "c.log"));
    CheckpointIndex index(dir / "c.log", *log);
    CHECK(index.load(7000).icount == 5000);
    CHECK(index.load(5000).icount == 5000);
    CHECK(index.load(4999).icount == 0);
    CHECK(index.load(4999).retired == 0);

    Replayer straight(log, image, empty_disk(), {dir / "c.log"});
    REQUIRE(straight.run_until(7000));
    Replayer restored(log, image, empty_disk(), {dir / "c.log"});
    restored.restore(index.load(7000));
    CHECK(restored.icount() == 5000);
    REQUIRE(restored.run_until(7000));
    CHECK(restored.state_hash() == straight.state_hash());

    // A tampered sidecar is caught against its StateHash event.
    {
        std::fstream f(checkpoint_path(dir / "c.log", 5000), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('\x7f');
    }
    CHECK_THROWS_AS(index.load(7000), CorruptLogError);
}

TEST_CASE("record and replay agree on the hash at every checkpoint") {
    TempDir dir;
    const auto image = bare_image(kCounting);
    RecordOptions o;
    o.checkpoint_interval = 1000;
    record(image, empty_disk(), {}, o, dir / "h.log");
    auto log = std::make_shared<const TraceLog>(read_trace(dir / "h.log"));
    Replayer r(log, image, empty_disk());
    for (const Event& e : log->events) {
        if (e.kind != EventKind::StateHash) continue;
        REQUIRE(r.run_until(e.icount));
        CHECK(r.state_hash() == e.hash);
    }
}

TEST_CASE("compare_logs") {
    TempDir dir;
    const auto image = bare_image(kCounting);
    RecordOptions o;
    o.checkpoint_interval = 1000;
    record(image, empty_disk(), {}, o, dir / "a.log");
    o.checkpoint_interval = 2000;
    record(image, empty_disk(), {}, o, dir / "b.log");
    const TraceLog a = read_trace(dir / "a.log");
    CHECK(compare_logs(a, a).identical);
    const LogComparison c = compare_logs(a, read_trace(dir / "b.log"));
    CHECK_FALSE(c.identical);
    CHECK(c.header_field == "checkpoint_interval");

    TraceLog shorter = a;
    shorter.events.pop_back();
    shorter.events.pop_back();
    const bool shorter_matches = shorter.complete() && compare_logs(a, shorter).identical;
    CHECK_FALSE(shorter_matches);
    TraceLog changed = a;
    changed.events[1].hash[0] ^= 1;
    const LogComparison d = compare_logs(a, changed);
    CHECK(d.event_index == 1u);
}
