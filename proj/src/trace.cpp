#include "rvm/trace.h"

#include "rvm/errors.h"

#include <algorithm>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <string>

namespace rvm {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Header

ordered_json TraceHeader::to_json() const {
    ordered_json cc;
    cc["profile"] = std::string(to_string(counter_config.profile));
    cc["seed"] = counter_config.seed;
    cc["count_user"] = counter_config.count_user;
    cc["count_supervisor"] = counter_config.count_supervisor;
    cc["marked_only"] = counter_config.marked_only;

    ordered_json j;
    j["format_version"] = format_version;
    j["isa_version"] = isa_version;
    j["mem_size"] = mem_size;
    j["kernel_image_hash"] = to_hex(kernel_image_hash);
    j["disk_image_hash"] = to_hex(disk_image_hash);
    j["hash_algorithm"] = hash_algorithm;
    j["counter_config"] = cc;
    j["unusable_counter_override"] = unusable_counter_override;
    j["checkpoint_interval"] = checkpoint_interval;
    j["created_at"] = created_at;
    return j;
}

TraceHeader TraceHeader::from_json(const json& j) {
    try {
        TraceHeader h;
        h.format_version = j.at("format_version").get<uint32_t>();
        if (h.format_version != kTraceFormatVersion) {
            throw CorruptLogError(fmt::format("unsupported log format version {}", h.format_version));
        }
        h.isa_version = j.at("isa_version").get<uint32_t>();
        h.mem_size = j.at("mem_size").get<uint32_t>();
        auto kh = digest_from_hex(j.at("kernel_image_hash").get<std::string>());
        auto dh = digest_from_hex(j.at("disk_image_hash").get<std::string>());
        if (!kh || !dh) throw CorruptLogError("malformed image hash in header");
        h.kernel_image_hash = *kh;
        h.disk_image_hash = *dh;
        h.hash_algorithm = j.at("hash_algorithm").get<std::string>();
        if (h.hash_algorithm != "sha256") {
            throw CorruptLogError("unsupported hash algorithm " + h.hash_algorithm);
        }
        const auto& cc = j.at("counter_config");
        auto profile = profile_from_string(cc.at("profile").get<std::string>());
        if (!profile) throw CorruptLogError("unknown counter profile in header");
        h.counter_config.profile = *profile;
        h.counter_config.seed = cc.at("seed").get<uint64_t>();
        h.counter_config.count_user = cc.at("count_user").get<bool>();
        h.counter_config.count_supervisor = cc.at("count_supervisor").get<bool>();
        h.counter_config.marked_only = cc.at("marked_only").get<bool>();
        h.unusable_counter_override = j.value("unusable_counter_override", false);
        h.checkpoint_interval = j.at("checkpoint_interval").get<uint64_t>();
        h.created_at = j.value("created_at", "");
        return h;
    } catch (const json::exception& e) {
        throw CorruptLogError(std::string("malformed header: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Events

std::string_view to_string(EventKind k) {
    switch (k) {
        case EventKind::IrqDelivery: return "IrqDelivery";
        case EventKind::DeviceRead: return "DeviceRead";
        case EventKind::StateHash: return "StateHash";
        case EventKind::Halt: return "Halt";
    }
    return "?";
}

Event Event::irq(uint64_t icount, uint32_t line) {
    Event e;
    e.icount = icount;
    e.kind = EventKind::IrqDelivery;
    e.line = line;
    return e;
}

Event Event::read(uint64_t icount, uint32_t addr, uint32_t value) {
    Event e;
    e.icount = icount;
    e.kind = EventKind::DeviceRead;
    e.addr = addr;
    e.value = value;
    return e;
}

Event Event::state_hash(uint64_t icount, const Digest& d) {
    Event e;
    e.icount = icount;
    e.kind = EventKind::StateHash;
    e.hash = d;
    return e;
}

Event Event::halt(uint64_t icount) {
    Event e;
    e.icount = icount;
    e.kind = EventKind::Halt;
    return e;
}

std::string Event::to_json_line() const {
    switch (kind) {
        case EventKind::IrqDelivery:
            return fmt::format(R"({{"seq":{},"icount":{},"kind":"IrqDelivery","line":{}}})", seq, icount, line);
        case EventKind::DeviceRead:
            return fmt::format(R"({{"seq":{},"icount":{},"kind":"DeviceRead","addr":{},"value":{}}})", seq,
                               icount, addr, value);
        case EventKind::StateHash:
            return fmt::format(R"({{"seq":{},"icount":{},"kind":"StateHash","hash":"{}"}})", seq, icount,
                               to_hex(hash));
        case EventKind::Halt:
            return fmt::format(R"({{"seq":{},"icount":{},"kind":"Halt"}})", seq, icount);
    }
    return {};
}

Event Event::from_json(const json& j) {
    Event e;
    e.seq = j.at("seq").get<uint64_t>();
    e.icount = j.at("icount").get<uint64_t>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "IrqDelivery") {
        e.kind = EventKind::IrqDelivery;
        e.line = j.at("line").get<uint32_t>();
        if (e.line > cause::kMaxIrqLine) throw CorruptLogError(fmt::format("IRQ line {} out of range", e.line));
    } else if (kind == "DeviceRead") {
        e.kind = EventKind::DeviceRead;
        e.addr = j.at("addr").get<uint32_t>();
        e.value = j.at("value").get<uint32_t>();
    } else if (kind == "StateHash") {
        e.kind = EventKind::StateHash;
        auto d = digest_from_hex(j.at("hash").get<std::string>());
        if (!d) throw CorruptLogError("malformed state hash");
        e.hash = *d;
    } else if (kind == "Halt") {
        e.kind = EventKind::Halt;
    } else {
        throw CorruptLogError("unknown event kind '" + kind + "'");
    }
    return e;
}

bool TraceLog::complete() const {
    return !events.empty() &&
           (events.back().kind == EventKind::Halt || events.back().kind == EventKind::StateHash);
}

void check_event_order(const Event* prev, const Event& next) {
    if (!prev) {
        if (next.seq == 0) throw CorruptLogError("event sequence numbers start at 1");
        return;
    }
    if (prev->kind == EventKind::Halt) {
        throw CorruptLogError(fmt::format("event seq {} follows Halt", next.seq));
    }
    if (next.seq <= prev->seq) {
        throw CorruptLogError(fmt::format("event seq {} does not follow seq {}", next.seq, prev->seq));
    }
    if (next.icount < prev->icount) {
        throw CorruptLogError(
            fmt::format("event seq {} has icount {} below previous {}", next.seq, next.icount, prev->icount));
    }
}

TraceLog read_trace(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CorruptLogError("cannot open log " + path.string());
    TraceLog log;
    std::string line;
    if (!std::getline(in, line)) throw CorruptLogError("empty log " + path.string());
    try {
        log.header = TraceHeader::from_json(json::parse(line));
    } catch (const json::exception& e) {
        throw CorruptLogError(std::string("header is not JSON: ") + e.what());
    }
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Event e;
        try {
            e = Event::from_json(json::parse(line));
        } catch (const json::exception& ex) {
            throw CorruptLogError(fmt::format("log line {}: {}", line_no, ex.what()));
        } catch (const CorruptLogError& ex) {
            throw CorruptLogError(fmt::format("log line {}: {}", line_no, ex.what()));
        }
        check_event_order(log.events.empty() ? nullptr : &log.events.back(), e);
        log.events.push_back(e);
    }
    return log;
}

TraceWriter::TraceWriter(const fs::path& path, const TraceHeader& header) : path_(path) {
    remove_checkpoints(path);
    file_ = std::fopen(path.string().c_str(), "wb");
    if (!file_) throw Error("cannot create log " + path.string());
    std::setvbuf(file_, nullptr, _IOFBF, 1 << 16);
    const std::string h = header.to_json().dump() + "\n";
    std::fwrite(h.data(), 1, h.size(), file_);
}

TraceWriter::~TraceWriter() {
    if (file_) std::fclose(file_);
}

void TraceWriter::append(const Event& e) {
    if (!file_) throw Error("append to a closed log");
    if (last_seq_ == 0) {
        if (e.seq == 0) throw CorruptLogError("event sequence numbers start at 1");
    } else {
        if (halted_) throw CorruptLogError(fmt::format("event seq {} follows Halt", e.seq));
        if (e.seq <= last_seq_) {
            throw CorruptLogError(fmt::format("event seq {} does not follow seq {}", e.seq, last_seq_));
        }
        if (e.icount < last_icount_) {
            throw CorruptLogError(
                fmt::format("event seq {} has icount {} below previous {}", e.seq, e.icount, last_icount_));
        }
    }
    buf_ = e.to_json_line();
    buf_ += '\n';
    std::fwrite(buf_.data(), 1, buf_.size(), file_);
    last_seq_ = e.seq;
    last_icount_ = e.icount;
    halted_ = e.kind == EventKind::Halt;
}

void TraceWriter::flush() {
    if (file_) std::fflush(file_);
}

void TraceWriter::close() {
    if (file_) {
        std::fclose(file_);
        file_ = nullptr;
    }
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void put32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const uint8_t> b) : b_(b) {}
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t{b_[pos_ + i]} << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        const uint64_t lo = u32();
        const uint64_t hi = u32();
        return lo | (hi << 32);
    }
    std::span<const uint8_t> take(size_t n) {
        need(n);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(size_t n) const {
        if (pos_ + n > b_.size()) throw CorruptLogError("truncated state serialization");
    }
    std::span<const uint8_t> b_;
    size_t pos_ = 0;
};

constexpr uint32_t kHaltedBit = 1u << 8;

}  // namespace

SerializedState serialize_pieces(const MachineState& m, const CounterState& c, const CounterConfig& cfg,
                                 const DeviceState& d) {
    SerializedState s;
    s.head.reserve(128);
    for (uint32_t r : m.regs) put32(s.head, r);
    put32(s.head, m.pc);
    put32(s.head, m.status.to_word() | (m.halted ? kHaltedBit : 0u));
    for (unsigned i = 1; i < kNumCsrs; ++i) put32(s.head, m.csrs[i]);
    put64(s.head, m.retired);
    put64(s.head, m.mode_switches);
    put32(s.head, static_cast<uint32_t>(m.mem.size()));
    s.memory = m.mem;

    s.tail.reserve(64 + d.disk.overlay.size() * (kSectorSize + 4));
    put64(s.tail, timestamp(c, cfg));
    put64(s.tail, c.mode_switch_snapshot);
    put32(s.tail, static_cast<uint32_t>(d.disk.overlay.size()));
    for (const auto& [index, sector] : d.disk.overlay) {  // std::map: sorted
        put32(s.tail, index);
        s.tail.insert(s.tail.end(), sector.begin(), sector.end());
    }
    put32(s.tail, d.disk.sector_reg);
    put32(s.tail, d.disk.buf_addr_reg);
    put32(s.tail, d.disk.status_reg);
    return s;
}

std::vector<uint8_t> SerializedState::bytes() const {
    std::vector<uint8_t> out;
    out.reserve(head.size() + memory.size() + tail.size());
    out.insert(out.end(), head.begin(), head.end());
    out.insert(out.end(), memory.begin(), memory.end());
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
}

Digest SerializedState::digest() const {
    Sha256 h;
    h.update(head).update(memory).update(tail);
    return h.finish();
}

std::vector<uint8_t> serialize_state(const MachineState& m, const CounterState& c, const CounterConfig& cfg,
                                     const DeviceState& d) {
    return serialize_pieces(m, c, cfg, d).bytes();
}

Digest state_hash(const MachineState& m, const CounterState& c, const CounterConfig& cfg, const DeviceState& d) {
    return serialize_pieces(m, c, cfg, d).digest();
}

RestoredState deserialize_state(std::span<const uint8_t> bytes, const CounterConfig& cfg) {
    Reader r(bytes);
    RestoredState out;
    MachineState& m = out.machine;
    for (auto& reg : m.regs) reg = r.u32();
    if (m.regs[0] != 0) throw CorruptLogError("serialized r0 is nonzero");
    m.pc = r.u32();
    const uint32_t status = r.u32();
    m.status = Status::from_word(status);
    m.halted = (status & kHaltedBit) != 0;
    for (unsigned i = 1; i < kNumCsrs; ++i) m.csrs[i] = r.u32();
    m.retired = r.u64();
    m.mode_switches = r.u64();
    const uint32_t mem_size = r.u32();
    auto mem = r.take(mem_size);
    m.mem.assign(mem.begin(), mem.end());
    const uint64_t count = r.u64();
    const uint64_t switches = r.u64();
    out.counter = counter_from_checkpoint(cfg, count, switches);
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t index = r.u32();
        auto data = r.take(kSectorSize);
        Sector s;
        std::copy(data.begin(), data.end(), s.begin());
        out.overlay.emplace(index, s);
    }
    out.disk_sector = r.u32();
    out.disk_buf = r.u32();
    out.disk_status = r.u32();
    if (!r.done()) throw CorruptLogError("trailing bytes after state serialization");
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

fs::path checkpoint_path(const fs::path& log, uint64_t icount) {
    return fs::path(log.string() + ".ckpt." + std::to_string(icount));
}

void write_checkpoint(const fs::path& log, uint64_t icount, const SerializedState& s) {
    const fs::path p = checkpoint_path(log, icount);
    std::FILE* f = std::fopen(p.string().c_str(), "wb");
    if (!f) throw Error("cannot write checkpoint " + p.string());
    std::fwrite(s.head.data(), 1, s.head.size(), f);
    std::fwrite(s.memory.data(), 1, s.memory.size(), f);
    std::fwrite(s.tail.data(), 1, s.tail.size(), f);
    if (std::fclose(f) != 0) throw Error("cannot write checkpoint " + p.string());
}

void remove_checkpoints(const fs::path& log) {
    const fs::path dir = log.has_parent_path() ? log.parent_path() : fs::path(".");
    const std::string prefix = log.filename().string() + ".ckpt.";
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return;
    for (const auto& entry : fs::directory_iterator(dir, ec)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind(prefix, 0) == 0) {
            fs::remove(entry.path(), ec);
        }
    }
}

namespace {

// Offset of `retired` in the serialization: 16 regs, pc, status, 5 CSRs.
constexpr size_t kRetiredOffset = (16 + 1 + 1 + 5) * 4;

std::optional<uint64_t> peek_retired(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    in.seekg(static_cast<std::streamoff>(kRetiredOffset));
    uint8_t b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) return std::nullopt;
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t{b[i]} << (8 * i);
    return v;
}

}  // namespace

CheckpointIndex::CheckpointIndex(const fs::path& log, const TraceLog& trace) {
    for (size_t i = 0; i < trace.events.size(); ++i) {
        const Event& e = trace.events[i];
        if (e.kind != EventKind::StateHash) continue;
        const fs::path p = checkpoint_path(log, e.icount);
        auto retired = peek_retired(p);
        if (!retired) continue;
        // Several StateHash events can share an icount under filtered
        // counters; the file holds the last one written.
        if (!entries_.empty() && entries_.back().icount == e.icount) {
            entries_.pop_back();
        }
        entries_.push_back(Entry{e.icount, *retired, i, p, e.hash});
    }
}

Checkpoint CheckpointIndex::load_entry(const Entry& e) const {
    std::ifstream in(e.file, std::ios::binary);
    if (!in) throw CorruptLogError("cannot read checkpoint " + e.file.string());
    Checkpoint c;
    c.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    c.icount = e.icount;
    c.retired = e.retired;
    c.log_cursor = e.event_index + 1;
    c.state_hash = Sha256::of(c.bytes);
    if (c.state_hash != e.hash) {
        throw CorruptLogError(fmt::format("checkpoint {} does not match its StateHash event", e.file.string()));
    }
    return c;
}

Checkpoint CheckpointIndex::load(uint64_t target_icount) const {
    const Entry* best = nullptr;
    for (const auto& e : entries_) {
        if (e.icount <= target_icount) best = &e;
    }
    return best ? load_entry(*best) : Checkpoint{};
}

Checkpoint CheckpointIndex::load_by_retired(uint64_t target_retired) const {
    const Entry* best = nullptr;
    for (const auto& e : entries_) {
        if (e.retired <= target_retired) best = &e;
    }
    return best ? load_entry(*best) : Checkpoint{};
}

std::vector<uint64_t> CheckpointIndex::retired_marks_before(uint64_t retired) const {
    std::vector<uint64_t> out;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->retired < retired) out.push_back(it->retired);
    }
    return out;
}

LogComparison compare_logs(const TraceLog& a, const TraceLog& b) {
    if (!a.complete()) throw CorruptLogError("first log is incomplete");
    if (!b.complete()) throw CorruptLogError("second log is incomplete");
    LogComparison out;
    auto ha = a.header.to_json();
    auto hb = b.header.to_json();
    ha.erase("created_at");
    hb.erase("created_at");
    for (const auto& [key, value] : ha.items()) {
        if (!hb.contains(key) || hb[key] != value) {
            out.identical = false;
            out.header_field = key;
            out.message = fmt::format("header differs at '{}': {} vs {}", key, value.dump(),
                                      hb.contains(key) ? hb[key].dump() : "missing");
            return out;
        }
    }
    const size_t n = std::min(a.events.size(), b.events.size());
    for (size_t i = 0; i < n; ++i) {
        if (a.events[i] != b.events[i]) {
            out.identical = false;
            out.event_index = i;
            out.message = fmt::format("first difference at event {}:\n  < {}\n  > {}", i, a.events[i].to_json_line(),
                                      b.events[i].to_json_line());
            return out;
        }
    }
    if (a.events.size() != b.events.size()) {
        out.identical = false;
        out.event_index = n;
        const auto& longer = a.events.size() > n ? a : b;
        out.message = fmt::format("{} log has extra events from {}: {}", a.events.size() > n ? "first" : "second", n,
                                  longer.events[n].to_json_line());
        return out;
    }
    out.message = "identical";
    return out;
}

}  // namespace rvm
