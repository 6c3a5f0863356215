#pragma once

#include "rvm/devices.h"
#include "rvm/machine.h"
#include "rvm/perf_counter.h"
#include "rvm/sha256.h"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace rvm {

inline constexpr uint32_t kTraceFormatVersion = 1;
inline constexpr uint64_t kDefaultCheckpointInterval = 100'000;

struct TraceHeader {
    uint32_t format_version = kTraceFormatVersion;
    uint32_t isa_version = 1;
    uint32_t mem_size = kDefaultMemSize;
    Digest kernel_image_hash{};
    Digest disk_image_hash{};
    std::string hash_algorithm = "sha256";
    CounterConfig counter_config;
    // Set when the log was recorded under a counter profile that has no
    // corrected count; timestamps are then raw counts.
    bool unusable_counter_override = false;
    uint64_t checkpoint_interval = kDefaultCheckpointInterval;
    std::string created_at;  // informational, never hashed or compared

    nlohmann::ordered_json to_json() const;
    static TraceHeader from_json(const nlohmann::json& j);
};

enum class EventKind : uint8_t { IrqDelivery, DeviceRead, StateHash, Halt };

std::string_view to_string(EventKind k);

struct Event {
    uint64_t seq = 0;
    uint64_t icount = 0;
    EventKind kind = EventKind::Halt;
    uint32_t line = 0;   // IrqDelivery
    uint32_t addr = 0;   // DeviceRead
    uint32_t value = 0;  // DeviceRead
    Digest hash{};       // StateHash

    static Event irq(uint64_t icount, uint32_t line);
    static Event read(uint64_t icount, uint32_t addr, uint32_t value);
    static Event state_hash(uint64_t icount, const Digest& d);
    static Event halt(uint64_t icount);

    // Canonical JSON line (no newline): seq, icount, kind, then payload keys
    // in alphabetical order.
    std::string to_json_line() const;
    static Event from_json(const nlohmann::json& j);

    friend bool operator==(const Event&, const Event&) = default;
};

struct TraceLog {
    TraceHeader header;
    std::vector<Event> events;

    bool complete() const;  // ends with Halt or a terminal StateHash
    uint64_t final_icount() const { return events.empty() ? 0 : events.back().icount; }
};

// Throws CorruptLogError on malformed JSON, monotonicity violations, or events
// after Halt.
TraceLog read_trace(const std::filesystem::path& path);

// Single-writer append-only log.
class TraceWriter {
public:
    TraceWriter(const std::filesystem::path& path, const TraceHeader& header);
    ~TraceWriter();
    TraceWriter(const TraceWriter&) = delete;
    TraceWriter& operator=(const TraceWriter&) = delete;

    // Throws CorruptLogError if seq is not strictly increasing, icount
    // decreases, or an event follows Halt.
    void append(const Event& e);
    void flush();
    void close();

    const std::filesystem::path& path() const { return path_; }
    uint64_t last_seq() const { return last_seq_; }

private:
    std::filesystem::path path_;
    std::FILE* file_ = nullptr;
    uint64_t last_seq_ = 0;
    uint64_t last_icount_ = 0;
    bool halted_ = false;
    std::string buf_;
};

// Validation shared by writer and reader.
void check_event_order(const Event* prev, const Event& next);

// ---------------------------------------------------------------------------
// State serialization

// Canonical bytes of the deterministic state, in pieces so that hashing and
// checkpoint writing never copy guest memory.
//
// Layout (little-endian): r0..r15, pc, status word (bit0 supervisor, bit1 ie,
// bit8 halted), CSRs IVEC..MARK, retired, mode_switches, memory size + bytes,
// counter (timestamp count, observed switches), overlay sector count then
// (index, 512 bytes) sorted by index, disk SECTOR/BUF/STATUS registers.
struct SerializedState {
    std::vector<uint8_t> head;
    std::span<const uint8_t> memory;
    std::vector<uint8_t> tail;

    std::vector<uint8_t> bytes() const;
    Digest digest() const;
};

SerializedState serialize_pieces(const MachineState& m, const CounterState& c, const CounterConfig& cfg,
                                 const DeviceState& d);
std::vector<uint8_t> serialize_state(const MachineState& m, const CounterState& c, const CounterConfig& cfg,
                                     const DeviceState& d);
Digest state_hash(const MachineState& m, const CounterState& c, const CounterConfig& cfg, const DeviceState& d);

struct RestoredState {
    MachineState machine;
    CounterState counter;
    std::map<uint32_t, Sector> overlay;
    uint32_t disk_sector = 0;
    uint32_t disk_buf = 0;
    uint32_t disk_status = 0;
};

// Throws CorruptLogError on malformed input.
RestoredState deserialize_state(std::span<const uint8_t> bytes, const CounterConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints: sidecar files `<log>.ckpt.<icount>` holding the canonical
// serialization, one per StateHash event.

struct Checkpoint {
    uint64_t icount = 0;
    uint64_t retired = 0;
    std::vector<uint8_t> bytes;  // empty for the implicit reset checkpoint
    uint64_t log_cursor = 0;     // index into TraceLog::events of the next event
    Digest state_hash{};

    bool is_reset() const { return bytes.empty(); }
};

std::filesystem::path checkpoint_path(const std::filesystem::path& log, uint64_t icount);
void write_checkpoint(const std::filesystem::path& log, uint64_t icount, const SerializedState& s);
void remove_checkpoints(const std::filesystem::path& log);

class CheckpointIndex {
public:
    CheckpointIndex() = default;
    CheckpointIndex(const std::filesystem::path& log, const TraceLog& trace);

    // Latest checkpoint with icount <= target; the reset checkpoint when none.
    Checkpoint load(uint64_t target_icount) const;
    // Latest checkpoint whose retired count is <= target_retired.
    Checkpoint load_by_retired(uint64_t target_retired) const;
    // Checkpoints strictly before the given retired count, newest first.
    std::vector<uint64_t> retired_marks_before(uint64_t retired) const;
    size_t size() const { return entries_.size(); }

private:
    struct Entry {
        uint64_t icount;
        uint64_t retired;
        size_t event_index;
        std::filesystem::path file;
        Digest hash;
    };
    Checkpoint load_entry(const Entry& e) const;

    std::vector<Entry> entries_;
};

}  // namespace rvm

namespace rvm {

// First difference between two logs. Headers are compared on everything
// except created_at; events are compared position by position.
struct LogComparison {
    bool identical = true;
    std::string header_field;    // first differing header key, if any
    std::optional<size_t> event_index;  // first differing event position
    std::string message;
};

// Throws CorruptLogError if either log is incomplete.
LogComparison compare_logs(const TraceLog& a, const TraceLog& b);

}  // namespace rvm
