#pragma once

#include "rvm/machine.h"

#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rvm {

// MMIO register map.
namespace reg {
inline constexpr uint32_t kConsoleStatus = 0xF000'0000;
inline constexpr uint32_t kConsoleRx = 0xF000'0004;
inline constexpr uint32_t kConsoleTx = 0xF000'0008;
inline constexpr uint32_t kTimerNow = 0xF000'0010;
inline constexpr uint32_t kTimerCmp = 0xF000'0014;
inline constexpr uint32_t kDiskSector = 0xF000'0020;
inline constexpr uint32_t kDiskBuf = 0xF000'0024;
inline constexpr uint32_t kDiskCmd = 0xF000'0028;
inline constexpr uint32_t kDiskStatus = 0xF000'002C;
}  // namespace reg

inline constexpr uint32_t kIrqTimer = 0;
inline constexpr uint32_t kIrqConsole = 1;
inline constexpr uint32_t kSectorSize = 512;
inline constexpr uint32_t kDiskCmdRead = 1;
inline constexpr uint32_t kDiskCmdWrite = 2;

// Registers whose value comes from outside the deterministic boundary.
inline constexpr bool is_nondeterministic(uint32_t addr) {
    return addr == reg::kConsoleStatus || addr == reg::kConsoleRx || addr == reg::kTimerNow;
}

std::string_view register_name(uint32_t addr);

enum class DeviceMode : uint8_t { Live, Record, Replay };

class HostClock {
public:
    virtual ~HostClock() = default;
    virtual uint64_t now_ms() = 0;
};

// Host monotonic clock, relative to construction.
class SteadyClock final : public HostClock {
public:
    SteadyClock();
    uint64_t now_ms() override;

private:
    int64_t start_ns_;
};

// Deterministic stand-in for the wall clock: each query advances time by a
// fixed step. Lets tests choose timer phases reproducibly.
class SimulatedClock final : public HostClock {
public:
    SimulatedClock(uint64_t us_per_query, uint64_t phase_us = 0) : step_us_(us_per_query), now_us_(phase_us) {}
    uint64_t now_ms() override {
        now_us_ += step_us_;
        return now_us_ / 1000;
    }

private:
    uint64_t step_us_;
    uint64_t now_us_;
};

struct StimulusEntry {
    uint64_t at_ms = 0;
    std::vector<uint8_t> payload;
    friend bool operator==(const StimulusEntry&, const StimulusEntry&) = default;
};

struct StimulusScript {
    std::vector<StimulusEntry> entries;

    // `AT <ms> CONSOLE <hex-bytes...>` lines, `#` comments. Throws Error with
    // the line number on malformed input or decreasing times.
    static StimulusScript parse(std::string_view text);
    static StimulusScript load(const std::string& path);
    std::string to_text() const;
    size_t byte_count() const;
};

// Base disk image: immutable, shared between copies of the device state.
struct DiskImage {
    std::vector<uint8_t> bytes;

    static std::shared_ptr<const DiskImage> load(const std::string& path);
    static std::shared_ptr<const DiskImage> from_bytes(std::vector<uint8_t> bytes);
    uint32_t sector_count() const { return static_cast<uint32_t>((bytes.size() + kSectorSize - 1) / kSectorSize); }
};

using Sector = std::array<uint8_t, kSectorSize>;

struct DiskState {
    std::shared_ptr<const DiskImage> image;
    std::map<uint32_t, Sector> overlay;
    uint32_t sector_reg = 0;
    uint32_t buf_addr_reg = 0;
    uint32_t status_reg = 0;

    Sector read_sector(uint32_t index) const;
};

struct DeviceState {
    std::deque<uint8_t> console_rx_queue;
    std::vector<uint8_t> console_tx_sink;
    std::optional<uint64_t> timer_deadline_ms;
    DiskState disk;
};

// Source of values for nondeterministic registers during replay.
class ReplayReadSource {
public:
    virtual ~ReplayReadSource() = default;
    virtual uint32_t replay_read(uint32_t addr) = 0;
};

// Sink for nondeterministic values observed during record.
class RecordReadSink {
public:
    virtual ~RecordReadSink() = default;
    virtual void recorded_read(uint32_t addr, uint32_t value) = 0;
};

// Device models behind the MMIO window. Live/Record compute nondeterministic
// registers from the host; Replay takes them from a ReplayReadSource and never
// touches the host clock or input.
class Devices final : public MmioHandler {
public:
    Devices(DeviceMode mode, std::shared_ptr<const DiskImage> disk, HostClock* clock = nullptr);

    DeviceMode mode() const { return mode_; }
    DeviceState& state() { return state_; }
    const DeviceState& state() const { return state_; }

    void set_record_sink(RecordReadSink* sink) { sink_ = sink; }
    void set_replay_source(ReplayReadSource* source) { source_ = source; }
    void set_clock(HostClock* clock) { clock_ = clock; }

    uint32_t mmio_read(uint32_t addr) override;
    void mmio_write(uint32_t addr, uint32_t value, std::span<uint8_t> ram) override;

    // Queues console bytes and requests IRQ line 1. Throws ReplayModeError in
    // replay mode.
    void inject_stimulus(std::span<const uint8_t> bytes);

    // Lines raised by device activity since the last call (bit per line).
    uint16_t take_raised_lines() {
        const uint16_t l = raised_;
        raised_ = 0;
        return l;
    }

    // Record/live: raises the timer line if the one-shot deadline has passed.
    void poll_timer(uint64_t now_ms);

private:
    uint32_t live_read(uint32_t addr);

    DeviceMode mode_;
    DeviceState state_;
    HostClock* clock_ = nullptr;
    RecordReadSink* sink_ = nullptr;
    ReplayReadSource* source_ = nullptr;
    uint16_t raised_ = 0;
};

// Single-producer queue for stimuli arriving on another thread (interactive
// console). Drained by the emulation loop at instruction boundaries only.
class StimulusQueue {
public:
    void push(std::span<const uint8_t> bytes);
    bool has_data() const { return ready_.load(std::memory_order_acquire); }
    std::vector<uint8_t> drain();

private:
    mutable std::mutex mu_;
    std::vector<uint8_t> bytes_;
    std::atomic<bool> ready_{false};
};

}  // namespace rvm
