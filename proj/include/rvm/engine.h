#pragma once

#include "rvm/devices.h"
#include "rvm/errors.h"
#include "rvm/machine.h"
#include "rvm/perf_counter.h"
#include "rvm/trace.h"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rvm {

inline constexpr uint64_t kDefaultMaxInstructions = 100'000'000;
inline constexpr uint64_t kMaxIrqRetries = 1'000'000;

enum class ExitReason : uint8_t { Halted, Limit, Divergence };
std::string_view to_string(ExitReason r);

struct Divergence {
    uint64_t at_seq = 0;
    std::optional<Event> expected;  // empty when the log had no further event
    struct Observed {
        uint64_t icount = 0;
        std::string what;  // "read", "irq", "state-hash", "halt", ...
        uint32_t addr_or_line = 0;
        uint32_t value = 0;
        std::optional<Digest> hash;
    } actual;
    uint64_t nearest_checkpoint_icount = 0;
    std::string message;

    std::string describe() const;
    nlohmann::ordered_json to_json() const;
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(Divergence d) : Error(d.describe()), divergence_(std::move(d)) {}
    ExitCode exit_code() const override { return ExitCode::Divergence; }
    const Divergence& divergence() const { return divergence_; }
    Divergence& divergence() { return divergence_; }

private:
    Divergence divergence_;
};

struct RunStats {
    uint64_t user_retired = 0;
    uint64_t supervisor_retired = 0;
    uint64_t irq_deliveries = 0;
    uint64_t timer_irqs = 0;
    uint64_t console_irqs = 0;
    uint64_t device_reads = 0;
    uint64_t console_bytes_injected = 0;
};

struct RunSummary {
    uint64_t final_icount = 0;
    uint64_t retired = 0;
    ExitReason exit_reason = ExitReason::Halted;
    Digest final_state_hash{};
    uint64_t event_count = 0;
    double wall_time_ms = 0;  // informational
    std::optional<Divergence> divergence;
    RunStats stats;
    std::vector<uint8_t> console_output;
    // Final counter readings for the configured counter.
    CounterState counter;
};

struct RecordOptions {
    CounterConfig counter;
    bool allow_unusable_counter = false;
    uint64_t checkpoint_interval = kDefaultCheckpointInterval;
    uint32_t mem_size = kDefaultMemSize;
    uint64_t max_instructions = kDefaultMaxInstructions;
    HostClock* clock = nullptr;           // defaults to a SteadyClock started with the run
    StimulusQueue* interactive = nullptr;  // optional live console input
    bool echo_console = false;             // copy guest TX to stdout as it happens
};

// Live run with logging. Writes the log at `log_path` plus checkpoint
// sidecars. Throws UnusableCounter for X86Flaky without the override.
RunSummary record(std::span<const uint8_t> kernel_image, std::shared_ptr<const DiskImage> disk,
                  const StimulusScript& stimulus, const RecordOptions& opts, const std::filesystem::path& log_path);

// The same live run with no counter and no log; the baseline for overhead.
RunSummary emulate(std::span<const uint8_t> kernel_image, std::shared_ptr<const DiskImage> disk,
                   const StimulusScript& stimulus, const RecordOptions& opts);

// Position of an instruction boundary: instructions retired so far plus the
// number of non-retiring steps (deliveries, faults) taken since.
struct ReplayPosition {
    uint64_t retired = 0;
    uint64_t substep = 0;
    auto operator<=>(const ReplayPosition&) const = default;
};

struct StepInfo {
    bool stepped = false;
    bool retired = false;
    bool delivered = false;
    uint32_t line = 0;
    CpuMode mode = CpuMode::Supervisor;  // mode the step started in
    uint32_t pc = 0;                      // pc the step started at
    ReplayPosition from;
};

// Deterministic re-execution of a log. The engine owns machine, devices,
// counter and the log cursor; everything is single-threaded.
class Replayer : private ReplayReadSource {
public:
    enum class Next : uint8_t { Deliver, Execute, Halted, End };

    struct Options {
        std::filesystem::path log_path;  // for checkpoints; may be empty
        TraceWriter* shadow = nullptr;   // receives re-observed events
        // Replay under a different counter model than the recording's. Event
        // timestamps are corrected counts, so any usable profile works.
        std::optional<CounterProfile> profile;
    };

    // Throws ImageMismatchError when the images do not hash to the header's
    // values.
    Replayer(std::shared_ptr<const TraceLog> log, std::vector<uint8_t> kernel_image,
             std::shared_ptr<const DiskImage> disk, Options opts);
    Replayer(std::shared_ptr<const TraceLog> log, std::vector<uint8_t> kernel_image,
             std::shared_ptr<const DiskImage> disk)
        : Replayer(std::move(log), std::move(kernel_image), std::move(disk), Options{}) {}
    ~Replayer() override;

    const TraceLog& log() const { return *log_; }
    const MachineState& machine() const { return machine_; }
    const CounterState& counter() const { return counter_; }
    const CounterConfig& counter_config() const { return config_; }
    const Devices& devices() const { return devices_; }
    uint64_t icount() const { return timestamp(counter_, config_); }
    ReplayPosition position() const { return position_; }
    size_t cursor() const { return cursor_; }
    const RunStats& stats() const { return stats_; }
    const CheckpointIndex& checkpoints() const { return checkpoints_; }
    bool finished() const;  // log consumed; no further steps possible

    Digest state_hash() const;

    // Applies events due at the current boundary that do not step the machine
    // (StateHash checks, Halt), then reports what advance() would do.
    Next prepare();
    // One step: an event-driven interrupt delivery or one instruction.
    StepInfo advance();

    // Runs to the boundary where the corrected count first equals target.
    // Returns false if the replay ends first.
    bool run_until(uint64_t target);
    void run_to_end();

    void restore(const Checkpoint& ckpt);
    void seek(uint64_t target_icount);
    void seek_position(ReplayPosition pos);
    uint64_t nearest_checkpoint_icount() const;

    struct Snapshot;
    Snapshot snapshot() const;
    void restore(const Snapshot& s);

private:
    uint32_t replay_read(uint32_t addr) override;
    [[noreturn]] void diverge(const std::string& message, Divergence::Observed actual);
    void arm_for_cursor();
    void verify_state_hash(const Event& e);
    bool is_final_hash(size_t index) const;
    void emit_shadow(Event e);
    void reset_to_start();

    std::shared_ptr<const TraceLog> log_;
    std::vector<uint8_t> kernel_;
    std::shared_ptr<const DiskImage> disk_;
    Options opts_;
    CounterConfig config_;
    CheckpointIndex checkpoints_;

    MachineState machine_;
    CounterState counter_;
    Devices devices_;
    size_t cursor_ = 0;
    size_t armed_for_ = SIZE_MAX;
    bool fresh_ = true;
    uint64_t irq_retries_ = 0;
    ReplayPosition position_;
    RunStats stats_;
    uint64_t shadow_seq_ = 0;
};

struct Replayer::Snapshot {
    MachineState machine;
    CounterState counter;
    DeviceState devices;
    size_t cursor;
    size_t armed_for;
    bool fresh;
    uint64_t irq_retries;
    ReplayPosition position;
    RunStats stats;
};

struct ReplayOptions {
    std::filesystem::path shadow_log;  // empty: none
    std::optional<CounterProfile> profile;
};

// Full replay. Divergence is reported in the summary; corrupt logs and image
// mismatches throw.
RunSummary replay(const std::filesystem::path& log_path, std::vector<uint8_t> kernel_image,
                  std::shared_ptr<const DiskImage> disk, const ReplayOptions& opts = {});

// Replay-side counter configuration: X86Flaky noise is a property of the
// physical run, so a replay draws a fresh realization.
CounterConfig replay_counter_config(const TraceHeader& h);

std::vector<uint8_t> read_file(const std::filesystem::path& p);

}  // namespace rvm
