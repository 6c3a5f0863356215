#pragma once

#include "rvm/assembler.h"
#include "rvm/engine.h"
#include "rvm/guest_abi.h"

#include <array>
#include <atomic>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace rvm {

inline constexpr int kProtocolVersion = 1;
inline constexpr int kKernelTask = -1;
inline constexpr uint32_t kMaxReadMem = 4096;

struct TaskView {
    int task_id = 0;
    std::string state;
    uint32_t pc = 0;
    std::array<uint32_t, 16> regs{};
    bool is_current = false;

    nlohmann::ordered_json to_json() const;
};

std::string_view task_state_name(uint32_t code);

// Decodes the guest task table. Throws GuestLayoutError on an implausible
// table (too many tasks, unknown state codes, CURRENT out of range).
std::vector<TaskView> read_tasks(const MachineState& m);

// Task a retire at this boundary would be attributed to: CURRENT in user
// mode, the kernel otherwise.
int attributed_task(const MachineState& m);

struct StopEvent {
    std::string reason;  // breakpoint | step | icount | halt | end | pause
    uint64_t icount = 0;
    int task_id = kKernelTask;
    uint32_t pc = 0;
    ReplayPosition position;
    std::optional<int> breakpoint;

    nlohmann::ordered_json to_json() const;
    friend bool operator==(const StopEvent&, const StopEvent&) = default;
};

struct Breakpoint {
    int id = 0;
    uint32_t addr = 0;
    std::optional<int> task;
};

// Error reported back to the client; the session stays usable.
class DebugCommandError : public Error {
public:
    using Error::Error;
};

// One replay under debugger control. Not thread-safe except request_pause().
class DebugSession {
public:
    DebugSession(std::shared_ptr<const TraceLog> log, std::vector<uint8_t> kernel_image,
                 std::shared_ptr<const DiskImage> disk, std::filesystem::path log_path, SymbolTable symbols = {});

    Replayer& replayer() { return replayer_; }
    const Replayer& replayer() const { return replayer_; }
    const SymbolTable& symbols() const { return symbols_; }
    bool ended() const { return ended_; }

    nlohmann::ordered_json hello() const;

    struct Result {
        nlohmann::ordered_json response;
        std::optional<nlohmann::ordered_json> event;  // unsolicited stop event
        bool close = false;                           // detach
    };
    // Dispatches one protocol request {id, cmd, args}.
    Result handle(const nlohmann::json& request);

    int set_breakpoint(uint32_t addr, std::optional<int> task = std::nullopt);
    void clear_breakpoint(int id);
    const std::map<int, Breakpoint>& breakpoints() const { return breakpoints_; }

    StopEvent cont();
    StopEvent step_task(int task);
    StopEvent reverse_step(int task);
    StopEvent run_to_icount(uint64_t target);
    StopEvent here(const std::string& reason) const;

    // Thread-safe; interrupts cont/step at the next boundary.
    void request_pause() { pause_.store(true, std::memory_order_relaxed); }

private:
    nlohmann::ordered_json dispatch(const std::string& cmd, const nlohmann::json& args, Result& r);
    std::optional<StopEvent> end_stop();
    bool take_pause() { return pause_.exchange(false, std::memory_order_relaxed); }
    std::optional<ReplayPosition> last_attributed_before(ReplayPosition end, int task);

    std::shared_ptr<const TraceLog> log_;
    Replayer replayer_;
    SymbolTable symbols_;
    std::map<int, Breakpoint> breakpoints_;
    int next_bp_ = 1;
    bool ended_ = false;
    std::atomic<bool> pause_{false};
};

// "0x2000", "8192" or a JSON number.
uint32_t parse_address(const nlohmann::json& v);

}  // namespace rvm
