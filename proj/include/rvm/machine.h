#pragma once

#include "rvm/isa.h"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace rvm {

inline constexpr uint32_t kDefaultMemSize = 1u << 20;
inline constexpr uint32_t kMmioBase = 0xF000'0000;
inline constexpr uint32_t kMmioLimit = 0xF000'0FFF;

inline constexpr bool in_mmio_window(uint32_t addr) {
    return addr >= kMmioBase && addr <= kMmioLimit;
}

enum class CpuMode : uint8_t { User = 0, Supervisor = 1 };

// Trap cause codes. 0..15 are external IRQ lines, the rest are synchronous.
namespace cause {
inline constexpr uint32_t kEcall = 32;
inline constexpr uint32_t kIllegal = 33;
inline constexpr uint32_t kMemoryFault = 34;
inline constexpr uint32_t kPrivilege = 35;
inline constexpr uint32_t kMaxIrqLine = 15;
}  // namespace cause

struct TrapCause {
    uint32_t code = 0;

    bool is_external() const { return code <= cause::kMaxIrqLine; }
    friend bool operator==(TrapCause, TrapCause) = default;
};

struct Status {
    CpuMode mode = CpuMode::Supervisor;
    bool ie = false;

    // STATUS/ESTATUS CSR encoding: bit0 = supervisor, bit1 = ie.
    uint32_t to_word() const { return (mode == CpuMode::Supervisor ? 1u : 0u) | (ie ? 2u : 0u); }
    static Status from_word(uint32_t w) {
        return Status{(w & 1u) ? CpuMode::Supervisor : CpuMode::User, (w & 2u) != 0};
    }
    friend bool operator==(const Status&, const Status&) = default;
};

struct MachineState {
    std::array<uint32_t, 16> regs{};
    uint32_t pc = 0;
    Status status;
    // Indexed by Csr; slot 0 (STATUS) is unused, the live value is `status`.
    std::array<uint32_t, kNumCsrs> csrs{};
    std::vector<uint8_t> mem;
    uint16_t pending_irqs = 0;
    bool halted = false;
    uint64_t retired = 0;
    uint64_t mode_switches = 0;

    uint32_t csr(Csr c) const { return c == Csr::Status ? status.to_word() : csrs[static_cast<unsigned>(c)]; }
    bool mark() const { return (csrs[static_cast<unsigned>(Csr::Mark)] & 1u) != 0; }

    // Host-side accessors for inspection. Return false when out of RAM.
    bool read_word(uint32_t addr, uint32_t& out) const;
    bool write_word(uint32_t addr, uint32_t value);

    friend bool operator==(const MachineState&, const MachineState&) = default;
};

// Devices behind the MMIO window. Implementations may throw to abort a step
// (replay divergence); the instruction then has no architectural effect.
class MmioHandler {
public:
    virtual ~MmioHandler() = default;
    virtual uint32_t mmio_read(uint32_t addr) = 0;
    virtual void mmio_write(uint32_t addr, uint32_t value, std::span<uint8_t> ram) = 0;
};

// Reads as zero, ignores writes.
class NullMmio final : public MmioHandler {
public:
    uint32_t mmio_read(uint32_t) override { return 0; }
    void mmio_write(uint32_t, uint32_t, std::span<uint8_t>) override {}
};

enum class StepKind : uint8_t { Retired, Trapped, Halted };

struct StepOutcome {
    StepKind kind = StepKind::Retired;
    TrapCause cause;
    // ECALL both retires and traps.
    bool retired = false;
};

MachineState reset(std::span<const uint8_t> kernel_image, uint32_t mem_size = kDefaultMemSize);

// Lowest deliverable external line, or -1. Honors status.ie.
inline int deliverable_line(const MachineState& s) {
    if (!s.status.ie || s.pending_irqs == 0) {
        return -1;
    }
    return __builtin_ctz(s.pending_irqs);
}

void deliver_interrupt(MachineState& s, TrapCause cause);

// Executes one step: delivers the lowest pending line when the gate is open
// and interrupts are enabled, otherwise retires (or traps on) one instruction.
StepOutcome step(MachineState& s, bool irq_gate, MmioHandler& mmio);

}  // namespace rvm
