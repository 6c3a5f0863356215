#include "rvm/machine.h"

#include "rvm/errors.h"

#include <cstring>
#include <fmt/format.h>

namespace rvm {

namespace {

inline uint32_t load_le(const uint8_t* p) {
    uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
}

inline void store_le(uint8_t* p, uint32_t v) { std::memcpy(p, &v, 4); }

inline bool ram_ok(const MachineState& s, uint32_t addr) {
    return (addr & 3u) == 0 && s.mem.size() >= 4 && addr <= s.mem.size() - 4;
}

inline void set_reg(MachineState& s, uint8_t r, uint32_t v) {
    if (r != 0) {
        s.regs[r] = v;
    }
}

StepOutcome trap(MachineState& s, uint32_t code) {
    deliver_interrupt(s, TrapCause{code});
    return StepOutcome{StepKind::Trapped, TrapCause{code}, false};
}

}  // namespace

bool MachineState::read_word(uint32_t addr, uint32_t& out) const {
    if (!ram_ok(*this, addr)) {
        return false;
    }
    out = load_le(mem.data() + addr);
    return true;
}

bool MachineState::write_word(uint32_t addr, uint32_t value) {
    if (!ram_ok(*this, addr)) {
        return false;
    }
    store_le(mem.data() + addr, value);
    return true;
}

MachineState reset(std::span<const uint8_t> kernel_image, uint32_t mem_size) {
    if (mem_size < 4 || mem_size % 4 != 0) {
        throw Error(fmt::format("memory size {} must be a nonzero multiple of 4", mem_size));
    }
    if (kernel_image.size() > mem_size) {
        throw Error(fmt::format("kernel image of {} bytes does not fit in {} bytes of memory",
                                kernel_image.size(), mem_size));
    }
    MachineState s;
    s.mem.assign(mem_size, 0);
    std::memcpy(s.mem.data(), kernel_image.data(), kernel_image.size());
    return s;
}

void deliver_interrupt(MachineState& s, TrapCause c) {
    const Status prev = s.status;
    s.csrs[static_cast<unsigned>(Csr::Epc)] = s.pc;
    s.csrs[static_cast<unsigned>(Csr::Estatus)] = prev.to_word();
    s.csrs[static_cast<unsigned>(Csr::Cause)] = c.code;
    s.status = Status{CpuMode::Supervisor, false};
    s.pc = s.csrs[static_cast<unsigned>(Csr::Ivec)];
    if (c.is_external()) {
        s.pending_irqs &= static_cast<uint16_t>(~(1u << c.code));
    }
    if (prev.mode == CpuMode::User) {
        ++s.mode_switches;
    }
}

StepOutcome step(MachineState& s, bool irq_gate, MmioHandler& mmio) {
    if (s.halted) {
        return StepOutcome{StepKind::Halted, {}, false};
    }
    if (irq_gate) {
        const int line = deliverable_line(s);
        if (line >= 0) {
            return trap(s, static_cast<uint32_t>(line));
        }
    }

    if (!ram_ok(s, s.pc)) {
        return trap(s, cause::kMemoryFault);
    }
    const Instruction in = decode(load_le(s.mem.data() + s.pc));
    const uint32_t a = s.regs[in.rs1];
    const uint32_t b = s.regs[in.rs2];
    uint32_t next = s.pc + 4;
    const bool user = s.status.mode == CpuMode::User;

    switch (in.opcode) {
        case Opcode::Halt:
            s.halted = true;
            s.pc = next;
            ++s.retired;
            return StepOutcome{StepKind::Halted, {}, true};
        case Opcode::Add: set_reg(s, in.rd, a + b); break;
        case Opcode::Sub: set_reg(s, in.rd, a - b); break;
        case Opcode::And: set_reg(s, in.rd, a & b); break;
        case Opcode::Or: set_reg(s, in.rd, a | b); break;
        case Opcode::Xor: set_reg(s, in.rd, a ^ b); break;
        case Opcode::Shl: set_reg(s, in.rd, a << (b & 31u)); break;
        case Opcode::Shr: set_reg(s, in.rd, a >> (b & 31u)); break;
        case Opcode::Addi: set_reg(s, in.rd, a + static_cast<uint32_t>(in.imm)); break;
        case Opcode::Lui: set_reg(s, in.rd, static_cast<uint32_t>(in.imm) << 16); break;
        case Opcode::Ld: {
            const uint32_t addr = a + static_cast<uint32_t>(in.imm);
            uint32_t v;
            if (in_mmio_window(addr) && (addr & 3u) == 0) {
                v = mmio.mmio_read(addr);
            } else if (ram_ok(s, addr)) {
                v = load_le(s.mem.data() + addr);
            } else {
                return trap(s, cause::kMemoryFault);
            }
            set_reg(s, in.rd, v);
            break;
        }
        case Opcode::St: {
            const uint32_t addr = a + static_cast<uint32_t>(in.imm);
            const uint32_t v = s.regs[in.rd];
            if (in_mmio_window(addr) && (addr & 3u) == 0) {
                mmio.mmio_write(addr, v, s.mem);
            } else if (ram_ok(s, addr)) {
                store_le(s.mem.data() + addr, v);
            } else {
                return trap(s, cause::kMemoryFault);
            }
            break;
        }
        case Opcode::Beq:
            if (s.regs[in.rs1] == s.regs[in.rs2]) next += static_cast<uint32_t>(in.imm) * 4u;
            break;
        case Opcode::Bne:
            if (s.regs[in.rs1] != s.regs[in.rs2]) next += static_cast<uint32_t>(in.imm) * 4u;
            break;
        case Opcode::Blt:
            if (static_cast<int32_t>(s.regs[in.rs1]) < static_cast<int32_t>(s.regs[in.rs2]))
                next += static_cast<uint32_t>(in.imm) * 4u;
            break;
        case Opcode::Jal:
            set_reg(s, in.rd, next);
            next += static_cast<uint32_t>(in.imm) * 4u;
            break;
        case Opcode::Jalr: {
            const uint32_t target = a + static_cast<uint32_t>(in.imm);
            if (target & 3u) {
                return trap(s, cause::kMemoryFault);
            }
            set_reg(s, in.rd, next);
            next = target;
            break;
        }
        case Opcode::Ecall:
            s.pc = next;
            ++s.retired;
            deliver_interrupt(s, TrapCause{cause::kEcall});
            return StepOutcome{StepKind::Trapped, TrapCause{cause::kEcall}, true};
        case Opcode::Eret: {
            if (user) {
                return trap(s, cause::kPrivilege);
            }
            const Status restored = Status::from_word(s.csrs[static_cast<unsigned>(Csr::Estatus)]);
            s.pc = s.csrs[static_cast<unsigned>(Csr::Epc)];
            s.status = restored;
            if (restored.mode == CpuMode::User) {
                ++s.mode_switches;
            }
            ++s.retired;
            return StepOutcome{StepKind::Retired, {}, true};
        }
        case Opcode::Csrr:
            if (user) {
                return trap(s, cause::kPrivilege);
            }
            if (static_cast<uint32_t>(in.imm) >= kNumCsrs) {
                return trap(s, cause::kIllegal);
            }
            set_reg(s, in.rd, s.csr(static_cast<Csr>(in.imm)));
            break;
        case Opcode::Csrw: {
            if (user) {
                return trap(s, cause::kPrivilege);
            }
            const auto index = static_cast<uint32_t>(in.imm);
            if (index >= kNumCsrs) {
                return trap(s, cause::kIllegal);
            }
            switch (static_cast<Csr>(index)) {
                case Csr::Status:
                    // Only ie is writable; privilege changes go through traps and ERET.
                    s.status.ie = (a & 2u) != 0;
                    break;
                case Csr::Ivec:
                case Csr::Epc:
                    s.csrs[index] = a & ~3u;
                    break;
                default:
                    s.csrs[index] = a;
                    break;
            }
            break;
        }
        case Opcode::Illegal:
            return trap(s, cause::kIllegal);
    }

    s.pc = next;
    ++s.retired;
    return StepOutcome{StepKind::Retired, {}, true};
}

}  // namespace rvm
