#include "rvm/isa.h"

#include "rvm/errors.h"

#include <array>
#include <fmt/format.h>

namespace rvm {

namespace {

struct OpInfo {
    Opcode op;
    std::string_view name;
    Format format;
};

constexpr std::array kOps = {
    OpInfo{Opcode::Halt, "HALT", Format::None},
    OpInfo{Opcode::Add, "ADD", Format::R},
    OpInfo{Opcode::Sub, "SUB", Format::R},
    OpInfo{Opcode::And, "AND", Format::R},
    OpInfo{Opcode::Or, "OR", Format::R},
    OpInfo{Opcode::Xor, "XOR", Format::R},
    OpInfo{Opcode::Shl, "SHL", Format::R},
    OpInfo{Opcode::Shr, "SHR", Format::R},
    OpInfo{Opcode::Addi, "ADDI", Format::I},
    OpInfo{Opcode::Lui, "LUI", Format::U},
    OpInfo{Opcode::Ld, "LD", Format::I},
    OpInfo{Opcode::St, "ST", Format::I},
    OpInfo{Opcode::Beq, "BEQ", Format::Branch},
    OpInfo{Opcode::Bne, "BNE", Format::Branch},
    OpInfo{Opcode::Blt, "BLT", Format::Branch},
    OpInfo{Opcode::Jal, "JAL", Format::Jump},
    OpInfo{Opcode::Jalr, "JALR", Format::I},
    OpInfo{Opcode::Ecall, "ECALL", Format::None},
    OpInfo{Opcode::Eret, "ERET", Format::None},
    OpInfo{Opcode::Csrr, "CSRR", Format::CsrRead},
    OpInfo{Opcode::Csrw, "CSRW", Format::CsrWrite},
};

constexpr std::array<std::string_view, kNumCsrs> kCsrNames = {
    "STATUS", "IVEC", "EPC", "ESTATUS", "CAUSE", "MARK"};

// Opcode byte -> index into kOps, or -1.
constexpr std::array<int8_t, 256> kByByte = [] {
    std::array<int8_t, 256> t{};
    t.fill(-1);
    for (size_t i = 0; i < kOps.size(); ++i) t[static_cast<uint8_t>(kOps[i].op)] = static_cast<int8_t>(i);
    return t;
}();

const OpInfo* find(Opcode op) {
    const int i = kByByte[static_cast<uint8_t>(op)];
    return i < 0 ? nullptr : &kOps[static_cast<size_t>(i)];
}

void check_reg(uint8_t r, std::string_view what) {
    if (r > 15) {
        throw EncodeError(fmt::format("register index {} out of range for {}", r, what));
    }
}

}  // namespace

Format format_of(Opcode op) {
    const OpInfo* info = find(op);
    return info ? info->format : Format::Invalid;
}

std::optional<Opcode> opcode_from_byte(uint8_t byte) {
    const int i = kByByte[byte];
    if (i < 0) return std::nullopt;
    return kOps[static_cast<size_t>(i)].op;
}

std::string_view mnemonic(Opcode op) {
    const OpInfo* info = find(op);
    return info ? info->name : std::string_view("ILLEGAL");
}

std::optional<Opcode> opcode_from_mnemonic(std::string_view name) {
    for (const auto& info : kOps) {
        if (info.name == name) {
            return info.op;
        }
    }
    return std::nullopt;
}

std::string_view csr_name(uint32_t index) {
    return index < kNumCsrs ? kCsrNames[index] : std::string_view{};
}

std::optional<uint32_t> csr_from_name(std::string_view name) {
    for (uint32_t i = 0; i < kNumCsrs; ++i) {
        if (kCsrNames[i] == name) {
            return i;
        }
    }
    return std::nullopt;
}

Instruction decode(uint32_t word) {
    Instruction in;
    const int index = kByByte[word >> 24];
    if (index < 0) {
        in.opcode = Opcode::Illegal;
        return in;
    }
    const OpInfo& info = kOps[static_cast<size_t>(index)];
    in.opcode = info.op;
    const uint8_t f1 = (word >> 20) & 0xF;
    const uint8_t f2 = (word >> 16) & 0xF;
    const uint8_t f3 = (word >> 12) & 0xF;
    const uint16_t raw = word & 0xFFFF;
    const int32_t simm = static_cast<int16_t>(raw);
    switch (info.format) {
        case Format::None:
            break;
        case Format::R:
            in.rd = f1;
            in.rs1 = f2;
            in.rs2 = f3;
            break;
        case Format::I:
            in.rd = f1;
            in.rs1 = f2;
            in.imm = simm;
            break;
        case Format::U:
            in.rd = f1;
            in.imm = raw;
            break;
        case Format::Branch:
            in.rs1 = f1;
            in.rs2 = f2;
            in.imm = simm;
            break;
        case Format::Jump:
            in.rd = f1;
            in.imm = simm;
            break;
        case Format::CsrRead:
            in.rd = f1;
            in.imm = raw;
            break;
        case Format::CsrWrite:
            in.rs1 = f2;
            in.imm = raw;
            break;
        case Format::Invalid:
            in.opcode = Opcode::Illegal;
            break;
    }
    return in;
}

uint32_t encode(const Instruction& in) {
    const Format f = format_of(in.opcode);
    if (f == Format::Invalid) {
        throw EncodeError("cannot encode an illegal instruction");
    }
    const std::string_view name = mnemonic(in.opcode);
    check_reg(in.rd, name);
    check_reg(in.rs1, name);
    check_reg(in.rs2, name);

    uint32_t imm_bits = 0;
    if (f == Format::I || f == Format::Branch || f == Format::Jump) {
        if (in.imm < -32768 || in.imm > 32767) {
            throw EncodeError(fmt::format("immediate {} out of signed 16-bit range for {}", in.imm, name));
        }
        imm_bits = static_cast<uint16_t>(in.imm);
    } else if (f == Format::U || f == Format::CsrRead || f == Format::CsrWrite) {
        if (in.imm < 0 || in.imm > 0xFFFF) {
            throw EncodeError(fmt::format("immediate {} out of unsigned 16-bit range for {}", in.imm, name));
        }
        imm_bits = static_cast<uint32_t>(in.imm);
    }

    uint32_t word = static_cast<uint32_t>(in.opcode) << 24;
    switch (f) {
        case Format::None:
            break;
        case Format::R:
            word |= (uint32_t{in.rd} << 20) | (uint32_t{in.rs1} << 16) | (uint32_t{in.rs2} << 12);
            break;
        case Format::I:
            word |= (uint32_t{in.rd} << 20) | (uint32_t{in.rs1} << 16) | imm_bits;
            break;
        case Format::U:
        case Format::Jump:
        case Format::CsrRead:
            word |= (uint32_t{in.rd} << 20) | imm_bits;
            break;
        case Format::Branch:
            word |= (uint32_t{in.rs1} << 20) | (uint32_t{in.rs2} << 16) | imm_bits;
            break;
        case Format::CsrWrite:
            word |= (uint32_t{in.rs1} << 16) | imm_bits;
            break;
        case Format::Invalid:
            break;
    }
    return word;
}

std::string disassemble(const Instruction& in) {
    const std::string_view name = mnemonic(in.opcode);
    auto csr = [](int32_t index) {
        auto n = csr_name(static_cast<uint32_t>(index));
        return n.empty() ? std::to_string(index) : std::string(n);
    };
    switch (format_of(in.opcode)) {
        case Format::None:
            return std::string(name);
        case Format::R:
            return fmt::format("{} r{}, r{}, r{}", name, in.rd, in.rs1, in.rs2);
        case Format::I:
            return fmt::format("{} r{}, r{}, {}", name, in.rd, in.rs1, in.imm);
        case Format::U:
            return fmt::format("{} r{}, {:#x}", name, in.rd, in.imm);
        case Format::Branch:
            return fmt::format("{} r{}, r{}, {}", name, in.rs1, in.rs2, in.imm);
        case Format::Jump:
            return fmt::format("{} r{}, {}", name, in.rd, in.imm);
        case Format::CsrRead:
            return fmt::format("{} r{}, {}", name, in.rd, csr(in.imm));
        case Format::CsrWrite:
            return fmt::format("{} {}, r{}", name, csr(in.imm), in.rs1);
        case Format::Invalid:
            break;
    }
    return "ILLEGAL";
}

}  // namespace rvm
