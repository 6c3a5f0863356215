#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace rvm {

inline constexpr uint32_t kIsaVersion = 1;

enum class Opcode : uint8_t {
    Halt = 0x00,
    Add = 0x01,
    Sub = 0x02,
    And = 0x03,
    Or = 0x04,
    Xor = 0x05,
    Shl = 0x06,
    Shr = 0x07,
    Addi = 0x10,
    Lui = 0x11,
    Ld = 0x20,
    St = 0x21,
    Beq = 0x30,
    Bne = 0x31,
    Blt = 0x32,
    Jal = 0x40,
    Jalr = 0x41,
    Ecall = 0x50,
    Eret = 0x51,
    Csrr = 0x60,
    Csrw = 0x61,
    Illegal = 0xFF,  // decode marker only, never encoded
};

// Operand layout of an opcode. Determines which Instruction fields are
// meaningful and how imm16 is extended.
enum class Format : uint8_t {
    None,     // HALT, ECALL, ERET
    R,        // rd, rs1, rs2
    I,        // rd, rs1, signed imm
    U,        // rd, unsigned imm (LUI)
    Branch,   // rs1 in [23:20], rs2 in [19:16], signed word offset
    Jump,     // rd, signed word offset
    CsrRead,  // rd, csr index in imm
    CsrWrite, // rs1, csr index in imm
    Invalid,
};

enum class Csr : uint16_t {
    Status = 0,
    Ivec = 1,
    Epc = 2,
    Estatus = 3,
    Cause = 4,
    Mark = 5,
};
inline constexpr unsigned kNumCsrs = 6;

struct Instruction {
    Opcode opcode = Opcode::Halt;
    uint8_t rd = 0;
    uint8_t rs1 = 0;
    uint8_t rs2 = 0;
    // Already sign- or zero-extended according to the opcode's format.
    int32_t imm = 0;

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

Format format_of(Opcode op);
std::optional<Opcode> opcode_from_byte(uint8_t byte);
std::string_view mnemonic(Opcode op);
std::optional<Opcode> opcode_from_mnemonic(std::string_view name);
std::string_view csr_name(uint32_t index);
std::optional<uint32_t> csr_from_name(std::string_view name);

// Never fails: unknown opcodes decode to Opcode::Illegal and trap when executed.
Instruction decode(uint32_t word);

// Throws EncodeError when a field is out of range for the opcode's format.
uint32_t encode(const Instruction& instr);

// Assembler-compatible text for one instruction. Branch and jump targets are
// rendered as raw word offsets.
std::string disassemble(const Instruction& instr);

inline constexpr bool imm_is_signed(Format f) {
    return f == Format::I || f == Format::Branch || f == Format::Jump;
}

}  // namespace rvm
