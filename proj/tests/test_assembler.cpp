#include "support.h"

#include <doctest.h>

using namespace rvm;
using namespace rvm::test;

namespace {

std::vector<uint32_t> words_of(const AsmProgram& p) {
    std::vector<uint32_t> out(p.image.size() / 4);
    std::memcpy(out.data(), p.image.data(), p.image.size());
    return out;
}

int error_line(std::string_view src) {
    try {
        assemble(src);
    } catch (const AsmError& e) {
        return e.line();
    }
    return -1;
}

}  // namespace

TEST_CASE("basic encodings") {
    CHECK(words_of(assemble("ADDI r1, r0, 5\nHALT")) == std::vector<uint32_t>{0x10100005, 0x00000000});
    const AsmProgram loop = assemble("loop: JAL r0, loop");
    CHECK(decode(words_of(loop)[0]) == Instruction{Opcode::Jal, 0, 0, 0, -1});
    CHECK(loop.symbols.at("loop") == 0);
    CHECK(words_of(assemble("BEQ r1, r2, -2")) == std::vector<uint32_t>{0x3012FFFE});
    CHECK(words_of(assemble("ADD r3, r1, r2")) == std::vector<uint32_t>{0x01312000});
}

TEST_CASE("labels, directives and expressions") {
    const AsmProgram p = assemble(R"(
        .equ BASE, 0x100
        .org BASE
start:  LI   r1, 0x12345678      ; always two words
        MV   r2, r1
        NOP
        CALL fn
        J    start
        .align 16
fn:     RET
data:   .word 1, -1, 'A', data + 4
msg:    .ascii "hi\n"
)");
    CHECK(p.symbols.at("start") == 0x100);
    CHECK(p.constants.at("BASE") == 0x100);
    const auto w = words_of(p);
    auto at = [&](uint32_t addr) { return w[addr / 4]; };
    CHECK(decode(at(0x100)) == Instruction{Opcode::Lui, 1, 0, 0, 0x1234});
    CHECK(decode(at(0x104)) == Instruction{Opcode::Addi, 1, 1, 0, 0x5678});
    CHECK(decode(at(0x108)) == Instruction{Opcode::Addi, 2, 1, 0, 0});
    CHECK(decode(at(0x10C)) == Instruction{Opcode::Addi, 0, 0, 0, 0});
    const uint32_t fn = p.symbols.at("fn");
    CHECK(fn % 16 == 0);
    CHECK(decode(at(0x110)) == Instruction{Opcode::Jal, 13, 0, 0, static_cast<int32_t>(fn - 0x114) / 4});
    CHECK(decode(at(0x114)) == Instruction{Opcode::Jal, 0, 0, 0, (0x100 - 0x118) / 4});
    CHECK(decode(at(fn)) == Instruction{Opcode::Jalr, 0, 13, 0, 0});
    const uint32_t data = p.symbols.at("data");
    CHECK(at(data) == 1);
    CHECK(at(data + 4) == 0xFFFFFFFF);
    CHECK(at(data + 8) == 'A');
    CHECK(at(data + 12) == data + 4);
    const uint32_t msg = p.symbols.at("msg");
    CHECK(p.image[msg] == 'h');
    CHECK(p.image[msg + 2] == '\n');
}

TEST_CASE("LI sign handling reconstructs the full value") {
    for (int64_t v : {0LL, 1LL, -1LL, 0x7FFFLL, 0x8000LL, 0xFFFFLL, 0x12348765LL, 0xFFFF8000LL, -32768LL}) {
        const auto img = assemble("LI r3, " + std::to_string(v) + "\nHALT").image;
        NullMmio io;
        MachineState m = reset(img);
        step(m, false, io);
        step(m, false, io);
        CHECK(m.regs[3] == static_cast<uint32_t>(v));
    }
}

TEST_CASE("errors carry the source line") {
    CHECK(error_line("NOP\nFROB r1") == 2);
    CHECK(error_line("a: NOP\na: NOP") == 2);
    CHECK(error_line("NOP\n\nJ nowhere") == 3);
    CHECK(error_line("ADDI r1, r0, 70000") == 1);
    CHECK(error_line("ADD r1, r2") == 1);
    CHECK(error_line("ADD r1, r2, r16") == 1);
    CHECK(error_line(".org 8\nNOP\n.org 8\nNOP") == 4);
    CHECK(error_line(".ascii \"x\"\nNOP") == 2);
    CHECK(error_line("BEQ r1, r2, 2\nt: .word 0\nBEQ r1, r2, t + 2") == 3);
}

TEST_CASE("listing maps addresses to source lines") {
    const AsmProgram p = assemble("start:\n  ADDI r1, r0, 1\n  LI r2, 5\n", AsmOptions{{}, 0, "unit"});
    REQUIRE(p.listing.size() == 2);
    CHECK(p.listing[0].addr == 0);
    CHECK(p.listing[0].line == 2);
    CHECK(p.listing[1].addr == 4);
    CHECK(p.listing[1].size == 8);
    CHECK(p.listing[1].unit == "unit");
}

TEST_CASE("disassembly of the kernel reassembles to the same image") {
    const GuestImage g = sample_guest("racey");
    const std::string text = disassemble_image(g.kernel_image);
    CHECK(assemble(text).image == g.kernel_image);

    const std::vector<uint8_t> odd = {0x05, 0x00, 0x10, 0x10, 0xEF, 0xBE, 0xAD, 0xDE};
    CHECK(assemble(disassemble_image(odd)).image == odd);
}

TEST_CASE("symbol tables") {
    TempDir dir;
    SymbolTable t;
    t.add_symbol("start", 0x100);
    t.add_symbol("loop", 0x110);
    t.add_listing({0x110, 4, 7, "ADDI r1, r1, 1", "k"});
    CHECK(t.nearest(0x118) == "loop+0x8");
    CHECK(t.nearest(0x110) == "loop");
    CHECK_FALSE(t.nearest(0x10).has_value());
    CHECK(t.lookup("start") == 0x100u);
    REQUIRE(t.line_at(0x110));
    CHECK(t.line_at(0x110)->line == 7);
    t.save(dir / "s.json");
    const SymbolTable back = SymbolTable::load(dir / "s.json");
    CHECK(back.symbols() == t.symbols());
    CHECK(back.line_at(0x110)->text == "ADDI r1, r1, 1");
}
