#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rvm {

struct ListingLine {
    uint32_t addr = 0;
    uint32_t size = 0;  // bytes emitted by the line
    int line = 0;
    std::string text;
    std::string unit;  // source unit ("kernel", a task name, ...)
};

struct AsmProgram {
    std::string source;
    std::map<std::string, uint32_t> symbols;  // labels
    std::map<std::string, int64_t> constants;  // .equ names
    std::vector<uint8_t> image;               // starts at address 0, padded to a word
    std::vector<ListingLine> listing;
    // Sorted, non-overlapping [begin, end) byte ranges that were emitted.
    std::vector<std::pair<uint32_t, uint32_t>> extents;
};

struct AsmOptions {
    std::map<std::string, int64_t> predefined;  // visible to expressions, not exported as labels
    uint32_t origin = 0;                        // initial location counter
    std::string unit = "main";
};

// Two passes: symbols, then emission. Numeric branch/jump operands are raw
// word offsets; operands that mention a symbol are target addresses.
//
// Beyond the core syntax: `.equ NAME, expr`, `.align N`, and the pseudo
// instructions LI (always LUI+ADDI), MV, NOP, J, CALL, RET.
// Throws AsmError carrying the source line.
AsmProgram assemble(std::string_view source, const AsmOptions& opts = {});

// Source that assembles back to exactly `words` placed at `base`. Words that
// do not survive decode/encode are emitted as `.word`.
std::string disassemble_image(std::span<const uint8_t> image, uint32_t base = 0);

// Symbol and listing information for the debugger.
class SymbolTable {
public:
    SymbolTable() = default;
    void add_symbol(const std::string& name, uint32_t addr);
    void add_listing(const ListingLine& l);

    // "label+0x8" for the closest label at or below addr.
    std::optional<std::string> nearest(uint32_t addr) const;
    const ListingLine* line_at(uint32_t addr) const;
    std::optional<uint32_t> lookup(const std::string& name) const;

    const std::map<std::string, uint32_t>& symbols() const { return by_name_; }
    const std::map<uint32_t, ListingLine>& listing() const { return listing_; }
    bool empty() const { return by_name_.empty() && listing_.empty(); }

    void save(const std::filesystem::path& p) const;
    static SymbolTable load(const std::filesystem::path& p);

private:
    std::map<std::string, uint32_t> by_name_;
    std::multimap<uint32_t, std::string> by_addr_;
    std::map<uint32_t, ListingLine> listing_;
};

}  // namespace rvm
