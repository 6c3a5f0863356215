#include "rvm/assembler.h"

#include "rvm/errors.h"
#include "rvm/isa.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fmt/format.h>
#include <fstream>
#include <nlohmann/json.hpp>

namespace rvm {

namespace {

constexpr uint32_t kMaxImageBytes = 16u << 20;

std::string upper(std::string_view s) {
    std::string r(s);
    for (char& c : r) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return r;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }

struct SourceLine {
    int number = 0;
    std::string text;  // without comment, trimmed
    std::vector<std::string> labels;
    std::string op;  // upper-case mnemonic or lower-case directive
    std::vector<std::string> operands;
    uint32_t addr = 0;
    uint32_t size = 0;
};

// Strips `;` and `#` comments outside string and character literals.
std::string_view strip_comment(std::string_view s) {
    char quote = 0;
    for (size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (quote) {
            if (c == '\\') {
                ++i;
            } else if (c == quote) {
                quote = 0;
            }
        } else if (c == '"' || c == '\'') {
            quote = c;
        } else if (c == ';' || c == '#') {
            return s.substr(0, i);
        }
    }
    return s;
}

std::vector<std::string> split_operands(std::string_view s, int line) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    char quote = 0;
    size_t start = 0;
    for (size_t i = 0; i <= s.size(); ++i) {
        if (i < s.size() && quote) {
            if (s[i] == '\\') {
                ++i;
            } else if (s[i] == quote) {
                quote = 0;
            }
            continue;
        }
        if (i == s.size() || s[i] == ',') {
            const auto part = trim(s.substr(start, i - start));
            if (part.empty()) throw AsmError(line, "empty operand");
            out.emplace_back(part);
            start = i + 1;
        } else if (s[i] == '"' || s[i] == '\'') {
            quote = s[i];
        }
    }
    if (quote) throw AsmError(line, "unterminated literal");
    return out;
}

SourceLine parse_line(std::string_view raw, int number) {
    SourceLine l;
    l.number = number;
    std::string_view s = trim(strip_comment(raw));
    l.text = std::string(s);
    for (;;) {
        size_t i = 0;
        if (s.empty() || !ident_start(s[0])) break;
        while (i < s.size() && ident_char(s[i])) ++i;
        size_t j = i;
        while (j < s.size() && (s[j] == ' ' || s[j] == '\t')) ++j;
        if (j < s.size() && s[j] == ':') {
            l.labels.emplace_back(s.substr(0, i));
            s = trim(s.substr(j + 1));
        } else {
            break;
        }
    }
    if (s.empty()) return l;
    size_t i = 0;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::string_view op = s.substr(0, i);
    if (op[0] == '.') {
        l.op = std::string(op);
        std::transform(l.op.begin(), l.op.end(), l.op.begin(), [](char c) { return std::tolower(c); });
    } else {
        l.op = upper(op);
    }
    l.operands = split_operands(s.substr(i), number);
    return l;
}

int unescape(std::string_view s, size_t& i, int line) {
    const char c = s[i++];
    if (c != '\\') return static_cast<unsigned char>(c);
    if (i >= s.size()) throw AsmError(line, "bad escape");
    const char e = s[i++];
    switch (e) {
        case 'n': return '\n';
        case 't': return '\t';
        case 'r': return '\r';
        case '0': return 0;
        case '\\': return '\\';
        case '"': return '"';
        case '\'': return '\'';
        case 'x': {
            if (i + 2 > s.size()) throw AsmError(line, "bad \\x escape");
            int v = 0;
            auto [p, ec] = std::from_chars(s.data() + i, s.data() + i + 2, v, 16);
            if (ec != std::errc() || p != s.data() + i + 2) throw AsmError(line, "bad \\x escape");
            i += 2;
            return v;
        }
        default:
            throw AsmError(line, fmt::format("unknown escape \\{}", e));
    }
}

std::vector<uint8_t> parse_string(std::string_view s, int line) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') throw AsmError(line, ".ascii expects a quoted string");
    const std::string_view body = s.substr(1, s.size() - 2);
    std::vector<uint8_t> out;
    size_t i = 0;
    while (i < body.size()) out.push_back(static_cast<uint8_t>(unescape(body, i, line)));
    return out;
}

struct Value {
    int64_t v = 0;
    bool symbolic = false;
};

class Assembler {
public:
    Assembler(std::string_view source, const AsmOptions& opts) : opts_(opts) {
        prog_.source = std::string(source);
        int n = 0;
        size_t pos = 0;
        while (pos <= source.size()) {
            size_t end = source.find('\n', pos);
            if (end == std::string_view::npos) end = source.size();
            lines_.push_back(parse_line(source.substr(pos, end - pos), ++n));
            pos = end + 1;
        }
    }

    AsmProgram run() {
        pass1();
        pass2();
        finish();
        return std::move(prog_);
    }

private:
    // Pass 1: assign addresses, define labels and constants.
    void pass1() {
        uint32_t loc = opts_.origin;
        final_pass_ = false;
        for (auto& l : lines_) {
            line_ = l.number;
            for (const auto& label : l.labels) define(label, loc, true);
            l.addr = loc;
            if (l.op.empty()) continue;
            if (l.op == ".org") {
                expect(l, 1);
                loc = address(eval(l.operands[0], loc).v);
                l.addr = loc;
            } else if (l.op == ".equ") {
                expect(l, 2);
                define(l.operands[0], eval(l.operands[1], loc).v, false);
            } else if (l.op == ".align") {
                expect(l, 1);
                const int64_t a = eval(l.operands[0], loc).v;
                if (a <= 0 || (a & (a - 1)) != 0) throw AsmError(line_, ".align needs a power of two");
                const uint32_t aligned = static_cast<uint32_t>((loc + a - 1) / a * a);
                l.size = aligned - loc;
            } else if (l.op == ".word") {
                if (l.operands.empty()) throw AsmError(line_, ".word needs a value");
                l.size = static_cast<uint32_t>(4 * l.operands.size());
            } else if (l.op == ".ascii") {
                expect(l, 1);
                l.size = static_cast<uint32_t>(parse_string(l.operands[0], line_).size());
            } else if (l.op[0] == '.') {
                throw AsmError(line_, "unknown directive " + l.op);
            } else if (l.op == "LI") {
                l.size = 8;
            } else if (is_pseudo(l.op) || opcode_from_mnemonic(l.op)) {
                l.size = 4;
            } else {
                throw AsmError(line_, "unknown mnemonic " + l.op);
            }
            if (uint64_t{loc} + l.size > kMaxImageBytes) throw AsmError(line_, "address beyond the image limit");
            loc += l.size;
        }
    }

    void pass2() {
        final_pass_ = true;
        for (const auto& l : lines_) {
            line_ = l.number;
            if (l.size == 0 && l.op != ".word") continue;
            uint32_t loc = l.addr;
            if (l.op == ".align") {
                for (uint32_t i = 0; i < l.size; ++i) emit_byte(loc++, 0);
            } else if (l.op == ".ascii") {
                for (uint8_t b : parse_string(l.operands[0], line_)) emit_byte(loc++, b);
            } else if (l.op == ".word") {
                need_aligned(loc);
                for (const auto& op : l.operands) {
                    const int64_t v = eval(op, loc).v;
                    if (v < INT32_MIN || v > int64_t{UINT32_MAX}) throw AsmError(line_, "word value out of range");
                    emit_word(loc, static_cast<uint32_t>(v));
                    loc += 4;
                }
            } else {
                need_aligned(loc);
                for (const Instruction& in : instructions(l)) {
                    try {
                        emit_word(loc, encode(in));
                    } catch (const EncodeError& e) {
                        throw AsmError(line_, e.what());
                    }
                    loc += 4;
                }
            }
            prog_.listing.push_back(ListingLine{l.addr, l.size, l.number, l.text, opts_.unit});
        }
    }

    void finish() {
        prog_.image.resize((prog_.image.size() + 3) & ~size_t{3}, 0);
        // Merge emitted bytes into extents.
        for (uint32_t a = 0; a < written_.size(); ++a) {
            if (!written_[a]) continue;
            if (!prog_.extents.empty() && prog_.extents.back().second == a) {
                prog_.extents.back().second = a + 1;
            } else {
                prog_.extents.emplace_back(a, a + 1);
            }
        }
    }

    static bool is_pseudo(const std::string& op) {
        return op == "LI" || op == "MV" || op == "NOP" || op == "J" || op == "CALL" || op == "RET";
    }

    std::vector<Instruction> instructions(const SourceLine& l) {
        const auto& o = l.operands;
        const uint32_t pc = l.addr;
        auto ins = [](Opcode op, uint8_t rd, uint8_t rs1, uint8_t rs2, int32_t imm) {
            return Instruction{op, rd, rs1, rs2, imm};
        };
        if (l.op == "LI") {
            expect(l, 2);
            const int64_t v = eval(o[1], pc).v;
            if (v < INT32_MIN || v > int64_t{UINT32_MAX}) throw AsmError(line_, "LI value out of range");
            const uint32_t u = static_cast<uint32_t>(v);
            const int32_t lo = static_cast<int16_t>(u & 0xFFFF);
            const uint32_t hi = ((u - static_cast<uint32_t>(lo)) >> 16) & 0xFFFF;
            const uint8_t rd = reg(o[0]);
            return {ins(Opcode::Lui, rd, 0, 0, static_cast<int32_t>(hi)), ins(Opcode::Addi, rd, rd, 0, lo)};
        }
        if (l.op == "MV") {
            expect(l, 2);
            return {ins(Opcode::Addi, reg(o[0]), reg(o[1]), 0, 0)};
        }
        if (l.op == "NOP") {
            expect(l, 0);
            return {ins(Opcode::Addi, 0, 0, 0, 0)};
        }
        if (l.op == "J") {
            expect(l, 1);
            return {ins(Opcode::Jal, 0, 0, 0, target(o[0], pc))};
        }
        if (l.op == "CALL") {
            expect(l, 1);
            return {ins(Opcode::Jal, 13, 0, 0, target(o[0], pc))};
        }
        if (l.op == "RET") {
            expect(l, 0);
            return {ins(Opcode::Jalr, 0, 13, 0, 0)};
        }

        const Opcode op = *opcode_from_mnemonic(l.op);
        switch (format_of(op)) {
            case Format::None:
                expect(l, 0);
                return {ins(op, 0, 0, 0, 0)};
            case Format::R:
                expect(l, 3);
                return {ins(op, reg(o[0]), reg(o[1]), reg(o[2]), 0)};
            case Format::I:
                expect(l, 3);
                return {ins(op, reg(o[0]), reg(o[1]), 0, imm(o[2], pc))};
            case Format::U:
                expect(l, 2);
                return {ins(op, reg(o[0]), 0, 0, imm(o[1], pc))};
            case Format::Branch:
                expect(l, 3);
                return {ins(op, 0, reg(o[0]), reg(o[1]), target(o[2], pc))};
            case Format::Jump:
                expect(l, 2);
                return {ins(op, reg(o[0]), 0, 0, target(o[1], pc))};
            case Format::CsrRead:
                expect(l, 2);
                return {ins(op, reg(o[0]), 0, 0, csr(o[1], pc))};
            case Format::CsrWrite:
                expect(l, 2);
                return {ins(op, 0, reg(o[1]), 0, csr(o[0], pc))};
            case Format::Invalid:
                break;
        }
        throw AsmError(line_, "unknown mnemonic " + l.op);
    }

    void expect(const SourceLine& l, size_t n) const {
        if (l.operands.size() != n) {
            throw AsmError(line_, fmt::format("{} expects {} operand(s), got {}", l.op, n, l.operands.size()));
        }
    }

    uint8_t reg(const std::string& s) const {
        const std::string u = upper(s);
        if (u == "SP") return 14;
        if (u == "LR") return 13;
        if (u.size() >= 2 && u[0] == 'R') {
            unsigned v = 0;
            auto [p, ec] = std::from_chars(u.data() + 1, u.data() + u.size(), v);
            if (ec == std::errc() && p == u.data() + u.size() && v < 16) return static_cast<uint8_t>(v);
        }
        throw AsmError(line_, "bad register '" + s + "'");
    }

    int32_t imm(const std::string& s, uint32_t pc) {
        const int64_t v = eval(s, pc).v;
        if (v < INT32_MIN || v > INT32_MAX) throw AsmError(line_, "immediate out of range: " + s);
        return static_cast<int32_t>(v);
    }

    int32_t csr(const std::string& s, uint32_t pc) {
        if (auto idx = csr_from_name(upper(s))) return static_cast<int32_t>(*idx);
        return imm(s, pc);
    }

    // Symbolic operands are addresses; plain numbers are word offsets.
    int32_t target(const std::string& s, uint32_t pc) {
        const Value v = eval(s, pc);
        if (!v.symbolic) return imm(s, pc);
        const int64_t delta = v.v - (int64_t{pc} + 4);
        if (delta % 4 != 0) throw AsmError(line_, "branch target is not word aligned: " + s);
        const int64_t words = delta / 4;
        if (words < -32768 || words > 32767) throw AsmError(line_, "branch offset out of range: " + s);
        return static_cast<int32_t>(words);
    }

    uint32_t address(int64_t v) const {
        if (v < 0 || v >= kMaxImageBytes) throw AsmError(line_, fmt::format("address {:#x} out of range", v));
        return static_cast<uint32_t>(v);
    }

    void need_aligned(uint32_t loc) const {
        if (loc & 3u) throw AsmError(line_, fmt::format("misaligned word at {:#x}", loc));
    }

    void define(const std::string& name, int64_t v, bool label) {
        if (name.empty() || !ident_start(name[0]) || name == ".") throw AsmError(line_, "bad symbol name " + name);
        for (char c : name) {
            if (!ident_char(c)) throw AsmError(line_, "bad symbol name " + name);
        }
        if (prog_.symbols.count(name) || prog_.constants.count(name)) {
            throw AsmError(line_, "duplicate label " + name);
        }
        if (label) {
            prog_.symbols[name] = static_cast<uint32_t>(v);
        } else {
            prog_.constants[name] = v;
        }
    }

    std::optional<int64_t> lookup(const std::string& name) const {
        if (auto it = prog_.symbols.find(name); it != prog_.symbols.end()) return it->second;
        if (auto it = prog_.constants.find(name); it != prog_.constants.end()) return it->second;
        if (auto it = opts_.predefined.find(name); it != opts_.predefined.end()) return it->second;
        return std::nullopt;
    }

    // term (('+'|'-') term)*; term = ['-'] (number | 'c' | symbol | '.')
    Value eval(std::string_view s, uint32_t pc) {
        s = trim(s);
        if (s.empty()) throw AsmError(line_, "missing expression");
        Value total;
        size_t i = 0;
        int sign = 1;
        for (;;) {
            while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
            int neg = 1;
            while (i < s.size() && (s[i] == '-' || s[i] == '+')) {
                if (s[i] == '-') neg = -neg;
                ++i;
                while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
            }
            if (i >= s.size()) throw AsmError(line_, "bad expression '" + std::string(s) + "'");
            int64_t v = 0;
            if (std::isdigit(static_cast<unsigned char>(s[i]))) {
                int base = 10;
                if (s.substr(i, 2) == "0x" || s.substr(i, 2) == "0X") {
                    base = 16;
                    i += 2;
                } else if (s.substr(i, 2) == "0b" || s.substr(i, 2) == "0B") {
                    base = 2;
                    i += 2;
                }
                size_t j = i;
                while (j < s.size() && (std::isxdigit(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
                std::string digits;
                for (size_t k = i; k < j; ++k) {
                    if (s[k] != '_') digits += s[k];
                }
                auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
                if (digits.empty() || ec != std::errc() || p != digits.data() + digits.size()) {
                    throw AsmError(line_, "bad number '" + std::string(s) + "'");
                }
                i = j;
            } else if (s[i] == '\'') {
                ++i;
                if (i >= s.size()) throw AsmError(line_, "bad character literal");
                v = unescape(s, i, line_);
                if (i >= s.size() || s[i] != '\'') throw AsmError(line_, "bad character literal");
                ++i;
            } else if (s[i] == '.' && (i + 1 >= s.size() || !ident_char(s[i + 1]))) {
                v = pc;
                total.symbolic = true;
                ++i;
            } else if (ident_start(s[i])) {
                size_t j = i;
                while (j < s.size() && ident_char(s[j])) ++j;
                const std::string name(s.substr(i, j - i));
                auto found = lookup(name);
                if (!found) {
                    if (final_pass_) throw AsmError(line_, "unresolved label " + name);
                    throw AsmError(line_, "symbol " + name + " must be defined before use here");
                }
                v = *found;
                total.symbolic = true;
                i = j;
            } else {
                throw AsmError(line_, "bad expression '" + std::string(s) + "'");
            }
            total.v += sign * neg * v;
            while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
            if (i >= s.size()) break;
            if (s[i] == '+') {
                sign = 1;
            } else if (s[i] == '-') {
                sign = -1;
            } else {
                throw AsmError(line_, "bad expression '" + std::string(s) + "'");
            }
            ++i;
        }
        return total;
    }

    void emit_byte(uint32_t addr, uint8_t b) {
        if (addr >= prog_.image.size()) {
            prog_.image.resize(addr + 1, 0);
            written_.resize(addr + 1, false);
        }
        if (written_[addr]) throw AsmError(line_, fmt::format("overlapping output at {:#x}", addr));
        written_[addr] = true;
        prog_.image[addr] = b;
    }

    void emit_word(uint32_t addr, uint32_t w) {
        for (int i = 0; i < 4; ++i) emit_byte(addr + i, static_cast<uint8_t>(w >> (8 * i)));
    }

    const AsmOptions& opts_;
    AsmProgram prog_;
    std::vector<SourceLine> lines_;
    std::vector<bool> written_;
    int line_ = 0;
    bool final_pass_ = false;
};

}  // namespace

AsmProgram assemble(std::string_view source, const AsmOptions& opts) { return Assembler(source, opts).run(); }

std::string disassemble_image(std::span<const uint8_t> image, uint32_t base) {
    std::string out = fmt::format(".org {:#x}\n", base);
    for (size_t off = 0; off + 4 <= image.size(); off += 4) {
        const uint32_t w = uint32_t{image[off]} | uint32_t{image[off + 1]} << 8 | uint32_t{image[off + 2]} << 16 |
                           uint32_t{image[off + 3]} << 24;
        const Instruction in = decode(w);
        std::string text;
        try {
            if (in.opcode != Opcode::Illegal && encode(in) == w) text = disassemble(in);
        } catch (const EncodeError&) {
        }
        if (text.empty()) text = fmt::format(".word {:#010x}", w);
        out += fmt::format("    {:<28}; {:08x}\n", text, base + off);
    }
    if (image.size() % 4 != 0) {
        out += ".ascii \"";
        for (size_t i = image.size() / 4 * 4; i < image.size(); ++i) out += fmt::format("\\x{:02x}", image[i]);
        out += "\"\n";
    }
    return out;
}

void SymbolTable::add_symbol(const std::string& name, uint32_t addr) {
    by_name_[name] = addr;
    by_addr_.emplace(addr, name);
}

void SymbolTable::add_listing(const ListingLine& l) { listing_[l.addr] = l; }

std::optional<std::string> SymbolTable::nearest(uint32_t addr) const {
    auto it = by_addr_.upper_bound(addr);
    if (it == by_addr_.begin()) return std::nullopt;
    --it;
    if (it->first == addr) return it->second;
    return fmt::format("{}+{:#x}", it->second, addr - it->first);
}

const ListingLine* SymbolTable::line_at(uint32_t addr) const {
    auto it = listing_.upper_bound(addr);
    if (it == listing_.begin()) return nullptr;
    --it;
    if (addr < it->first + std::max<uint32_t>(it->second.size, 1)) return &it->second;
    return nullptr;
}

std::optional<uint32_t> SymbolTable::lookup(const std::string& name) const {
    if (auto it = by_name_.find(name); it != by_name_.end()) return it->second;
    return std::nullopt;
}

void SymbolTable::save(const std::filesystem::path& p) const {
    nlohmann::ordered_json j;
    j["symbols"] = nlohmann::ordered_json::object();
    for (const auto& [name, addr] : by_name_) j["symbols"][name] = addr;
    j["listing"] = nlohmann::ordered_json::array();
    for (const auto& [addr, l] : listing_) {
        j["listing"].push_back({{"addr", l.addr}, {"size", l.size}, {"line", l.line}, {"unit", l.unit}, {"text", l.text}});
    }
    std::ofstream out(p);
    if (!out) throw Error("cannot write " + p.string());
    out << j.dump(1) << "\n";
}

SymbolTable SymbolTable::load(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw Error("cannot open " + p.string());
    SymbolTable t;
    try {
        const auto j = nlohmann::json::parse(in);
        for (const auto& [name, addr] : j.at("symbols").items()) t.add_symbol(name, addr.get<uint32_t>());
        for (const auto& l : j.at("listing")) {
            t.add_listing(ListingLine{l.at("addr").get<uint32_t>(), l.at("size").get<uint32_t>(), l.at("line").get<int>(),
                                      l.at("text").get<std::string>(), l.at("unit").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(p.string() + ": bad symbol file: " + e.what());
    }
    return t;
}

}  // namespace rvm
