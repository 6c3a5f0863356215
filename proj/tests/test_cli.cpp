#include "support.h"

#include <doctest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>

using namespace rvm;
using namespace rvm::test;

namespace {

struct Out {
    int code = 0;
    std::string text;
};

Out run(const std::string& args) {
    const std::string cmd = std::string(RVM_CLI) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p);
    Out o;
    std::array<char, 4096> buf;
    size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) o.text.append(buf.data(), n);
    const int status = pclose(p);
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return o;
}

std::string img(const std::string& guest, const std::string& kind) {
    return (std::filesystem::path(RVM_GUEST_OUT) / (guest + "." + kind + ".img")).string();
}

std::string stim(const std::string& name) { return (std::filesystem::path(RVM_GUEST_DIR) / name).string(); }

void write_file(const std::filesystem::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::string guest_args(const std::string& g) { return " --kernel " + img(g, "kernel") + " --disk " + img(g, "disk"); }

}  // namespace

TEST_CASE("record, replay, verify-only") {
    TempDir dir;
    const std::string log = (dir / "r.log").string();
    const Out rec = run("record" + guest_args("racey") + " --stimulus " + stim("racey.stim") + " --out " + log + " --quiet");
    REQUIRE(rec.code == 0);
    const Out v = run("replay --log " + log + guest_args("racey") + " --verify-only");
    CHECK(v.code == 0);
    CHECK(v.text.rfind("ok: ", 0) == 0);

    const Out full = run("replay --log " + log + guest_args("racey") + " --shadow-log " + (dir / "s.log").string());
    CHECK(full.code == 0);
    CHECK(run("verify " + log + " " + (dir / "s.log").string()).code == 0);
}

TEST_CASE("exit codes for bad inputs") {
    TempDir dir;
    const std::string log = (dir / "e.log").string();
    REQUIRE(run("record" + guest_args("echo") + " --stimulus " + stim("echo.stim") + " --out " + log + " --quiet").code == 0);

    auto disk = read_file(img("echo", "disk"));
    disk[100] ^= 0xff;
    write_file(dir / "other.disk", std::string(disk.begin(), disk.end()));
    const Out wrong = run("replay --log " + log + " --kernel " + img("echo", "kernel") + " --disk " + (dir / "other.disk").string());
    CHECK(wrong.code == 4);

    CHECK(run("replay --log " + (dir / "missing.log").string() + guest_args("echo")).code == 3);
    CHECK(run("record" + guest_args("echo") + " --counter-profile x86-flaky --out " + (dir / "f.log").string()).code == 1);
    CHECK(run("frobnicate").code == 1);
}

TEST_CASE("log dump") {
    TempDir dir;
    const std::string log = (dir / "t.log").string();
    REQUIRE(run("record" + guest_args("ticker") + " --stimulus " + stim("ticker.stim") + " --out " + log + " --quiet").code == 0);
    const Out d = run("log dump " + log + " --from 2 --to 4");
    REQUIRE(d.code == 0);
    std::vector<nlohmann::ordered_json> lines;
    std::istringstream in(d.text);
    for (std::string l; std::getline(in, l);) lines.push_back(nlohmann::ordered_json::parse(l));
    REQUIRE(lines.size() == 4);
    CHECK(lines[0]["format_version"] == kTraceFormatVersion);
    CHECK(lines[1]["seq"] == 2);
    CHECK(lines[3]["seq"] == 4);
    const auto keys = [](const nlohmann::ordered_json& j) {
        std::vector<std::string> k;
        for (auto it = j.begin(); it != j.end(); ++it) k.push_back(it.key());
        return k;
    };
    // Field order is preserved, not sorted.
    CHECK(keys(lines[1])[0] == "seq");
    CHECK(keys(lines[1])[1] == "icount");
    CHECK(keys(lines[1])[2] == "kind");
}

TEST_CASE("verify reports the first difference") {
    TempDir dir;
    const std::string a = (dir / "a.log").string(), b = (dir / "b.log").string();
    REQUIRE(run("record" + guest_args("racey") + " --stimulus " + stim("racey.stim") + " --out " + a + " --quiet").code == 0);
    REQUIRE(run("record" + guest_args("racey") + " --stimulus " + stim("racey.stim") + " --counter-profile ppc --out " + b +
                " --quiet")
                .code == 0);
    const Out v = run("verify " + a + " " + b);
    CHECK(v.code == 2);
    CHECK(v.text.find("counter") != std::string::npos);
    CHECK(run("verify " + a + " " + a).code == 0);
}

TEST_CASE("assembler and debugger front ends") {
    TempDir dir;
    write_file(dir / "p.s", std::string("start: LI r1, 5\nHALT\n"));
    CHECK(run("asm " + (dir / "p.s").string() + " -o " + (dir / "p.img").string()).code == 0);
    CHECK(std::filesystem::file_size(dir / "p.img") > 0);
    const Out d = run("asm " + (dir / "p.img").string() + " --disassemble");
    CHECK(d.code == 0);
    CHECK(d.text.find("HALT") != std::string::npos);
    CHECK(run("asm " + (dir / "p.s").string()).code == 1);

    const std::string log = (dir / "e.log").string();
    REQUIRE(run("record" + guest_args("echo") + " --stimulus " + stim("echo.stim") + " --out " + log + " --quiet").code == 0);
    const std::string syms = (std::filesystem::path(RVM_GUEST_OUT) / "echo.sym.json").string();
    const std::string cmd = "printf 'b echo:start\\nc\\nwhere\\nq\\n' | " + std::string(RVM_CLI) + " debug --log " + log +
                            guest_args("echo") + " --symbols " + syms + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p);
    std::string text;
    std::array<char, 4096> buf;
    for (size_t n; (n = fread(buf.data(), 1, buf.size(), p)) > 0;) text.append(buf.data(), n);
    CHECK(WEXITSTATUS(pclose(p)) == 0);
    CHECK(text.find("[stopped: breakpoint") != std::string::npos);
    CHECK(text.find("\"symbol\":\"echo:start\"") != std::string::npos);
}
