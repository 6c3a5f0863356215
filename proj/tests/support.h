#pragma once

#include "rvm/engine.h"
#include "rvm/guest_kit.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

namespace rvm::test {

inline std::string guest_source(const std::string& name) {
    std::ifstream in(std::filesystem::path(RVM_GUEST_DIR) / name);
    if (!in) throw std::runtime_error("missing guest file " + name);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline StimulusScript guest_stimulus(const std::string& name) {
    return StimulusScript::load((std::filesystem::path(RVM_GUEST_DIR) / name).string());
}

// The three sample systems, as the build links them.
inline GuestImage sample_guest(const std::string& which) {
    std::vector<GuestTask> tasks;
    if (which == "echo") {
        tasks = {{"echo", guest_source("echo.s")}};
    } else if (which == "racey") {
        tasks = {{"racey0", guest_source("racey.s")}, {"racey1", guest_source("racey.s")}, {"echo", guest_source("echo.s")}};
    } else if (which == "ticker") {
        tasks = {{"ticker", guest_source("ticker.s")}, {"stop", guest_source("ticker_stop.s")}};
    } else {
        throw std::runtime_error("unknown sample " + which);
    }
    return build_guest_image(guest_source("kernel.s"), tasks, guest_source("banner.txt"));
}

// Kernel image built from a bare program (no task table), for engine tests.
inline std::vector<uint8_t> bare_image(const std::string& source) {
    return assemble(source, AsmOptions{abi_symbols(), 0, "bare"}).image;
}

inline std::shared_ptr<const DiskImage> disk_of(const GuestImage& g) { return DiskImage::from_bytes(g.disk_image); }

inline std::shared_ptr<const DiskImage> empty_disk() { return DiskImage::from_bytes(make_disk("", 4)); }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "rvm") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// A record with simulated time: each clock query advances `us_per_query`
// microseconds, so runs are reproducible and phases are selectable.
struct SimRecord {
    uint64_t us_per_query = 25;
    uint64_t phase_us = 0;
    uint64_t checkpoint_interval = 1'000'000;
    CounterConfig counter;
    bool allow_unusable = false;
    uint64_t max_instructions = kDefaultMaxInstructions;

    RunSummary run(const GuestImage& g, const StimulusScript& script, const std::filesystem::path& log) const {
        SimulatedClock clock(us_per_query, phase_us);
        RecordOptions o;
        o.counter = counter;
        o.allow_unusable_counter = allow_unusable;
        o.checkpoint_interval = checkpoint_interval;
        o.max_instructions = max_instructions;
        o.clock = &clock;
        return record(g.kernel_image, disk_of(g), script, o, log);
    }
};

inline uint32_t word_at(const MachineState& m, uint32_t addr) {
    uint32_t w = 0;
    m.read_word(addr, w);
    return w;
}

}  // namespace rvm::test
