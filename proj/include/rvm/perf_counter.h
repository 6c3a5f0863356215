#pragma once

#include "rvm/errors.h"
#include "rvm/machine.h"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace rvm {

// Modeled retired-instruction counter hardware.
//   Exact      - counts precisely.
//   PpcMpc7441 - overcounts by one per user/supervisor switch; the switch
//                count is also available, so the error is compensable.
//   X86Flaky   - spurious increments that nothing can compensate.
enum class CounterProfile : uint8_t { Exact, PpcMpc7441, X86Flaky };

std::string_view to_string(CounterProfile p);
std::optional<CounterProfile> profile_from_string(std::string_view s);

struct CounterConfig {
    CounterProfile profile = CounterProfile::Exact;
    uint64_t seed = 0;  // X86Flaky noise seed
    bool count_user = true;
    bool count_supervisor = true;
    bool marked_only = false;

    // Throws Error when no mode is admitted.
    void validate() const;
    bool usable() const { return profile != CounterProfile::X86Flaky; }

    bool admits(CpuMode mode, bool mark) const {
        const bool mode_ok = mode == CpuMode::User ? count_user : count_supervisor;
        return mode_ok && (!marked_only || mark);
    }

    friend bool operator==(const CounterConfig&, const CounterConfig&) = default;
};

struct CounterState {
    uint64_t raw = 0;
    // Switches observed while counting. Tracked under every profile; only
    // PpcMpc7441 adds them to raw.
    uint64_t mode_switch_snapshot = 0;
    std::optional<uint64_t> pmi_target;
    bool pmi_fired = false;

    friend bool operator==(const CounterState&, const CounterState&) = default;
};

namespace detail {

inline uint64_t mix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Seed-derived noise. Keyed on the counter value so that the sequence is a
// pure function of (seed, history).
inline bool flaky_draw(uint64_t seed, uint64_t raw, uint64_t salt, uint64_t one_in) {
    return mix64(seed ^ mix64(raw * 2 + salt)) % one_in == 0;
}

// The value PMI comparisons use: corrected for usable profiles, raw otherwise.
inline uint64_t pmi_count(const CounterState& c, const CounterConfig& cfg) {
    return cfg.profile == CounterProfile::PpcMpc7441 ? c.raw - c.mode_switch_snapshot : c.raw;
}

inline void check_pmi(CounterState& c, const CounterConfig& cfg) {
    if (c.pmi_target && !c.pmi_fired && pmi_count(c, cfg) == *c.pmi_target) {
        c.pmi_fired = true;
    }
}

}  // namespace detail

inline constexpr uint64_t kFlakyRetireOneIn = 256;
inline constexpr uint64_t kFlakySwitchOneIn = 2;

namespace detail {

inline void retire(CounterState& c, const CounterConfig& cfg, CpuMode mode, bool mark) {
    if (!cfg.admits(mode, mark)) {
        return;
    }
    ++c.raw;
    if (cfg.profile == CounterProfile::X86Flaky && flaky_draw(cfg.seed, c.raw, 0, kFlakyRetireOneIn)) {
        ++c.raw;
    }
    check_pmi(c, cfg);
}

inline void mode_switch(CounterState& c, const CounterConfig& cfg, bool mark) {
    if (cfg.marked_only && !mark) {
        return;
    }
    ++c.mode_switch_snapshot;
    switch (cfg.profile) {
        case CounterProfile::Exact:
            break;
        case CounterProfile::PpcMpc7441:
            ++c.raw;
            break;
        case CounterProfile::X86Flaky:
            if (flaky_draw(cfg.seed, c.raw, 1, kFlakySwitchOneIn)) {
                ++c.raw;
            }
            break;
    }
    check_pmi(c, cfg);
}

}  // namespace detail

inline CounterState on_retire(CounterState c, const CounterConfig& cfg, CpuMode mode, bool mark) {
    detail::retire(c, cfg, mode, mark);
    return c;
}

// Called once per user<->supervisor transition. `mark` is the MARK bit at the
// moment of the switch; the mode filter admits every switch since a switch
// always has one side in each mode.
inline CounterState on_mode_switch(CounterState c, const CounterConfig& cfg, bool mark) {
    detail::mode_switch(c, cfg, mark);
    return c;
}

// Throws UnusableCounter for X86Flaky.
uint64_t corrected(const CounterState& c, const CounterConfig& cfg);

// Event timestamp: corrected() for usable profiles; raw when the caller has
// explicitly opted into an unusable profile.
inline uint64_t timestamp(const CounterState& c, const CounterConfig& cfg) {
    return detail::pmi_count(c, cfg);
}

// Throws PmiInPast if target is below the current count. Arming at the
// current count fires immediately.
CounterState arm_pmi(CounterState c, const CounterConfig& cfg, uint64_t target);
bool pmi_fired(const CounterState& c);
CounterState clear_pmi(CounterState c);

// Rebuilds a counter from its profile-neutral checkpoint form.
CounterState counter_from_checkpoint(const CounterConfig& cfg, uint64_t count, uint64_t switches);

}  // namespace rvm
