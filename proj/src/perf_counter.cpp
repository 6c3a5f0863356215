#include "rvm/perf_counter.h"

#include <fmt/format.h>

namespace rvm {

std::string_view to_string(CounterProfile p) {
    switch (p) {
        case CounterProfile::Exact: return "exact";
        case CounterProfile::PpcMpc7441: return "ppc";
        case CounterProfile::X86Flaky: return "x86-flaky";
    }
    return "?";
}

std::optional<CounterProfile> profile_from_string(std::string_view s) {
    if (s == "exact") return CounterProfile::Exact;
    if (s == "ppc") return CounterProfile::PpcMpc7441;
    if (s == "x86-flaky") return CounterProfile::X86Flaky;
    return std::nullopt;
}

void CounterConfig::validate() const {
    if (!count_user && !count_supervisor) {
        throw Error("counter config must count user mode, supervisor mode, or both");
    }
}

uint64_t corrected(const CounterState& c, const CounterConfig& cfg) {
    switch (cfg.profile) {
        case CounterProfile::Exact:
            return c.raw;
        case CounterProfile::PpcMpc7441:
            return c.raw - c.mode_switch_snapshot;
        case CounterProfile::X86Flaky:
            break;
    }
    throw UnusableCounter("x86-flaky counter miscounts in non-compensable ways; no corrected count exists");
}

CounterState arm_pmi(CounterState c, const CounterConfig& cfg, uint64_t target) {
    const uint64_t now = detail::pmi_count(c, cfg);
    if (target < now) {
        throw PmiInPast(fmt::format("PMI target {} is behind the current count {}", target, now));
    }
    c.pmi_target = target;
    c.pmi_fired = target == now;
    return c;
}

bool pmi_fired(const CounterState& c) { return c.pmi_fired; }

CounterState clear_pmi(CounterState c) {
    c.pmi_target.reset();
    c.pmi_fired = false;
    return c;
}

CounterState counter_from_checkpoint(const CounterConfig& cfg, uint64_t count, uint64_t switches) {
    CounterState c;
    c.mode_switch_snapshot = switches;
    c.raw = cfg.profile == CounterProfile::PpcMpc7441 ? count + switches : count;
    return c;
}

}  // namespace rvm
