#pragma once

#include "rvm/perf_counter.h"

#include <random>
#include <vector>

namespace rvm::test {

// One counter stimulus: a retire in some mode, or a privilege switch.
struct CounterOp {
    bool is_switch = false;
    CpuMode mode = CpuMode::User;
    bool mark = false;
};

inline std::vector<CounterOp> random_ops(std::mt19937_64& rng, size_t n) {
    std::vector<CounterOp> ops;
    ops.reserve(n);
    CpuMode mode = rng() % 2 ? CpuMode::User : CpuMode::Supervisor;
    bool mark = rng() % 2;
    for (size_t i = 0; i < n; ++i) {
        if (rng() % 5 == 0) {
            mode = mode == CpuMode::User ? CpuMode::Supervisor : CpuMode::User;
            if (rng() % 3 == 0) mark = !mark;
            ops.push_back({true, mode, mark});
        } else {
            ops.push_back({false, mode, mark});
        }
    }
    return ops;
}

inline CounterConfig random_filters(std::mt19937_64& rng, CounterProfile p) {
    CounterConfig c;
    c.profile = p;
    switch (rng() % 3) {
        case 0: break;
        case 1: c.count_supervisor = false; break;
        case 2: c.count_user = false; break;
    }
    c.marked_only = rng() % 4 == 0;
    return c;
}

inline void apply(CounterState& c, const CounterConfig& cfg, const CounterOp& op) {
    if (op.is_switch) {
        detail::mode_switch(c, cfg, op.mark);
    } else {
        detail::retire(c, cfg, op.mode, op.mark);
    }
}

// Independent count of the retires the filters admit.
inline uint64_t admitted(const CounterConfig& cfg, const CounterOp& op) {
    if (op.is_switch) return 0;
    const bool mode_ok = op.mode == CpuMode::User ? cfg.count_user : cfg.count_supervisor;
    return mode_ok && (!cfg.marked_only || op.mark) ? 1 : 0;
}

}  // namespace rvm::test
