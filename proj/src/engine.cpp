#include "rvm/engine.h"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fmt/format.h>
#include <fstream>
#include <iterator>

namespace rvm {

namespace fs = std::filesystem;

std::string_view to_string(ExitReason r) {
    switch (r) {
        case ExitReason::Halted: return "halted";
        case ExitReason::Limit: return "limit";
        case ExitReason::Divergence: return "divergence";
    }
    return "?";
}

std::string Divergence::describe() const {
    std::string s = fmt::format("divergence at seq {}: {}", at_seq, message);
    if (expected) {
        s += fmt::format(" (expected {} at icount {}", to_string(expected->kind), expected->icount);
        if (expected->kind == EventKind::DeviceRead) {
            s += fmt::format(" {} = {}", register_name(expected->addr), expected->value);
        } else if (expected->kind == EventKind::IrqDelivery) {
            s += fmt::format(" line {}", expected->line);
        }
        s += ")";
    }
    s += fmt::format(" observed {} at icount {}", actual.what, actual.icount);
    if (actual.what == "read") s += fmt::format(" {}", register_name(actual.addr_or_line));
    s += fmt::format("; nearest checkpoint icount {}", nearest_checkpoint_icount);
    return s;
}

nlohmann::ordered_json Divergence::to_json() const {
    nlohmann::ordered_json j;
    j["at_seq"] = at_seq;
    j["expected"] = expected ? nlohmann::ordered_json::parse(expected->to_json_line()) : nlohmann::ordered_json();
    nlohmann::ordered_json a;
    a["icount"] = actual.icount;
    a["what"] = actual.what;
    a["addr_or_line"] = actual.addr_or_line;
    a["value"] = actual.value;
    if (actual.hash) a["hash"] = to_hex(*actual.hash);
    j["actual"] = a;
    j["nearest_checkpoint_icount"] = nearest_checkpoint_icount;
    j["message"] = message;
    return j;
}

std::vector<uint8_t> read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot open " + p.string());
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

constexpr uint32_t kPollEvery = 256;

// The live half of the system: machine + devices + host stimuli. With
// kRecord the counter runs and every nondeterministic observation is logged.
template <bool kRecord>
class LiveRun final : private RecordReadSink {
public:
    LiveRun(std::span<const uint8_t> kernel, std::shared_ptr<const DiskImage> disk, const StimulusScript& script,
            const RecordOptions& opts, TraceWriter* writer)
        : opts_(opts),
          script_(script),
          owned_clock_(opts.clock ? nullptr : std::make_unique<SteadyClock>()),
          clock_(opts.clock ? opts.clock : owned_clock_.get()),
          machine_(reset(kernel, opts.mem_size)),
          devices_(kRecord ? DeviceMode::Record : DeviceMode::Live, std::move(disk), clock_),
          writer_(writer),
          next_hash_at_(opts.checkpoint_interval) {
        if constexpr (kRecord) devices_.set_record_sink(this);
    }

    RunSummary run() {
        const auto t0 = std::chrono::steady_clock::now();
        RunSummary sum;
        uint32_t poll = 1;
        bool hashed_here = false;
        size_t tx_flushed = 0;
        const uint64_t max = opts_.max_instructions;
        const CounterConfig& cfg = opts_.counter;

        for (;;) {
            if (--poll == 0) {
                poll = kPollEvery;
                poll_host();
                if (opts_.echo_console) tx_flushed = echo(tx_flushed);
            }
            if constexpr (kRecord) {
                hashed_here = false;
                if (fresh_ && ts() >= next_hash_at_) {
                    log_state_hash();
                    hashed_here = true;
                    next_hash_at_ = (ts() / opts_.checkpoint_interval + 1) * opts_.checkpoint_interval;
                }
            }
            if (machine_.retired >= max) {
                sum.exit_reason = ExitReason::Limit;
                if constexpr (kRecord) {
                    if (!hashed_here) log_state_hash();
                }
                break;
            }
            if constexpr (kRecord) {
                const int line = deliverable_line(machine_);
                if (line >= 0) {
                    log(Event::irq(ts(), static_cast<uint32_t>(line)));
                    count_irq(static_cast<uint32_t>(line));
                }
            } else {
                const int line = deliverable_line(machine_);
                if (line >= 0) count_irq(static_cast<uint32_t>(line));
            }

            const CpuMode mode = machine_.status.mode;
            const bool mark = machine_.mark();
            const uint64_t switches = machine_.mode_switches;
            const uint64_t retired = machine_.retired;
            step(machine_, true, devices_);
            if (machine_.retired != retired) {
                if (mode == CpuMode::User) {
                    ++stats_.user_retired;
                } else {
                    ++stats_.supervisor_retired;
                }
                if constexpr (kRecord) {
                    detail::retire(counter_, cfg, mode, mark);
                    fresh_ = cfg.admits(mode, mark);
                }
            } else if constexpr (kRecord) {
                fresh_ = false;
            }
            if constexpr (kRecord) {
                if (machine_.mode_switches != switches) detail::mode_switch(counter_, cfg, mark);
            }
            if (machine_.halted) {
                sum.exit_reason = ExitReason::Halted;
                if constexpr (kRecord) {
                    log_state_hash();
                    log(Event::halt(ts()));
                }
                break;
            }
        }
        if (opts_.echo_console) echo(tx_flushed);

        if constexpr (kRecord) {
            writer_->close();
            sum.final_state_hash = last_hash_;
            sum.final_icount = ts();
        } else {
            sum.final_icount = machine_.retired;
        }
        sum.retired = machine_.retired;
        sum.event_count = seq_;
        sum.stats = stats_;
        sum.counter = counter_;
        sum.console_output = devices_.state().console_tx_sink;
        sum.wall_time_ms = elapsed_ms(t0);
        return sum;
    }

private:
    uint64_t ts() const { return timestamp(counter_, opts_.counter); }

    void count_irq(uint32_t line) {
        ++stats_.irq_deliveries;
        if (line == kIrqTimer) ++stats_.timer_irqs;
        if (line == kIrqConsole) ++stats_.console_irqs;
    }

    void poll_host() {
        const uint64_t now = clock_->now_ms();
        while (next_entry_ < script_.entries.size() && script_.entries[next_entry_].at_ms <= now) {
            const auto& payload = script_.entries[next_entry_].payload;
            devices_.inject_stimulus(payload);
            stats_.console_bytes_injected += payload.size();
            ++next_entry_;
        }
        if (opts_.interactive && opts_.interactive->has_data()) {
            const auto bytes = opts_.interactive->drain();
            devices_.inject_stimulus(bytes);
            stats_.console_bytes_injected += bytes.size();
        }
        devices_.poll_timer(now);
        machine_.pending_irqs |= devices_.take_raised_lines();
    }

    size_t echo(size_t from) {
        const auto& tx = devices_.state().console_tx_sink;
        if (tx.size() > from) {
            std::fwrite(tx.data() + from, 1, tx.size() - from, stdout);
            std::fflush(stdout);
        }
        return tx.size();
    }

    void recorded_read(uint32_t addr, uint32_t value) override {
        ++stats_.device_reads;
        log(Event::read(ts(), addr, value));
    }

    void log(Event e) {
        e.seq = ++seq_;
        writer_->append(e);
    }

    void log_state_hash() {
        const SerializedState s = serialize_pieces(machine_, counter_, opts_.counter, devices_.state());
        last_hash_ = s.digest();
        write_checkpoint(writer_->path(), ts(), s);
        log(Event::state_hash(ts(), last_hash_));
    }

    const RecordOptions& opts_;
    const StimulusScript& script_;
    std::unique_ptr<HostClock> owned_clock_;
    HostClock* clock_;
    MachineState machine_;
    Devices devices_;
    CounterState counter_;
    TraceWriter* writer_;
    uint64_t seq_ = 0;
    bool fresh_ = true;
    uint64_t next_hash_at_;
    size_t next_entry_ = 0;
    Digest last_hash_{};
    RunStats stats_;
};

}  // namespace

RunSummary record(std::span<const uint8_t> kernel_image, std::shared_ptr<const DiskImage> disk,
                  const StimulusScript& stimulus, const RecordOptions& opts, const fs::path& log_path) {
    opts.counter.validate();
    if (!opts.counter.usable() && !opts.allow_unusable_counter) {
        throw UnusableCounter(
            "counter profile x86-flaky cannot timestamp events; pass the unusable-counter override to record anyway");
    }
    if (opts.checkpoint_interval == 0) throw Error("checkpoint interval must be positive");
    if (!disk) disk = DiskImage::from_bytes({});

    TraceHeader header;
    header.mem_size = opts.mem_size;
    header.kernel_image_hash = Sha256::of(kernel_image);
    header.disk_image_hash = Sha256::of(disk->bytes);
    header.counter_config = opts.counter;
    header.unusable_counter_override = !opts.counter.usable();
    header.checkpoint_interval = opts.checkpoint_interval;
    header.created_at = utc_now();

    TraceWriter writer(log_path, header);
    LiveRun<true> run(kernel_image, std::move(disk), stimulus, opts, &writer);
    return run.run();
}

RunSummary emulate(std::span<const uint8_t> kernel_image, std::shared_ptr<const DiskImage> disk,
                   const StimulusScript& stimulus, const RecordOptions& opts) {
    if (!disk) disk = DiskImage::from_bytes({});
    LiveRun<false> run(kernel_image, std::move(disk), stimulus, opts, nullptr);
    return run.run();
}

// ---------------------------------------------------------------------------
// Replay

CounterConfig replay_counter_config(const TraceHeader& h) {
    CounterConfig cfg = h.counter_config;
    if (cfg.profile == CounterProfile::X86Flaky) {
        cfg.seed = detail::mix64(cfg.seed ^ 0x5245504C41590000ull);
    }
    return cfg;
}

Replayer::Replayer(std::shared_ptr<const TraceLog> log, std::vector<uint8_t> kernel_image,
                   std::shared_ptr<const DiskImage> disk, Options opts)
    : log_(std::move(log)),
      kernel_(std::move(kernel_image)),
      disk_(disk ? std::move(disk) : DiskImage::from_bytes({})),
      opts_(std::move(opts)),
      config_(replay_counter_config(log_->header)),
      devices_(DeviceMode::Replay, disk_) {
    const TraceHeader& h = log_->header;
    if (opts_.profile) config_.profile = *opts_.profile;
    if (Sha256::of(kernel_) != h.kernel_image_hash) {
        throw ImageMismatchError("kernel image does not match the log header (sha256 " +
                                 to_hex(Sha256::of(kernel_)) + " vs " + to_hex(h.kernel_image_hash) + ")");
    }
    if (Sha256::of(disk_->bytes) != h.disk_image_hash) {
        throw ImageMismatchError("disk image does not match the log header (sha256 " +
                                 to_hex(Sha256::of(disk_->bytes)) + " vs " + to_hex(h.disk_image_hash) + ")");
    }
    if (!config_.usable() && !h.unusable_counter_override) {
        throw UnusableCounter("log uses an unusable counter profile without the override flag");
    }
    config_.validate();
    if (!opts_.log_path.empty()) {
        checkpoints_ = CheckpointIndex(opts_.log_path, *log_);
    }
    devices_.set_replay_source(this);
    reset_to_start();
}

Replayer::~Replayer() = default;

void Replayer::reset_to_start() {
    machine_ = reset(kernel_, log_->header.mem_size);
    counter_ = CounterState{};
    devices_.state() = DeviceState{};
    devices_.state().disk.image = disk_;
    cursor_ = 0;
    armed_for_ = SIZE_MAX;
    fresh_ = true;
    irq_retries_ = 0;
    position_ = {};
    stats_ = {};
}

bool Replayer::finished() const { return cursor_ >= log_->events.size(); }

Digest Replayer::state_hash() const { return rvm::state_hash(machine_, counter_, config_, devices_.state()); }

uint64_t Replayer::nearest_checkpoint_icount() const {
    const uint64_t now = icount();
    uint64_t best = 0;
    for (const auto& e : log_->events) {
        if (e.kind == EventKind::StateHash && e.icount <= now) best = e.icount;
    }
    return checkpoints_.size() ? best : 0;
}

void Replayer::diverge(const std::string& message, Divergence::Observed actual) {
    Divergence d;
    d.message = message;
    if (cursor_ < log_->events.size()) {
        d.expected = log_->events[cursor_];
        d.at_seq = log_->events[cursor_].seq;
    } else {
        d.at_seq = log_->events.empty() ? 0 : log_->events.back().seq + 1;
    }
    d.actual = std::move(actual);
    d.nearest_checkpoint_icount = nearest_checkpoint_icount();
    throw DivergenceError(std::move(d));
}

bool Replayer::is_final_hash(size_t index) const {
    const auto& ev = log_->events;
    return index + 1 < ev.size() && ev[index].kind == EventKind::StateHash &&
           ev[index + 1].kind == EventKind::Halt;
}

void Replayer::emit_shadow(Event e) {
    if (!opts_.shadow) return;
    e.seq = ++shadow_seq_;
    opts_.shadow->append(e);
}

void Replayer::arm_for_cursor() {
    if (armed_for_ == cursor_) return;
    const Event& e = log_->events[cursor_];
    if (icount() > e.icount) {
        diverge("logged moment already passed", {icount(), "count"});
    }
    counter_ = arm_pmi(counter_, config_, e.icount);
    armed_for_ = cursor_;
}

void Replayer::verify_state_hash(const Event& e) {
    const Digest d = state_hash();
    if (d != e.hash) {
        Divergence::Observed o{icount(), "state-hash"};
        o.hash = d;
        diverge("state hash mismatch", o);
    }
    emit_shadow(Event::state_hash(icount(), d));
}

Replayer::Next Replayer::prepare() {
    const auto& events = log_->events;
    for (;;) {
        if (cursor_ >= events.size()) {
            return machine_.halted ? Next::Halted : Next::End;
        }
        const Event& e = events[cursor_];
        switch (e.kind) {
            case EventKind::DeviceRead:
                if (machine_.halted) diverge("machine halted before a logged device read", {icount(), "halt"});
                return Next::Execute;

            case EventKind::Halt:
                if (!machine_.halted) return Next::Execute;
                if (icount() != e.icount) diverge("machine halted at a different count", {icount(), "halt"});
                emit_shadow(Event::halt(icount()));
                ++cursor_;
                continue;

            case EventKind::StateHash:
                if (is_final_hash(cursor_)) {
                    if (!machine_.halted) return Next::Execute;
                    if (icount() != e.icount) diverge("machine halted at a different count", {icount(), "halt"});
                    verify_state_hash(e);
                    ++cursor_;
                    continue;
                }
                [[fallthrough]];
            case EventKind::IrqDelivery:
                arm_for_cursor();
                if (!pmi_fired(counter_)) {
                    if (machine_.halted) diverge("machine halted before a logged event", {icount(), "halt"});
                    return Next::Execute;
                }
                if (!fresh_ && irq_retries_ == 0) {
                    diverge("count reached away from a retire boundary", {icount(), "count"});
                }
                if (e.kind == EventKind::StateHash) {
                    verify_state_hash(e);
                    counter_ = clear_pmi(counter_);
                    armed_for_ = SIZE_MAX;
                    ++cursor_;
                    continue;
                }
                if (!machine_.status.ie) {
                    // Well-formed logs never reach this: record logs the
                    // actual delivery moment.
                    if (++irq_retries_ > kMaxIrqRetries) {
                        diverge("interrupt could not be delivered: interrupts stayed disabled", {icount(), "irq"});
                    }
                    return Next::Execute;
                }
                return Next::Deliver;
        }
    }
}

StepInfo Replayer::advance() {
    const Next next = prepare();
    StepInfo info;
    info.mode = machine_.status.mode;
    info.pc = machine_.pc;
    info.from = position_;
    if (next == Next::Halted || next == Next::End) {
        return info;
    }
    info.stepped = true;
    const bool mark = machine_.mark();
    const uint64_t switches = machine_.mode_switches;

    if (next == Next::Deliver) {
        const Event& e = log_->events[cursor_];
        machine_.pending_irqs |= static_cast<uint16_t>(1u << e.line);
        step(machine_, true, devices_);
        if (machine_.mode_switches != switches) detail::mode_switch(counter_, config_, mark);
        emit_shadow(Event::irq(icount(), e.line));
        ++stats_.irq_deliveries;
        if (e.line == kIrqTimer) ++stats_.timer_irqs;
        if (e.line == kIrqConsole) ++stats_.console_irqs;
        ++cursor_;
        counter_ = clear_pmi(counter_);
        armed_for_ = SIZE_MAX;
        irq_retries_ = 0;
        fresh_ = false;
        ++position_.substep;
        info.delivered = true;
        info.line = e.line;
        return info;
    }

    if (machine_.pending_irqs != 0) {
        throw std::logic_error("external interrupt pending outside event application during replay");
    }
    const uint64_t retired = machine_.retired;
    step(machine_, false, devices_);
    if (machine_.retired != retired) {
        info.retired = true;
        if (info.mode == CpuMode::User) {
            ++stats_.user_retired;
        } else {
            ++stats_.supervisor_retired;
        }
        detail::retire(counter_, config_, info.mode, mark);
        fresh_ = config_.admits(info.mode, mark);
        position_ = {machine_.retired, 0};
    } else {
        fresh_ = false;
        ++position_.substep;
    }
    if (machine_.mode_switches != switches) detail::mode_switch(counter_, config_, mark);

    if (cursor_ < log_->events.size()) {
        const Event& e = log_->events[cursor_];
        const bool timed = e.kind == EventKind::IrqDelivery ||
                           (e.kind == EventKind::StateHash && !is_final_hash(cursor_));
        if (icount() > e.icount && !(timed && pmi_fired(counter_))) {
            diverge("execution passed a logged event", {icount(), "count"});
        }
    }
    return info;
}

uint32_t Replayer::replay_read(uint32_t addr) {
    const auto& events = log_->events;
    const uint64_t now = icount();
    if (cursor_ >= events.size() || events[cursor_].kind != EventKind::DeviceRead || events[cursor_].addr != addr ||
        events[cursor_].icount != now) {
        diverge("guest device read does not match the log", {now, "read", addr, 0});
    }
    const uint32_t v = events[cursor_].value;
    emit_shadow(Event::read(now, addr, v));
    ++stats_.device_reads;
    ++cursor_;
    return v;
}

bool Replayer::run_until(uint64_t target) {
    if (icount() > target) {
        throw Error(fmt::format("run_until target {} is behind the current count {}", target, icount()));
    }
    while (!(icount() == target && fresh_)) {
        const StepInfo s = advance();
        if (!s.stepped) return false;
    }
    return true;
}

void Replayer::run_to_end() {
    while (advance().stepped) {
    }
}

void Replayer::restore(const Checkpoint& ckpt) {
    if (ckpt.is_reset()) {
        reset_to_start();
        return;
    }
    RestoredState r = deserialize_state(ckpt.bytes, config_);
    machine_ = std::move(r.machine);
    counter_ = r.counter;
    DeviceState ds;
    ds.disk.image = disk_;
    ds.disk.overlay = std::move(r.overlay);
    ds.disk.sector_reg = r.disk_sector;
    ds.disk.buf_addr_reg = r.disk_buf;
    ds.disk.status_reg = r.disk_status;
    devices_.state() = std::move(ds);
    cursor_ = ckpt.log_cursor;
    armed_for_ = SIZE_MAX;
    fresh_ = true;
    irq_retries_ = 0;
    position_ = {machine_.retired, 0};
    stats_ = {};
}

void Replayer::seek(uint64_t target_icount) {
    if (target_icount > log_->final_icount()) {
        throw Error(fmt::format("seek target {} is past the end of the log ({})", target_icount,
                                log_->final_icount()));
    }
    restore(checkpoints_.load(target_icount));
    if (!run_until(target_icount)) {
        throw Error(fmt::format("replay ended before reaching icount {}", target_icount));
    }
}

void Replayer::seek_position(ReplayPosition pos) {
    restore(checkpoints_.load_by_retired(pos.retired));
    if (position_ > pos) {
        restore(Checkpoint{});
    }
    while (position_ < pos) {
        if (!advance().stepped) {
            throw Error(fmt::format("replay ended before position {}:{}", pos.retired, pos.substep));
        }
    }
    if (position_ != pos) {
        throw Error(fmt::format("position {}:{} is not an instruction boundary", pos.retired, pos.substep));
    }
}

Replayer::Snapshot Replayer::snapshot() const {
    return Snapshot{machine_, counter_, devices_.state(), cursor_, armed_for_, fresh_, irq_retries_, position_, stats_};
}

void Replayer::restore(const Snapshot& s) {
    machine_ = s.machine;
    counter_ = s.counter;
    devices_.state() = s.devices;
    cursor_ = s.cursor;
    armed_for_ = s.armed_for;
    fresh_ = s.fresh;
    irq_retries_ = s.irq_retries;
    position_ = s.position;
    stats_ = s.stats;
}

RunSummary replay(const fs::path& log_path, std::vector<uint8_t> kernel_image, std::shared_ptr<const DiskImage> disk,
                  const ReplayOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    auto log = std::make_shared<const TraceLog>(read_trace(log_path));
    if (!log->complete()) {
        throw CorruptLogError("log is incomplete: it ends without a Halt or final StateHash");
    }
    std::unique_ptr<TraceWriter> shadow;
    if (!opts.shadow_log.empty()) {
        shadow = std::make_unique<TraceWriter>(opts.shadow_log, log->header);
    }
    Replayer r(log, std::move(kernel_image), std::move(disk), Replayer::Options{log_path, shadow.get(), opts.profile});

    RunSummary sum;
    try {
        r.run_to_end();
        sum.exit_reason = r.machine().halted ? ExitReason::Halted : ExitReason::Limit;
    } catch (DivergenceError& e) {
        sum.exit_reason = ExitReason::Divergence;
        sum.divergence = e.divergence();
    }
    if (shadow) shadow->close();
    sum.final_icount = r.icount();
    sum.retired = r.machine().retired;
    sum.final_state_hash = r.state_hash();
    sum.event_count = r.cursor();
    sum.stats = r.stats();
    sum.counter = r.counter();
    sum.console_output = r.devices().state().console_tx_sink;
    sum.wall_time_ms = elapsed_ms(t0);
    return sum;
}

}  // namespace rvm
