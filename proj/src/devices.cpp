#include "rvm/devices.h"

#include "rvm/errors.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <iterator>
#include <sstream>

namespace rvm {

std::string_view register_name(uint32_t addr) {
    switch (addr) {
        case reg::kConsoleStatus: return "CONSOLE_STATUS";
        case reg::kConsoleRx: return "CONSOLE_RX";
        case reg::kConsoleTx: return "CONSOLE_TX";
        case reg::kTimerNow: return "TIMER_NOW";
        case reg::kTimerCmp: return "TIMER_CMP";
        case reg::kDiskSector: return "DISK_SECTOR";
        case reg::kDiskBuf: return "DISK_BUF";
        case reg::kDiskCmd: return "DISK_CMD";
        case reg::kDiskStatus: return "DISK_STATUS";
        default: return "?";
    }
}

SteadyClock::SteadyClock()
    : start_ns_(std::chrono::duration_cast<std::chrono::nanoseconds>(
                    std::chrono::steady_clock::now().time_since_epoch())
                    .count()) {}

uint64_t SteadyClock::now_ms() {
    const int64_t now = std::chrono::duration_cast<std::chrono::nanoseconds>(
                            std::chrono::steady_clock::now().time_since_epoch())
                            .count();
    return static_cast<uint64_t>((now - start_ns_) / 1'000'000);
}

// ---------------------------------------------------------------------------
// Stimulus scripts

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace

StimulusScript StimulusScript::parse(std::string_view text) {
    StimulusScript script;
    int line_no = 0;
    uint64_t last_ms = 0;
    while (!text.empty()) {
        const size_t nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const size_t hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) continue;

        const auto tok = split_ws(line);
        auto fail = [&](const std::string& why) {
            throw Error(fmt::format("stimulus line {}: {}", line_no, why));
        };
        if (tok.size() < 4 || tok[0] != "AT" || tok[2] != "CONSOLE") {
            fail("expected 'AT <ms> CONSOLE <hex-bytes...>'");
        }
        StimulusEntry e;
        auto [p, ec] = std::from_chars(tok[1].data(), tok[1].data() + tok[1].size(), e.at_ms);
        if (ec != std::errc{} || p != tok[1].data() + tok[1].size()) fail("bad time '" + std::string(tok[1]) + "'");
        if (e.at_ms < last_ms) fail("times must be nondecreasing");
        last_ms = e.at_ms;
        for (size_t i = 3; i < tok.size(); ++i) {
            uint32_t byte = 0;
            auto [q, ec2] = std::from_chars(tok[i].data(), tok[i].data() + tok[i].size(), byte, 16);
            if (ec2 != std::errc{} || q != tok[i].data() + tok[i].size() || byte > 0xFF) {
                fail("bad hex byte '" + std::string(tok[i]) + "'");
            }
            e.payload.push_back(static_cast<uint8_t>(byte));
        }
        script.entries.push_back(std::move(e));
    }
    return script;
}

StimulusScript StimulusScript::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open stimulus script " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string StimulusScript::to_text() const {
    std::string out;
    for (const auto& e : entries) {
        out += fmt::format("AT {} CONSOLE", e.at_ms);
        for (uint8_t b : e.payload) out += fmt::format(" {:02x}", b);
        out += '\n';
    }
    return out;
}

size_t StimulusScript::byte_count() const {
    size_t n = 0;
    for (const auto& e : entries) n += e.payload.size();
    return n;
}

// ---------------------------------------------------------------------------
// Disk

std::shared_ptr<const DiskImage> DiskImage::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open disk image " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(std::move(bytes));
}

std::shared_ptr<const DiskImage> DiskImage::from_bytes(std::vector<uint8_t> bytes) {
    auto d = std::make_shared<DiskImage>();
    d->bytes = std::move(bytes);
    return d;
}

Sector DiskState::read_sector(uint32_t index) const {
    if (auto it = overlay.find(index); it != overlay.end()) {
        return it->second;
    }
    Sector s{};
    if (image) {
        const size_t off = size_t{index} * kSectorSize;
        if (off < image->bytes.size()) {
            const size_t n = std::min<size_t>(kSectorSize, image->bytes.size() - off);
            std::memcpy(s.data(), image->bytes.data() + off, n);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Devices

Devices::Devices(DeviceMode mode, std::shared_ptr<const DiskImage> disk, HostClock* clock)
    : mode_(mode), clock_(clock) {
    state_.disk.image = disk ? std::move(disk) : DiskImage::from_bytes({});
}

uint32_t Devices::live_read(uint32_t addr) {
    switch (addr) {
        case reg::kConsoleStatus:
            return state_.console_rx_queue.empty() ? 0u : 1u;
        case reg::kConsoleRx: {
            if (state_.console_rx_queue.empty()) return 0;
            const uint8_t b = state_.console_rx_queue.front();
            state_.console_rx_queue.pop_front();
            return b;
        }
        case reg::kTimerNow:
            return clock_ ? static_cast<uint32_t>(clock_->now_ms()) : 0u;
        default:
            return 0;
    }
}

uint32_t Devices::mmio_read(uint32_t addr) {
    if (is_nondeterministic(addr)) {
        if (mode_ == DeviceMode::Replay) {
            if (!source_) throw ReplayModeError("replay device read without an event source");
            return source_->replay_read(addr);
        }
        const uint32_t v = live_read(addr);
        if (mode_ == DeviceMode::Record && sink_) {
            sink_->recorded_read(addr, v);
        }
        return v;
    }
    switch (addr) {
        case reg::kDiskSector: return state_.disk.sector_reg;
        case reg::kDiskBuf: return state_.disk.buf_addr_reg;
        case reg::kDiskStatus: return state_.disk.status_reg;
        default: return 0;
    }
}

void Devices::mmio_write(uint32_t addr, uint32_t value, std::span<uint8_t> ram) {
    DiskState& disk = state_.disk;
    switch (addr) {
        case reg::kConsoleTx:
            state_.console_tx_sink.push_back(static_cast<uint8_t>(value));
            break;
        case reg::kTimerCmp:
            // Replay: inert, the logged IrqDelivery stands in for expiry.
            if (mode_ != DeviceMode::Replay) {
                if (value == 0) {
                    state_.timer_deadline_ms.reset();
                } else {
                    state_.timer_deadline_ms = (clock_ ? clock_->now_ms() : 0) + value;
                }
            }
            break;
        case reg::kDiskSector:
            disk.sector_reg = value;
            break;
        case reg::kDiskBuf:
            disk.buf_addr_reg = value;
            break;
        case reg::kDiskCmd: {
            const bool dma_ok = size_t{disk.buf_addr_reg} + kSectorSize <= ram.size();
            const bool sector_ok = disk.sector_reg < disk.image->sector_count();
            if ((value != kDiskCmdRead && value != kDiskCmdWrite) || !dma_ok || !sector_ok) {
                disk.status_reg = 1;
                break;
            }
            if (value == kDiskCmdRead) {
                const Sector s = disk.read_sector(disk.sector_reg);
                std::memcpy(ram.data() + disk.buf_addr_reg, s.data(), kSectorSize);
            } else {
                Sector s;
                std::memcpy(s.data(), ram.data() + disk.buf_addr_reg, kSectorSize);
                disk.overlay[disk.sector_reg] = s;
            }
            disk.status_reg = 0;
            break;
        }
        default:
            break;
    }
}

void Devices::inject_stimulus(std::span<const uint8_t> bytes) {
    if (mode_ == DeviceMode::Replay) {
        throw ReplayModeError("stimulus injection during replay; replay input comes only from the log");
    }
    if (bytes.empty()) return;
    state_.console_rx_queue.insert(state_.console_rx_queue.end(), bytes.begin(), bytes.end());
    raised_ |= 1u << kIrqConsole;
}

void Devices::poll_timer(uint64_t now_ms) {
    if (mode_ == DeviceMode::Replay) return;
    if (state_.timer_deadline_ms && now_ms >= *state_.timer_deadline_ms) {
        state_.timer_deadline_ms.reset();
        raised_ |= 1u << kIrqTimer;
    }
}

// ---------------------------------------------------------------------------

void StimulusQueue::push(std::span<const uint8_t> bytes) {
    std::lock_guard lock(mu_);
    bytes_.insert(bytes_.end(), bytes.begin(), bytes.end());
    ready_.store(true, std::memory_order_release);
}

std::vector<uint8_t> StimulusQueue::drain() {
    std::lock_guard lock(mu_);
    std::vector<uint8_t> out;
    out.swap(bytes_);
    ready_.store(false, std::memory_order_release);
    return out;
}

}  // namespace rvm
