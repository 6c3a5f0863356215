#include "rvm/guest_kit.h"

#include "rvm/devices.h"
#include "rvm/errors.h"

#include <cstring>
#include <fmt/format.h>

namespace rvm {

std::map<std::string, int64_t> abi_symbols() {
    using namespace abi;
    return {
        {"NUM_TASKS", kNumTasksAddr},
        {"CURRENT", kCurrentAddr},
        {"TASK_TABLE", kTaskTable},
        {"TASK_STRIDE", kTaskStride},
        {"MAX_TASKS", kMaxTasks},
        {"D_STATE", kDescState},
        {"D_PC", kDescPc},
        {"D_REGS", kDescRegs},
        {"ST_READY", kStateReady},
        {"ST_RUNNING", kStateRunning},
        {"ST_BLOCKED", kStateBlocked},
        {"ST_EXITED", kStateExited},
        {"TRAP_VECTOR", kTrapVector},
        {"KDATA", kKernelData},
        {"SHARED", kSharedWord},
        {"TASK_BASE", kTaskBase},
        {"TASK_REGION", kTaskRegion},
        {"SYS_YIELD", kSysYield},
        {"SYS_PUTCHAR", kSysPutchar},
        {"SYS_GETCHAR", kSysGetchar},
        {"SYS_GETTIME", kSysGettime},
        {"SYS_EXIT", kSysExit},
        {"SYS_DISK_READ", kSysDiskRead},
        {"SYS_DISK_WRITE", kSysDiskWrite},
        {"IO_HI", reg::kConsoleStatus >> 16},
        {"IO_CONSOLE_STATUS", reg::kConsoleStatus & 0xFFFF},
        {"IO_CONSOLE_RX", reg::kConsoleRx & 0xFFFF},
        {"IO_CONSOLE_TX", reg::kConsoleTx & 0xFFFF},
        {"IO_TIMER_NOW", reg::kTimerNow & 0xFFFF},
        {"IO_TIMER_CMP", reg::kTimerCmp & 0xFFFF},
        {"IO_DISK_SECTOR", reg::kDiskSector & 0xFFFF},
        {"IO_DISK_BUF", reg::kDiskBuf & 0xFFFF},
        {"IO_DISK_CMD", reg::kDiskCmd & 0xFFFF},
        {"IO_DISK_STATUS", reg::kDiskStatus & 0xFFFF},
    };
}

std::vector<uint8_t> make_disk(std::string_view banner, uint32_t sectors) {
    if (banner.size() >= kSectorSize) throw Error("disk banner must fit in one sector");
    std::vector<uint8_t> disk(size_t{sectors} * kSectorSize, 0);
    if (sectors == 0 && !banner.empty()) throw Error("disk needs at least one sector for the banner");
    std::memcpy(disk.data(), banner.data(), banner.size());
    return disk;
}

namespace {

void put_word(std::vector<uint8_t>& img, uint32_t addr, uint32_t v) {
    if (img.size() < addr + 4) img.resize(addr + 4, 0);
    for (int i = 0; i < 4; ++i) img[addr + i] = static_cast<uint8_t>(v >> (8 * i));
}

bool overlaps(const AsmProgram& p, uint32_t begin, uint32_t end) {
    for (const auto& [b, e] : p.extents) {
        if (b < end && begin < e) return true;
    }
    return false;
}

}  // namespace

GuestImage build_guest_image(std::string_view kernel_source, const std::vector<GuestTask>& tasks,
                             std::string_view disk_banner) {
    using namespace abi;
    if (tasks.size() > kMaxTasks) {
        throw GuestLayoutError(fmt::format("{} tasks requested; the guest ABI allows at most {}", tasks.size(), kMaxTasks));
    }

    AsmOptions kopts;
    kopts.predefined = abi_symbols();
    kopts.unit = "kernel";
    const AsmProgram kernel = assemble(kernel_source, kopts);
    const uint32_t table_end = descriptor(kMaxTasks);
    if (overlaps(kernel, kNumTasksAddr, table_end)) {
        throw GuestLayoutError(fmt::format("kernel code overlaps the task table at {:#x}..{:#x}", kNumTasksAddr, table_end));
    }
    if (overlaps(kernel, kTaskBase, UINT32_MAX)) {
        throw GuestLayoutError(fmt::format("kernel code extends into the task regions at {:#x}", kTaskBase));
    }
    if (!overlaps(kernel, kTrapVector, kTrapVector + 4)) {
        throw GuestLayoutError(fmt::format("kernel has no code at the trap vector {:#x}", kTrapVector));
    }

    GuestImage out;
    out.kernel_image = kernel.image;
    for (const auto& [name, addr] : kernel.symbols) out.symbols.add_symbol(name, addr);
    for (const auto& l : kernel.listing) out.symbols.add_listing(l);

    put_word(out.kernel_image, kNumTasksAddr, static_cast<uint32_t>(tasks.size()));
    for (uint32_t i = 0; i < tasks.size(); ++i) {
        const uint32_t base = task_base(i);
        AsmOptions topts;
        topts.predefined = abi_symbols();
        topts.predefined["TASK_ID"] = i;
        topts.predefined["TASK_BASE_ADDR"] = base;
        topts.predefined["STACK_TOP"] = base + kTaskRegion;
        topts.origin = base;
        topts.unit = tasks[i].name;
        AsmProgram prog;
        try {
            prog = assemble(tasks[i].source, topts);
        } catch (const AsmError& e) {
            throw AsmError(e.line(), tasks[i].name + ": " + e.what());
        }
        for (const auto& [b, e] : prog.extents) {
            if (b < base || e > base + kTaskRegion) {
                throw GuestLayoutError(fmt::format("task {} ({}) emits code at {:#x}, outside its region {:#x}..{:#x}", i,
                                                   tasks[i].name, b, base, base + kTaskRegion));
            }
        }
        if (out.kernel_image.size() < prog.image.size()) out.kernel_image.resize(prog.image.size(), 0);
        for (const auto& [b, e] : prog.extents) {
            std::memcpy(out.kernel_image.data() + b, prog.image.data() + b, e - b);
        }
        const auto start = prog.symbols.find("start");
        const uint32_t entry = start != prog.symbols.end() ? start->second : base;
        out.entry_points.push_back(entry);

        const uint32_t d = descriptor(i);
        put_word(out.kernel_image, d + kDescState, kStateReady);
        put_word(out.kernel_image, d + kDescPc, entry);
        put_word(out.kernel_image, d + kDescRegs + 14 * 4, base + kTaskRegion);

        for (const auto& [name, addr] : prog.symbols) out.symbols.add_symbol(tasks[i].name + ":" + name, addr);
        for (const auto& l : prog.listing) out.symbols.add_listing(l);
    }
    out.disk_image = make_disk(disk_banner);
    return out;
}

}  // namespace rvm
