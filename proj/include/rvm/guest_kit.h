#pragma once

#include "rvm/assembler.h"
#include "rvm/guest_abi.h"

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace rvm {

struct GuestTask {
    std::string name;
    std::string source;
};

struct GuestImage {
    std::vector<uint8_t> kernel_image;
    std::vector<uint8_t> disk_image;
    SymbolTable symbols;
    std::vector<uint32_t> entry_points;  // per task
};

inline constexpr uint32_t kDefaultDiskSectors = 16;

// Names every guest source can use: ABI addresses, descriptor offsets, task
// states, syscall numbers, MMIO offsets (IO_HI is the LUI half of the window).
std::map<std::string, int64_t> abi_symbols();

// Sector 0 holds the NUL-terminated banner; the rest is zero.
std::vector<uint8_t> make_disk(std::string_view banner, uint32_t sectors = kDefaultDiskSectors);

// Kernel at 0 with its trap handler at the ABI vector, task i at
// abi::task_base(i), task table filled in (state ready, pc at the task's
// `start` label or region base, r14 at the region top). Task sources also see
// TASK_ID, TASK_BASE_ADDR and STACK_TOP.
// Throws GuestLayoutError for more than abi::kMaxTasks tasks or code outside
// its region, AsmError for source errors.
GuestImage build_guest_image(std::string_view kernel_source, const std::vector<GuestTask>& tasks,
                             std::string_view disk_banner = "");

}  // namespace rvm
