#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace rvm {

using Digest = std::array<uint8_t, 32>;

std::string to_hex(const Digest& d);
std::optional<Digest> digest_from_hex(std::string_view hex);

// Incremental SHA-256 (OpenSSL EVP underneath).
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const uint8_t> bytes);
    Digest finish();

    static Digest of(std::span<const uint8_t> bytes);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

Digest sha256_file(const std::string& path);

}  // namespace rvm
