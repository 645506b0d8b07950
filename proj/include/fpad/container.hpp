#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fpad/error.hpp"

// On-disk container shared by corpus files and parameter snapshots:
//   [u64 LE header byte count][JSON header][blocks...][u32 LE CRC32]
// each block is [u64 LE byte count][little-endian f64 values]. The header
// carries a magic string plus a block table (name, dims) in payload order;
// the CRC covers every byte between the header and the checksum itself.
// Failure modes stay distinct: HeaderError (bad magic / malformed JSON),
// PayloadError (truncation, length mismatch), ChecksumError (CRC mismatch).

namespace fpad::container {

struct Block {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
};

struct File {
    nlohmann::json meta;  // caller-owned header fields (config echo etc.)
    std::vector<Block> blocks;
};

void write_file(const std::string& path, const std::string& magic, const File& file);
File read_file(const std::string& path, const std::string& expected_magic);

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n);

}  // namespace fpad::container
