#include "fpad/container.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace fpad::container {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

class Cursor {
public:
    Cursor(const std::string& buf, std::size_t pos) : buf_(buf), pos_(pos) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }

    template <class E>
    std::uint64_t take_u64(const char* what) {
        if (remaining() < 8) throw E(std::string("truncated file: ") + what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    template <class E>
    std::uint32_t take_u32(const char* what) {
        if (remaining() < 4) throw E(std::string("truncated file: ") + what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    double take_f64() {
        std::uint64_t bits = take_u64<PayloadError>("block data");
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }

    std::string take_bytes(std::size_t n, const char* what) {
        if (remaining() < n) throw HeaderError(std::string("truncated file: ") + what);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    const std::string& buf_;
    std::size_t pos_;
};

std::uint64_t block_count(const Block& b) {
    std::uint64_t n = 1;
    for (auto d : b.dims) n *= d;
    return n;
}

}  // namespace

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
    return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

void write_file(const std::string& path, const std::string& magic, const File& file) {
    nlohmann::ordered_json header;
    header["magic"] = magic;
    header["meta"] = file.meta;
    auto table = nlohmann::ordered_json::array();
    for (const auto& b : file.blocks) {
        if (block_count(b) != b.data.size())
            throw ContractViolation("container: block '" + b.name + "' dims do not match data size");
        table.push_back({{"name", b.name}, {"dims", b.dims}});
    }
    header["blocks"] = table;
    const std::string header_text = header.dump();

    std::string payload;
    for (const auto& b : file.blocks) {
        put_u64(payload, b.data.size() * 8);
        for (double d : b.data) put_f64(payload, d);
    }

    std::string out;
    put_u64(out, header_text.size());
    out += header_text;
    out += payload;
    put_u32(out, crc32_bytes(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path);
}

File read_file(const std::string& path, const std::string& expected_magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Cursor cur(buf, 0);
    const std::uint64_t header_len = cur.take_u64<HeaderError>("header length");
    if (header_len > cur.remaining()) throw HeaderError("truncated file: header body");
    const std::string header_text = cur.take_bytes(header_len, "header body");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw HeaderError(std::string("malformed header JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("magic") || !header["magic"].is_string())
        throw HeaderError("malformed header: missing magic");
    if (header["magic"].get<std::string>() != expected_magic)
        throw HeaderError("bad magic: expected \"" + expected_magic + "\", got \"" +
                          header["magic"].get<std::string>() + "\"");
    if (!header.contains("blocks") || !header["blocks"].is_array())
        throw HeaderError("malformed header: missing block table");

    File out;
    out.meta = header.value("meta", nlohmann::json::object());

    const std::size_t payload_start = cur.pos();
    for (const auto& entry : header["blocks"]) {
        if (!entry.is_object() || !entry.contains("name") || !entry.contains("dims"))
            throw HeaderError("malformed header: bad block table entry");
        Block b;
        b.name = entry["name"].get<std::string>();
        b.dims = entry["dims"].get<std::vector<std::uint64_t>>();
        const std::uint64_t byte_len = cur.take_u64<PayloadError>("block length prefix");
        if (byte_len % 8 != 0)
            throw PayloadError("block '" + b.name + "': byte length not a multiple of 8");
        if (byte_len / 8 != block_count(b))
            throw PayloadError("block '" + b.name + "': length prefix disagrees with header dims");
        if (cur.remaining() < byte_len) throw PayloadError("truncated file: block '" + b.name + "'");
        b.data.reserve(byte_len / 8);
        for (std::uint64_t i = 0; i < byte_len / 8; ++i) b.data.push_back(cur.take_f64());
        out.blocks.push_back(std::move(b));
    }

    const std::size_t payload_end = cur.pos();
    const std::uint32_t stored = cur.take_u32<PayloadError>("checksum");
    if (cur.remaining() != 0) throw PayloadError("trailing bytes after checksum");
    const std::uint32_t computed = crc32_bytes(
        reinterpret_cast<const unsigned char*>(buf.data()) + payload_start, payload_end - payload_start);
    if (stored != computed) throw ChecksumError("checksum mismatch");
    return out;
}

}  // namespace fpad::container
