#include "fedinject/wire.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "fedinject/errors.hpp"

namespace fedinject::fed {

namespace {

class ByteWriter {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

    std::uint8_t u8(const char* what) {
        need(1, what);
        return buf_[pos_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(v);
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (buf_.size() - pos_ < n) {
            throw ParseError(std::string("truncated update: ran out of bytes reading ") + what);
        }
    }
    const std::vector<std::uint8_t>& buf_;
    std::size_t pos_ = 0;
};

constexpr std::uint8_t kMaxRank = 8;

} // namespace

bool ModelUpdate::wire_equal(const ModelUpdate& o) const {
    if (round_index != o.round_index || client_id != o.client_id ||
        tensors.size() != o.tensors.size()) {
        return false;
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].first != o.tensors[i].first) return false;
        if (!tensors[i].second.bit_equal(o.tensors[i].second)) return false;
    }
    return true;
}

std::vector<std::uint8_t> serialize_update(const ModelUpdate& update) {
    ByteWriter w;
    w.bytes(kMagic, 4);
    w.u32(kFormatVersion);
    w.u32(update.round_index);
    w.u32(update.client_id);
    if (update.tensors.size() > std::numeric_limits<std::uint32_t>::max()) {
        throw DomainError("serialize_update: too many tensors");
    }
    w.u32(static_cast<std::uint32_t>(update.tensors.size()));
    for (const auto& [name, t] : update.tensors) {
        if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw DomainError("serialize_update: tensor name too long: " + name);
        }
        if (t.rank() > kMaxRank) {
            throw DomainError("serialize_update: tensor rank too large for " + name);
        }
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) w.f64(v);
    }
    return w.take();
}

ModelUpdate deserialize_update(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    const std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw ParseError("bad magic: not an update container");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kFormatVersion) {
        throw ParseError("unsupported format version " + std::to_string(version));
    }
    ModelUpdate u;
    u.round_index = r.u32("round index");
    u.client_id = r.u32("client id");
    const std::uint32_t count = r.u32("tensor count");
    u.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        std::string name = r.str(name_len, "tensor name");
        const std::uint8_t rank = r.u8("rank");
        if (rank > kMaxRank) {
            throw ParseError("tensor " + name + ": rank " + std::to_string(rank) +
                             " exceeds limit");
        }
        std::vector<std::size_t> shape(rank);
        std::uint64_t total = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            shape[d] = r.u32("dimension");
            total *= shape[d];
            if (total > (1ull << 32)) {
                throw ParseError("tensor " + name + ": element count overflows sanity bound");
            }
        }
        if (r.remaining() < total * 8) {
            throw ParseError("tensor " + name + ": payload truncated (need " +
                             std::to_string(total * 8) + " bytes, have " +
                             std::to_string(r.remaining()) + ")");
        }
        std::vector<double> data(total);
        for (std::uint64_t k = 0; k < total; ++k) data[k] = r.f64("payload");
        u.tensors.emplace_back(std::move(name), tensor::Tensor(std::move(shape), std::move(data)));
    }
    if (r.remaining() != 0) {
        throw ParseError("trailing bytes after the last tensor (" +
                         std::to_string(r.remaining()) + ")");
    }
    return u;
}

} // namespace fedinject::fed
