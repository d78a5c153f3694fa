#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedinject/tensor.hpp"

namespace fedinject::fed {

inline constexpr char kMagic[4] = {'F', 'M', 'K', 'I'};
inline constexpr std::uint32_t kFormatVersion = 1;
/// Client id used for server-side checkpoints in the shared container.
inline constexpr std::uint32_t kServerId = 0xFFFFFFFFu;

/// One client's (or the server's) named parameter payload for a round.
/// `sample_count` is informational bookkeeping and intentionally not part of
/// the wire layout.
struct ModelUpdate {
    std::uint32_t round_index = 0;
    std::uint32_t client_id = 0;
    std::vector<std::pair<std::string, tensor::Tensor>> tensors;
    std::uint64_t sample_count = 0;

    /// Wire identity: everything the container carries.
    bool wire_equal(const ModelUpdate& o) const;
};

/// Container layout (all integers little-endian):
///   magic "FMKI" | version u32 | round u32 | client u32 | tensor count u32
///   per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
///               payload of 64-bit floats.
std::vector<std::uint8_t> serialize_update(const ModelUpdate& update);

/// Strict parse: rejects bad magic, unknown version, truncation, length or
/// shape inconsistencies and trailing bytes, each with a distinct ParseError.
ModelUpdate deserialize_update(const std::vector<std::uint8_t>& bytes);

} // namespace fedinject::fed
