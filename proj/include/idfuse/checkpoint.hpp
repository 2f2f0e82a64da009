#pragma once
// Checkpoint file: 8-byte magic, u32 format version, u64 header length, JSON
// header, then raw little-endian f32 tensors. The header carries the config
// snapshot, partition digests and a SHA-256 of the tensor payload; all three
// are checked on load.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idfuse/config.hpp"
#include "idfuse/params.hpp"
#include "idfuse/training.hpp"

namespace idfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBundle {
    RunConfig config;
    ParamStore params;
    std::optional<OptimizerState> optimizer;
    std::map<std::string, std::uint64_t> seeds;

    bool operator==(const CheckpointBundle&) const = default;
};

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointBundle& b);
/// Throws InputError on a malformed file or a digest mismatch.
CheckpointBundle deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& b);
CheckpointBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace idfuse
