#pragma once
// The encoder set shared by training, inference and evaluation.

#include <cstdint>
#include <string>

#include "idfuse/identity.hpp"
#include "idfuse/text.hpp"

namespace idfuse {

struct EncoderConfig {
    std::string backend = "stub";
    std::size_t clip_tokens = 16;
    std::size_t clip_dim = 32;
    std::size_t face_dim = 32;
    std::size_t align_size = 32;
    std::uint64_t clip_seed = 1234;
    std::uint64_t face_seed = 4321;
    std::uint64_t text_seed = 99;

    bool operator==(const EncoderConfig&) const = default;
};

struct Encoders {
    BackendPtr clip;
    BackendPtr face;
    HashTextEncoder text;       // prompt tokens for the U-Net context, width d_model
    HashTextEncoder clip_text;  // prompt embedding in the clip space, for CLIP-T
    std::size_t align_size;
};

Encoders make_encoders(const EncoderConfig& cfg, std::size_t d_model);

}  // namespace idfuse
