#include "idfuse/encoders.hpp"

namespace idfuse {

Encoders make_encoders(const EncoderConfig& cfg, std::size_t d_model) {
    return Encoders{
        make_backend(cfg.backend, {EncoderKind::clip_like, cfg.clip_tokens, cfg.clip_dim, cfg.clip_seed}),
        make_backend(cfg.backend, {EncoderKind::face_like, 1, cfg.face_dim, cfg.face_seed}),
        HashTextEncoder(d_model, cfg.text_seed),
        HashTextEncoder(cfg.clip_dim, cfg.text_seed + 1),
        cfg.align_size,
    };
}

}  // namespace idfuse
