#pragma once
// Toy latent-diffusion U-Net. Every attention level holds a transformer unit:
// self-attention (optionally mixed with or replaced by injected text-stream
// keys/values) followed by cross-attention with an image branch (trainable
// K'/V') and a text branch (frozen K/V) whose outputs are summed.
//
// Output parametrization: the network body F is read as the prior mean of a
// Gaussian over clean latents with per-element std `prior_std`, and the noise
// prediction is the posterior-mean estimate
//     eps_hat = c(t) * (z_t - sqrt(ab_t) * F),  c(t) = sqrt(1-ab_t) / (ab_t s^2 + 1 - ab_t).
// With F = 0 this is the Wiener denoiser of N(0, s^2); the adapters only have
// to move F toward the identity's appearance.

#include <cstdint>
#include <string>
#include <vector>

#include "idfuse/attention.hpp"
#include "idfuse/diffusion.hpp"
#include "idfuse/graph.hpp"
#include "idfuse/identity.hpp"
#include "idfuse/params.hpp"

namespace idfuse {

struct UNetConfig {
    std::size_t latent_size = 16;
    std::size_t latent_channels = 4;
    std::size_t base_channels = 32;
    std::vector<std::size_t> channel_multipliers{1, 2};
    std::vector<std::size_t> attention_resolutions{16, 8};  // grid sizes that carry a transformer unit
    std::size_t d_model = 64;                               // cross-attention context width
    std::size_t heads = 2;
    std::size_t groups = 8;
    double prior_std = 0.3;

    std::size_t time_embed_dim() const { return base_channels * 4; }
    bool operator==(const UNetConfig&) const = default;
};

void validate(const UNetConfig& cfg);

/// Fresh weights: frozen base (uniform +-1/sqrt(fan_in), N(0,1) positional
/// tables), image K'/V' copied from the text K/V, mappers per init_mapper.
ParamStore init_model(const UNetConfig& cfg, std::size_t clip_dim, std::size_t face_dim, std::uint64_t seed);

MapperWeights mappers_from(const ParamStore& params);

inline const std::string kClipMapperGroup = "clip_mapper";
inline const std::string kFaceMapperGroup = "face_mapper";
inline const std::string kImageCrossGroup = "image_cross_attention";
inline const std::string kBaseGroup = "unet";

enum class SelfAttentionVariant { self, mixed, mutual };

const char* to_string(SelfAttentionVariant v);

/// Keys and values of one self-attention site, [tokens x channels].
struct KV {
    Matrix<float> k, v;
};
using KVSet = std::vector<KV>;  // indexed by self-attention site

/// Aligned identity keys/values next to the text keys/values at a mixed site.
struct StyleProbe {
    std::size_t site = 0;
    Matrix<float> k_id, v_id, k_t, v_t;
};

struct AttentionHooks {
    SelfAttentionVariant variant = SelfAttentionVariant::self;
    const KVSet* inject = nullptr;  // required by mixed / mutual
    KVSet* capture = nullptr;       // receives this pass's own K/V per site
    StyleAlign self_style = StyleAlign::off;
    StyleAlign cross_style = StyleAlign::off;
    std::vector<StyleProbe>* probe = nullptr;
};

struct ConditionBundle {
    Matrix<float> c_id;                // empty when absent
    Matrix<float> c_t;                 // empty when absent
    bool text_cross_attention = true;  // false zeroes the text unit's output
};

class UNet {
public:
    using Id = Graph<float>::Id;

    UNet(UNetConfig cfg, const ParamStore& params, const NoiseSchedule& sched);

    const UNetConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return sched_; }
    const ParamStore& params() const { return params_; }

    /// Predicted noise for z_t at timestep t.
    Latent forward(const Latent& z_t, int t, const ConditionBundle& cond, const AttentionHooks& hooks = {}) const;

    /// Builds the body F on g and returns its node. c_id / c_t are graph nodes
    /// or Graph::none. Gradient buffers in `grads` (if any) are bound to the
    /// matching parameters.
    Id build(Graph<float>& g, const Latent& z_t, int t, Id c_id, Id c_t, bool text_active,
             const AttentionHooks& hooks, GradStore* grads) const;

    /// eps_hat from the body output.
    Latent epsilon(const Latent& z_t, const Matrix<float>& body, int t) const;
    /// d eps_hat / d F (a scalar per timestep).
    double body_gain(int t) const;

    std::size_t self_attention_sites() const { return site_tokens_.size(); }
    /// Spatial token count of each self-attention site, in site order.
    const std::vector<std::size_t>& self_attention_tokens() const { return site_tokens_; }

private:
    struct Ctx;
    Id param(Ctx& c, const std::string& name) const;
    Id linear(Ctx& c, Id x, const std::string& prefix, bool bias) const;
    Id resblock(Ctx& c, Id x, Id temb, std::size_t h, std::size_t w, const std::string& prefix) const;
    Id transformer(Ctx& c, Id x, std::size_t h, std::size_t w, const std::string& prefix) const;
    double skip_coeff(int t) const;

    UNetConfig cfg_;
    const ParamStore& params_;
    const NoiseSchedule& sched_;
    std::vector<std::size_t> site_tokens_;
};

}  // namespace idfuse
