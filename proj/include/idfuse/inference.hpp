#pragma once
// Dual-stream DDIM sampling. A text-only stream runs the frozen base model on
// the prompt and donates its self-attention keys/values at every step; the
// identity stream consumes them through mixed (or mutual) attention and merges
// text and image cross-attention. Guidance applies to the identity stream only.

#include <cstdint>
#include <string>
#include <vector>

#include "idfuse/encoders.hpp"
#include "idfuse/unet.hpp"

namespace idfuse {

enum class GenerationVariant {
    mixed_attention,
    no_mixed_attention,
    mutual_attention,
    text_only,  // identity disabled: the base model on the prompt alone
};

const char* to_string(GenerationVariant v);
GenerationVariant generation_variant_from_string(const std::string& s);

struct GenerationRequest {
    std::string prompt;
    std::string negative_prompt;
    std::vector<Image> id_images;
    std::vector<std::string> id_sources;  // optional labels, one per id image
    std::vector<double> mix_weights;      // empty: stack the identities
    StyleAlign style = StyleAlign::off;
    std::uint64_t seed = 0;
    int steps = 30;
    double guidance_scale = 5.0;
    GenerationVariant variant = GenerationVariant::mixed_attention;
    bool merge_cross_attention = true;
    // Skips the text stream. Only valid when nothing consumes its keys/values.
    bool run_text_stream = true;
};

void validate(const GenerationRequest& r);

/// Everything generate() reads besides the request.
struct GenerationModel {
    const UNet& unet;
    const Encoders& encoders;
    MapperWeights mappers;
    std::size_t latent_factor = 2;
    std::string config_digest;
    std::string train_mode = "identity_enhanced";  // how the adapters were trained, for provenance
};

struct StepRecord {
    int t = 0, t_prev = 0;
    std::size_t captures = 0;  // capture sets consumed by the identity stream at this step
};

struct Provenance {
    std::uint64_t seed = 0;
    std::string config_digest;
    std::string variant;
    std::string train_mode;
    std::string style;
    bool merge_cross_attention = false;
    double guidance_scale = 0;
    std::string guidance_scope = "identity_stream";
    bool text_stream_ran = false;
    std::size_t identity_tokens = 0;
    std::vector<std::string> source_ids;
    std::vector<double> mix_weights;
    std::vector<std::size_t> site_tokens;
    std::vector<StepRecord> steps;
    // Branch predictions of the final step, and their guided combination.
    Matrix<float> eps_cond, eps_uncond, eps_guided;
};

std::string to_json(const Provenance& p);
Provenance provenance_from_json(const std::string& text);

struct DualStreamState {
    Latent z_id, z_text;
    KVSet captures;  // overwritten every step
};

/// One text-stream step: plain self-attention, text cross-attention on c_t,
/// no identity context. Returns the per-site K/V and writes the stream's own
/// noise prediction to eps_text when given.
KVSet capture_text_stream_kv(const UNet& unet, const Latent& z_text, int t, const Matrix<float>& c_t,
                             Latent* eps_text = nullptr);

/// Conditional identity-stream prediction for the request's variant.
Latent denoise_identity_stream(const UNet& unet, const Latent& z_id, int t, const Matrix<float>& c_id,
                               const Matrix<float>& c_t, const KVSet* captures, const GenerationRequest& req,
                               std::vector<StyleProbe>* probe = nullptr);

/// uncond + scale (cond - uncond).
Latent classifier_free_guidance(const Latent& cond, const Latent& uncond, double scale);
Matrix<float> classifier_free_guidance(const Matrix<float>& cond, const Matrix<float>& uncond, double scale);

/// Identity condition for the request: stacked, or interpolated when mix weights are given.
IdentityEmbedding request_identity(const GenerationRequest& r, const GenerationModel& m);

struct GenerationResult {
    Image image;
    Latent latent;
    Provenance provenance;
};

GenerationResult generate(const GenerationRequest& r, const GenerationModel& m);

}  // namespace idfuse
