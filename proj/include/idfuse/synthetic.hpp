#pragma once
// Procedural face-like sprites. An identity fixes colors and geometry; a
// variant jitters pose (translation, rotation) and expression (mouth curve,
// eye openness).

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "idfuse/identity.hpp"
#include "idfuse/image.hpp"

namespace idfuse {

using Rgb = std::array<float, 3>;

struct IdentityParams {
    Rgb background{}, skin{}, hair{}, eyes{}, mouth{};
    double face_w = 10, face_h = 12;  // ellipse semi-axes, pixels at 32x32
    double hair_line = 0.4;           // hair covers v < -hair_line * face_h
    double eye_dx = 4, eye_dy = 3, eye_r = 1.6;
    double mouth_y = 4, mouth_w = 3.5, mouth_t = 0.9;
};

struct VariantParams {
    double tx = 0, ty = 0, rotation = 0;
    double mouth_curve = 0;
    double eye_open = 1;
};

struct SyntheticIdentitySpec {
    std::string identity_id;
    IdentityParams params;
};

IdentityParams sample_identity(std::mt19937_64& rng);
VariantParams sample_variant(std::mt19937_64& rng);

/// Renders at 2x2 supersampling and quantizes to 8 bits. Geometry is
/// expressed for a 32-pixel canvas and scaled to `size`.
Image render_sprite(const IdentityParams& id, const VariantParams& var, std::size_t size = 32);

std::string describe(const IdentityParams& id);

struct SyntheticIdentity {
    SyntheticIdentitySpec spec;
    std::vector<VariantParams> variants;
    std::vector<Image> images;
    std::string caption;
};

/// Indices into Dataset::identities and their variant lists.
struct TrainingPair {
    std::size_t identity = 0;
    std::size_t id_variant = 0;
    std::size_t target_variant = 0;
};

struct Dataset {
    std::uint64_t seed = 0;
    int attempt = 0;  // regeneration attempts consumed
    std::size_t image_size = 32;
    std::vector<SyntheticIdentity> identities;
    std::vector<TrainingPair> pairs;

    const Image& id_image(const TrainingPair& p) const { return identities[p.identity].images[p.id_variant]; }
    const Image& target_image(const TrainingPair& p) const { return identities[p.identity].images[p.target_variant]; }
    const std::string& caption(const TrainingPair& p) const { return identities[p.identity].caption; }
};

/// All ordered (id, target) variant pairs within each identity.
std::vector<TrainingPair> enumerate_pairs(const std::vector<SyntheticIdentity>& identities);

struct DatasetOptions {
    std::size_t n_identities = 8;
    std::size_t variants = 4;
    std::uint64_t seed = 0;
    std::size_t image_size = 32;
    std::size_t align_size = 32;
    double max_cross_cosine = 0.9;
    int max_retries = 5;
};

/// Regenerates with a derived seed while any cross-identity face-embedding
/// cosine reaches max_cross_cosine; throws GenerationError after max_retries.
Dataset generate_synthetic_dataset(const DatasetOptions& opts, const EncoderBackend& face);

/// Largest face-embedding cosine between images of different identities.
double max_cross_identity_cosine(const std::vector<SyntheticIdentity>& ids, const EncoderBackend& face,
                                 std::size_t align_size);

/// PNG per image under <dir>/<identity_id>/, then manifest.json (written last).
/// A non-empty config_digest is recorded in the manifest.
void export_dataset(const Dataset& d, const std::filesystem::path& dir, const std::string& config_digest = {});
Dataset import_dataset(const std::filesystem::path& dir);

}  // namespace idfuse
