#pragma once
// Identity embedding extraction: face alignment, image/face encoder backends,
// the two trainable mappers, and stacking / interpolation of identities.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "idfuse/image.hpp"
#include "idfuse/matrix.hpp"

namespace idfuse {

/// Center crop to the shorter side, then bilinear resize to target x target.
Image align_face(const Image& img, std::size_t target_size);

enum class EncoderKind { clip_like, face_like };

const char* to_string(EncoderKind kind);

/// An image encoder. clip_like backends emit [token_count x embed_dim] local
/// embeddings; face_like backends emit a single [1 x embed_dim] global one.
/// Implementations must be deterministic and safe to call concurrently.
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;
    virtual EncoderKind kind() const = 0;
    virtual std::size_t token_count() const = 0;
    virtual std::size_t embed_dim() const = 0;
    virtual Matrix<float> encode(const Image& img) const = 0;
};

using BackendPtr = std::shared_ptr<const EncoderBackend>;

/// Seeded random linear map from the image box-filtered to 8x8 (centered on
/// 0.5) to token_count x embed_dim values, each token L2-normalized.
BackendPtr make_stub_backend(EncoderKind kind, std::size_t token_count, std::size_t embed_dim, std::uint64_t seed);

struct BackendParams {
    EncoderKind kind = EncoderKind::clip_like;
    std::size_t token_count = 1;
    std::size_t embed_dim = 1;
    std::uint64_t seed = 0;
};

using BackendFactory = std::function<BackendPtr(const BackendParams&)>;

/// Name-keyed backend registry. "stub" is always registered.
void register_backend(const std::string& name, BackendFactory factory);
BackendPtr make_backend(const std::string& name, const BackendParams& params);
std::vector<std::string> registered_backends();

// ---------------------------------------------------------------------------
// Mappers

/// Affine token map y = x W + b, applied row by row.
template <class T>
struct Mapper {
    Matrix<T> weight;  // [in x d_model]
    Matrix<T> bias;    // [1 x d_model]

    std::size_t in_dim() const { return weight.rows(); }
    std::size_t out_dim() const { return weight.cols(); }
};

template <class T>
struct MapperGrads {
    Matrix<T> dx, dweight, dbias;
};

/// Weights uniform in [-0.02, 0.02], zero bias.
template <class T>
Mapper<T> init_mapper(std::size_t in_dim, std::size_t d_model, std::mt19937_64& rng);

template <class T>
Matrix<T> apply_mapper(const Mapper<T>& m, const Matrix<T>& x);

template <class T>
MapperGrads<T> mapper_backward(const Mapper<T>& m, const Matrix<T>& x, const Matrix<T>& d_out);

struct MapperWeights {
    Mapper<float> clip;
    Mapper<float> face;
};

// ---------------------------------------------------------------------------
// Embeddings

/// Raw encoder outputs for one aligned image, before mapping.
struct IdentityFeatures {
    Matrix<float> clip_tokens;
    Matrix<float> face_tokens;
};

IdentityFeatures encode_identity(const Image& img, const EncoderBackend& clip, const EncoderBackend& face,
                                 std::size_t align_size);

struct IdentityEmbedding {
    Matrix<float> tokens;  // [(N_clip + N_face) * identities x d_model]
    std::vector<std::string> source_ids;

    std::size_t token_count() const { return tokens.rows(); }
};

/// Mapped clip tokens first, mapped face token last.
IdentityEmbedding map_identity(const IdentityFeatures& features, const MapperWeights& mappers,
                               std::string source_id = {});

IdentityEmbedding extract_identity_embedding(const Image& img, const EncoderBackend& clip,
                                             const EncoderBackend& face, const MapperWeights& mappers,
                                             std::size_t align_size = 32, std::string source_id = {});

/// Token-wise concatenation in list order.
IdentityEmbedding stack_identities(const std::vector<IdentityEmbedding>& embeddings);

/// (1 - w) a + w b, token by token.
IdentityEmbedding interpolate_identities(const IdentityEmbedding& a, const IdentityEmbedding& b, double w);

/// Convex combination sum_i w_i e_i; weights must be non-negative and sum to one.
IdentityEmbedding mix_identities(const std::vector<IdentityEmbedding>& embeddings, const std::vector<double>& weights);

}  // namespace idfuse
