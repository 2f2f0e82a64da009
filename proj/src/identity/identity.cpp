#include "idfuse/identity.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numeric>

#include "idfuse/errors.hpp"

namespace idfuse {

Image align_face(const Image& img, std::size_t target_size) {
    if (img.height == 0 || img.width == 0) throw InputError("align_face: image has zero area");
    if (target_size == 0) throw InputError("align_face: target size must be positive");
    const std::size_t side = std::min(img.height, img.width);
    return resize_bilinear(center_crop(img, side, side), target_size, target_size);
}

const char* to_string(EncoderKind kind) { return kind == EncoderKind::clip_like ? "clip_like" : "face_like"; }

namespace {

constexpr std::size_t kStubGrid = 8;
constexpr std::size_t kStubInputs = kStubGrid * kStubGrid * 3;

class StubBackend final : public EncoderBackend {
public:
    StubBackend(EncoderKind kind, std::size_t tokens, std::size_t dim, std::uint64_t seed)
        : kind_(kind), tokens_(tokens), dim_(dim), proj_(kStubInputs, tokens * dim) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n(0.0, 1.0);
        for (auto& v : proj_.storage()) v = n(rng);
    }

    EncoderKind kind() const override { return kind_; }
    std::size_t token_count() const override { return tokens_; }
    std::size_t embed_dim() const override { return dim_; }

    Matrix<float> encode(const Image& img) const override {
        validate(img);
        const Image small = (img.height % kStubGrid == 0 && img.width % kStubGrid == 0 && img.height == img.width)
                                ? downsample_box(img, img.height / kStubGrid)
                                : resize_bilinear(img, kStubGrid, kStubGrid);
        Matrix<double> x(1, kStubInputs);
        for (std::size_t i = 0; i < kStubInputs; ++i) x.data()[i] = small.pixels[i] - 0.5;
        const Matrix<double> y = matmul(x, proj_);
        Matrix<float> out(tokens_, dim_);
        for (std::size_t t = 0; t < tokens_; ++t) {
            double norm = 0;
            for (std::size_t c = 0; c < dim_; ++c) norm += y(0, t * dim_ + c) * y(0, t * dim_ + c);
            norm = std::sqrt(norm);
            if (norm == 0) throw DegenerateError("stub encoder: zero embedding (image is uniform mid-gray)");
            for (std::size_t c = 0; c < dim_; ++c) out(t, c) = static_cast<float>(y(0, t * dim_ + c) / norm);
        }
        return out;
    }

private:
    EncoderKind kind_;
    std::size_t tokens_, dim_;
    Matrix<double> proj_;
};

struct Registry {
    std::mutex mu;
    std::map<std::string, BackendFactory> factories;

    Registry() {
        factories["stub"] = [](const BackendParams& p) {
            return make_stub_backend(p.kind, p.token_count, p.embed_dim, p.seed);
        };
    }
};

Registry& registry() {
    static Registry r;
    return r;
}

}  // namespace

BackendPtr make_stub_backend(EncoderKind kind, std::size_t token_count, std::size_t embed_dim, std::uint64_t seed) {
    if (token_count == 0 || embed_dim == 0) throw InputError("stub backend dimensions must be positive");
    if (kind == EncoderKind::face_like && token_count != 1) throw InputError("face_like backends emit one token");
    return std::make_shared<StubBackend>(kind, token_count, embed_dim, seed);
}

void register_backend(const std::string& name, BackendFactory factory) {
    auto& r = registry();
    std::lock_guard lock(r.mu);
    r.factories[name] = std::move(factory);
}

BackendPtr make_backend(const std::string& name, const BackendParams& params) {
    auto& r = registry();
    BackendFactory f;
    {
        std::lock_guard lock(r.mu);
        auto it = r.factories.find(name);
        if (it == r.factories.end()) throw InputError("unknown encoder backend '" + name + "'");
        f = it->second;
    }
    return f(params);
}

std::vector<std::string> registered_backends() {
    auto& r = registry();
    std::lock_guard lock(r.mu);
    std::vector<std::string> names;
    for (const auto& [k, _] : r.factories) names.push_back(k);
    return names;
}

// ---------------------------------------------------------------------------

template <class T>
Mapper<T> init_mapper(std::size_t in_dim, std::size_t d_model, std::mt19937_64& rng) {
    if (in_dim == 0 || d_model == 0) throw InputError("mapper dimensions must be positive");
    Mapper<T> m{Matrix<T>(in_dim, d_model), Matrix<T>(1, d_model)};
    std::uniform_real_distribution<double> u(-0.02, 0.02);
    for (auto& v : m.weight.storage()) v = static_cast<T>(u(rng));
    return m;
}

template <class T>
Matrix<T> apply_mapper(const Mapper<T>& m, const Matrix<T>& x) {
    if (x.cols() != m.in_dim())
        throw ShapeError("mapper expects " + std::to_string(m.in_dim()) + " input channels, got " +
                         std::to_string(x.cols()));
    Matrix<T> y = matmul(x, m.weight);
    for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += m.bias(0, c);
    return y;
}

template <class T>
MapperGrads<T> mapper_backward(const Mapper<T>& m, const Matrix<T>& x, const Matrix<T>& d_out) {
    if (d_out.rows() != x.rows() || d_out.cols() != m.out_dim()) throw ShapeError("mapper_backward: upstream shape");
    MapperGrads<T> g;
    g.dx = matmul_nt(d_out, m.weight);
    g.dweight = matmul_tn(x, d_out);
    g.dbias = Matrix<T>(1, m.out_dim());
    for (std::size_t r = 0; r < d_out.rows(); ++r)
        for (std::size_t c = 0; c < d_out.cols(); ++c) g.dbias(0, c) += d_out(r, c);
    return g;
}

template Mapper<float> init_mapper<float>(std::size_t, std::size_t, std::mt19937_64&);
template Mapper<double> init_mapper<double>(std::size_t, std::size_t, std::mt19937_64&);
template Matrix<float> apply_mapper(const Mapper<float>&, const Matrix<float>&);
template Matrix<double> apply_mapper(const Mapper<double>&, const Matrix<double>&);
template MapperGrads<float> mapper_backward(const Mapper<float>&, const Matrix<float>&, const Matrix<float>&);
template MapperGrads<double> mapper_backward(const Mapper<double>&, const Matrix<double>&, const Matrix<double>&);

// ---------------------------------------------------------------------------

IdentityFeatures encode_identity(const Image& img, const EncoderBackend& clip, const EncoderBackend& face,
                                 std::size_t align_size) {
    validate(img);
    if (clip.kind() != EncoderKind::clip_like) throw InputError("first backend must be clip_like");
    if (face.kind() != EncoderKind::face_like) throw InputError("second backend must be face_like");
    const Image aligned = align_face(img, align_size);
    return {clip.encode(aligned), face.encode(aligned)};
}

IdentityEmbedding map_identity(const IdentityFeatures& f, const MapperWeights& mappers, std::string source_id) {
    if (mappers.clip.out_dim() != mappers.face.out_dim()) throw ShapeError("mapper output widths differ");
    IdentityEmbedding e;
    e.tokens = concat_rows(apply_mapper(mappers.clip, f.clip_tokens), apply_mapper(mappers.face, f.face_tokens));
    e.source_ids.push_back(std::move(source_id));
    return e;
}

IdentityEmbedding extract_identity_embedding(const Image& img, const EncoderBackend& clip,
                                             const EncoderBackend& face, const MapperWeights& mappers,
                                             std::size_t align_size, std::string source_id) {
    return map_identity(encode_identity(img, clip, face, align_size), mappers, std::move(source_id));
}

IdentityEmbedding stack_identities(const std::vector<IdentityEmbedding>& embeddings) {
    if (embeddings.empty()) throw InputError("stack_identities: empty list");
    IdentityEmbedding out = embeddings.front();
    for (std::size_t i = 1; i < embeddings.size(); ++i) {
        if (embeddings[i].tokens.cols() != out.tokens.cols())
            throw ShapeError("stack_identities: d_model mismatch");
        out.tokens = concat_rows(out.tokens, embeddings[i].tokens);
        out.source_ids.insert(out.source_ids.end(), embeddings[i].source_ids.begin(), embeddings[i].source_ids.end());
    }
    return out;
}

IdentityEmbedding interpolate_identities(const IdentityEmbedding& a, const IdentityEmbedding& b, double w) {
    if (!a.tokens.same_shape(b.tokens))
        throw ShapeError("interpolate_identities: " + a.tokens.shape_str() + " vs " + b.tokens.shape_str());
    if (!(w >= 0.0 && w <= 1.0)) throw InputError("interpolation weight must lie in [0,1]");
    IdentityEmbedding out;
    out.tokens = Matrix<float>(a.tokens.rows(), a.tokens.cols());
    const float wa = static_cast<float>(1.0 - w), wb = static_cast<float>(w);
    for (std::size_t i = 0; i < out.tokens.size(); ++i)
        out.tokens.data()[i] = wa * a.tokens.data()[i] + wb * b.tokens.data()[i];
    out.source_ids = a.source_ids;
    out.source_ids.insert(out.source_ids.end(), b.source_ids.begin(), b.source_ids.end());
    return out;
}

IdentityEmbedding mix_identities(const std::vector<IdentityEmbedding>& embeddings, const std::vector<double>& weights) {
    if (embeddings.empty()) throw InputError("mix_identities: empty list");
    if (weights.size() != embeddings.size()) throw InputError("mix_identities: one weight per identity required");
    double total = 0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw InputError("mix weights must be non-negative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-6) throw InputError("mix weights must sum to one");
    if (embeddings.size() == 1) return embeddings.front();
    // Fold pairwise so that the running prefix carries its accumulated mass.
    IdentityEmbedding acc = embeddings.front();
    double mass = weights.front();
    for (std::size_t i = 1; i < embeddings.size(); ++i) {
        const double next = mass + weights[i];
        const double w = next > 0 ? weights[i] / next : 0.0;
        acc = interpolate_identities(acc, embeddings[i], std::min(w, 1.0));
        mass = next;
    }
    return acc;
}

}  // namespace idfuse
