#pragma once
// Attention and feature-statistics operators: scaled dot-product attention,
// mixed (concatenated key/value) attention, mutual (replaced key/value)
// attention, merged image+text cross-attention, and the AdaIN-mean / AdaIN
// style alignment of keys and values. Every operator has an analytic
// backward pass driven by an explicit forward cache.
//
// Matrices are [tokens x channels]. All functions are pure; caches are owned
// by the caller.

#include <optional>
#include <vector>

#include "idfuse/matrix.hpp"

namespace idfuse {

enum class Stream { identity, text };
enum class StyleAlign { off, adain_mean, adain };

const char* to_string(StyleAlign mode);
StyleAlign style_align_from_string(const std::string& name);

/// Minimum per-channel standard deviation accepted by adain().
inline constexpr double kAdainEpsilon = 1e-6;

/// Token features tagged with the stream they came from.
template <class T>
struct FeatureMatrix {
    Matrix<T> data;
    Stream stream = Stream::identity;

    std::size_t tokens() const { return data.rows(); }
    std::size_t channels() const { return data.cols(); }
};

/// Checks the FeatureMatrix invariants (non-empty, finite). Throws ShapeError / InputError.
template <class T>
void validate(const FeatureMatrix<T>& f, const char* what);

/// Fully connected projections for one stream. w_q may be empty for a stream
/// that only contributes keys and values.
template <class T>
struct Projections {
    Matrix<T> w_q;  // [channels x d_k]
    Matrix<T> w_k;  // [channels x d_k]
    Matrix<T> w_v;  // [channels x d_v]
};

template <class T>
struct ProjectionPair {
    Projections<T> identity;
    Projections<T> text;
};

// ---------------------------------------------------------------------------
// Scaled dot-product attention

template <class T>
struct AttentionCache {
    bool valid = false;
    Matrix<T> q, k, v;
    Matrix<T> weights;  // softmax rows [n_q x n_k]
};

template <class T>
struct AttentionGrads {
    Matrix<T> dq, dk, dv;
};

/// softmax(Q K^T / sqrt(d)) V with d = key channel count.
template <class T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, AttentionCache<T>* cache = nullptr);

/// The softmax weight matrix alone; each row sums to one.
template <class T>
Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k);

template <class T>
AttentionGrads<T> attention_backward(const AttentionCache<T>& cache, const Matrix<T>& d_out);

/// Head-split attention: channels of Q/K and of V are divided into `heads`
/// equal contiguous blocks, attended independently and concatenated back.
template <class T>
Matrix<T> multihead_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, std::size_t heads,
                              std::vector<AttentionCache<T>>* caches = nullptr);

template <class T>
AttentionGrads<T> multihead_attention_backward(const std::vector<AttentionCache<T>>& caches, const Matrix<T>& d_out);

// ---------------------------------------------------------------------------
// Feature statistics and style alignment

/// Arithmetic mean of each column over tokens.
template <class T>
std::vector<T> channel_mean(const Matrix<T>& x);

/// Population standard deviation of each column over tokens.
template <class T>
std::vector<T> channel_std(const Matrix<T>& x);

/// x - mu(x) + mu(y), per channel.
template <class T>
Matrix<T> adain_mean(const Matrix<T>& x, const Matrix<T>& y);

/// sigma(y) * (x - mu(x)) / sigma(x) + mu(y), per channel, population statistics.
/// Throws DegenerateError when any sigma(x) <= kAdainEpsilon.
template <class T>
Matrix<T> adain(const Matrix<T>& x, const Matrix<T>& y);

template <class T>
struct StyleGrads {
    Matrix<T> dx, dy;
};

template <class T>
StyleGrads<T> adain_mean_backward(const Matrix<T>& x, const Matrix<T>& y, const Matrix<T>& d_out);

template <class T>
StyleGrads<T> adain_backward(const Matrix<T>& x, const Matrix<T>& y, const Matrix<T>& d_out);

/// Dispatches on mode; StyleAlign::off returns x unchanged.
template <class T>
Matrix<T> style_align(const Matrix<T>& x, const Matrix<T>& y, StyleAlign mode);

template <class T>
StyleGrads<T> style_align_backward(const Matrix<T>& x, const Matrix<T>& y, StyleAlign mode, const Matrix<T>& d_out);

// ---------------------------------------------------------------------------
// Two-stream attention on already-projected keys and values. These are the
// forms the U-Net uses, where the text-stream keys/values arrive captured.

template <class T>
struct MixedAttendCache {
    bool valid = false;
    StyleAlign style = StyleAlign::off;
    std::size_t heads = 1;
    std::size_t n_id = 0;
    Matrix<T> k_id, v_id, k_t, v_t;  // pre-alignment identity keys/values and text keys/values
    std::vector<AttentionCache<T>> attn;
};

template <class T>
struct MixedAttendGrads {
    Matrix<T> dq, dk_id, dv_id, dk_t, dv_t;
};

/// Attn(Q, [K_id'; K_t], [V_id'; V_t]) with K_id' = align(K_id, K_t) and V_id' = align(V_id, V_t).
/// K_t/V_t may be empty (plain self-attention) only when style is off.
template <class T>
Matrix<T> mixed_attend(const Matrix<T>& q, const Matrix<T>& k_id, const Matrix<T>& v_id, const Matrix<T>& k_t,
                       const Matrix<T>& v_t, StyleAlign style, std::size_t heads = 1,
                       MixedAttendCache<T>* cache = nullptr);

template <class T>
MixedAttendGrads<T> mixed_attend_backward(const MixedAttendCache<T>& cache, const Matrix<T>& d_out);

template <class T>
struct MergeAttendCache {
    bool valid = false;
    StyleAlign style = StyleAlign::off;
    bool text_branch = false;
    Matrix<T> k_id, v_id, k_t, v_t;
    std::vector<AttentionCache<T>> attn_id, attn_t;
};

template <class T>
struct MergeAttendGrads {
    Matrix<T> dq, dk_id, dv_id, dk_t, dv_t;
};

/// Attn(Q, K_id', V_id') + Attn(Q, K_t, V_t). When text_branch is false the
/// second term is omitted, but K_t/V_t still serve as style targets if given.
template <class T>
Matrix<T> merge_attend(const Matrix<T>& q, const Matrix<T>& k_id, const Matrix<T>& v_id, const Matrix<T>& k_t,
                       const Matrix<T>& v_t, StyleAlign style, bool text_branch, std::size_t heads = 1,
                       MergeAttendCache<T>* cache = nullptr);

template <class T>
MergeAttendGrads<T> merge_attend_backward(const MergeAttendCache<T>& cache, const Matrix<T>& d_out);

// ---------------------------------------------------------------------------
// Feature-level operators with their own projections.

template <class T>
struct ProjectionGrads {
    Matrix<T> dw_q, dw_k, dw_v;
};

template <class T>
struct TwoStreamGrads {
    Matrix<T> d_identity;  // dZ_id, or dQ for cross_attention_merge
    Matrix<T> d_text;      // dZ_t, or d c_t for cross_attention_merge
    Matrix<T> d_c_id;      // cross_attention_merge only
    ProjectionGrads<T> identity;
    ProjectionGrads<T> text;
};

template <class T>
struct TwoStreamCache {
    bool valid = false;
    Matrix<T> z_id, z_t;  // for cross_attention_merge: Q and c_t
    Matrix<T> c_id;
    ProjectionPair<T> proj;
    MixedAttendCache<T> mixed;
    AttentionCache<T> mutual;
    MergeAttendCache<T> merge;
};

/// Self-attention of the identity stream whose key/value set is extended by
/// the text stream: Q = Z_id W_q^id, K = [Z_id W_k^id; Z_t W_k^t], V likewise.
template <class T>
FeatureMatrix<T> mixed_attention(const FeatureMatrix<T>& z_id, const FeatureMatrix<T>& z_t,
                                 const ProjectionPair<T>& proj, StyleAlign style,
                                 TwoStreamCache<T>* cache = nullptr);

template <class T>
TwoStreamGrads<T> mixed_attention_backward(const TwoStreamCache<T>& cache, const Matrix<T>& d_out);

/// Attention with queries from Z_id and keys/values wholly from Z_t.
template <class T>
FeatureMatrix<T> mutual_attention(const FeatureMatrix<T>& z_id, const FeatureMatrix<T>& z_t,
                                  const ProjectionPair<T>& proj, TwoStreamCache<T>* cache = nullptr);

template <class T>
TwoStreamGrads<T> mutual_attention_backward(const TwoStreamCache<T>& cache, const Matrix<T>& d_out);

/// Attn(Q, c_id W_k^id, c_id W_v^id) + Attn(Q, c_t W_k^t, c_t W_v^t). Q is
/// already projected; proj.*.w_q are ignored.
template <class T>
FeatureMatrix<T> cross_attention_merge(const FeatureMatrix<T>& q, const Matrix<T>& c_id, const Matrix<T>& c_t,
                                       const ProjectionPair<T>& proj, StyleAlign style,
                                       TwoStreamCache<T>* cache = nullptr);

template <class T>
TwoStreamGrads<T> cross_attention_merge_backward(const TwoStreamCache<T>& cache, const Matrix<T>& d_out);

}  // namespace idfuse
