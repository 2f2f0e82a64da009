#include "idfuse/attention.hpp"

#include <cmath>
#include <string>

namespace idfuse {

const char* to_string(StyleAlign mode) {
    switch (mode) {
        case StyleAlign::off: return "off";
        case StyleAlign::adain_mean: return "adain_mean";
        case StyleAlign::adain: return "adain";
    }
    return "off";
}

StyleAlign style_align_from_string(const std::string& name) {
    if (name == "off") return StyleAlign::off;
    if (name == "adain_mean") return StyleAlign::adain_mean;
    if (name == "adain") return StyleAlign::adain;
    throw InputError("unknown style mode '" + name + "' (expected off, adain_mean or adain)");
}

template <class T>
void validate(const FeatureMatrix<T>& f, const char* what) {
    if (f.tokens() < 1 || f.channels() < 1)
        throw ShapeError(std::string(what) + ": feature matrix must be non-empty, got " + f.data.shape_str());
    if (!all_finite(f.data)) throw InputError(std::string(what) + ": feature matrix has non-finite entries");
}

namespace {

template <class T>
void softmax_rows(Matrix<T>& s) {
    for (std::size_t r = 0; r < s.rows(); ++r) {
        auto row = s.row(r);
        T mx = row[0];
        for (T v : row) mx = std::max(mx, v);
        T sum = 0;
        for (T& v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        const T inv = T(1) / sum;
        for (T& v : row) v *= inv;
    }
}

template <class T>
void check_attention_shapes(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v) {
    if (k.rows() == 0) throw DegenerateError("attention: softmax over zero keys is undefined");
    if (q.cols() != k.cols())
        throw ShapeError("attention: query/key channel mismatch " + q.shape_str() + " vs " + k.shape_str());
    if (k.rows() != v.rows())
        throw ShapeError("attention: key/value token mismatch " + k.shape_str() + " vs " + v.shape_str());
}

}  // namespace

template <class T>
Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k) {
    if (k.rows() == 0) throw DegenerateError("attention: softmax over zero keys is undefined");
    if (q.cols() != k.cols())
        throw ShapeError("attention: query/key channel mismatch " + q.shape_str() + " vs " + k.shape_str());
    Matrix<T> s = matmul_nt(q, k);
    s *= T(1) / std::sqrt(static_cast<T>(k.cols()));
    softmax_rows(s);
    return s;
}

template <class T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, AttentionCache<T>* cache) {
    check_attention_shapes(q, k, v);
    Matrix<T> p = attention_weights(q, k);
    Matrix<T> out = matmul(p, v);
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->weights = std::move(p);
        cache->valid = true;
    }
    return out;
}

template <class T>
AttentionGrads<T> attention_backward(const AttentionCache<T>& cache, const Matrix<T>& d_out) {
    if (!cache.valid) throw StateError("attention_backward: no forward cache");
    const Matrix<T>& p = cache.weights;
    if (d_out.rows() != p.rows() || d_out.cols() != cache.v.cols())
        throw ShapeError("attention_backward: upstream gradient " + d_out.shape_str() + " does not match output");
    AttentionGrads<T> g;
    g.dv = matmul_tn(p, d_out);
    Matrix<T> ds = matmul_nt(d_out, cache.v);  // dP
    for (std::size_t r = 0; r < ds.rows(); ++r) {
        auto dp = ds.row(r);
        auto pr = p.row(r);
        const T inner = kernels::dot(std::span<const T>(dp), pr);
        for (std::size_t c = 0; c < dp.size(); ++c) dp[c] = pr[c] * (dp[c] - inner);
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(cache.k.cols()));
    g.dq = matmul(ds, cache.k);
    g.dq *= scale;
    g.dk = matmul_tn(ds, cache.q);
    g.dk *= scale;
    return g;
}

template <class T>
Matrix<T> multihead_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, std::size_t heads,
                              std::vector<AttentionCache<T>>* caches) {
    if (heads == 0) throw InputError("multihead_attention: head count must be positive");
    check_attention_shapes(q, k, v);
    if (caches) caches->assign(heads, AttentionCache<T>{});
    if (heads == 1) return attention(q, k, v, caches ? &(*caches)[0] : nullptr);
    if (q.cols() % heads != 0 || v.cols() % heads != 0)
        throw ShapeError("multihead_attention: channels not divisible by head count");
    const std::size_t dk = q.cols() / heads;
    const std::size_t dv = v.cols() / heads;
    Matrix<T> out(q.rows(), v.cols());
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix<T> o = attention(slice_cols(q, h * dk, dk), slice_cols(k, h * dk, dk), slice_cols(v, h * dv, dv),
                                caches ? &(*caches)[h] : nullptr);
        assign_cols(out, h * dv, o);
    }
    return out;
}

template <class T>
AttentionGrads<T> multihead_attention_backward(const std::vector<AttentionCache<T>>& caches, const Matrix<T>& d_out) {
    if (caches.empty()) throw StateError("multihead_attention_backward: no forward cache");
    if (caches.size() == 1) return attention_backward(caches[0], d_out);
    const std::size_t heads = caches.size();
    for (const auto& c : caches)
        if (!c.valid) throw StateError("multihead_attention_backward: no forward cache");
    const std::size_t dk = caches[0].q.cols();
    const std::size_t dv = caches[0].v.cols();
    if (d_out.cols() != dv * heads) throw ShapeError("multihead_attention_backward: upstream gradient shape");
    AttentionGrads<T> g{Matrix<T>(caches[0].q.rows(), dk * heads), Matrix<T>(caches[0].k.rows(), dk * heads),
                        Matrix<T>(caches[0].v.rows(), dv * heads)};
    for (std::size_t h = 0; h < heads; ++h) {
        AttentionGrads<T> gh = attention_backward(caches[h], slice_cols(d_out, h * dv, dv));
        assign_cols(g.dq, h * dk, gh.dq);
        assign_cols(g.dk, h * dk, gh.dk);
        assign_cols(g.dv, h * dv, gh.dv);
    }
    return g;
}

// ---------------------------------------------------------------------------

template <class T>
std::vector<T> channel_mean(const Matrix<T>& x) {
    if (x.rows() == 0 || x.cols() == 0) throw ShapeError("channel_mean: empty matrix " + x.shape_str());
    std::vector<T> mu(x.cols(), T(0));
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) mu[c] += x(r, c);
    const T inv = T(1) / static_cast<T>(x.rows());
    for (T& m : mu) m *= inv;
    return mu;
}

template <class T>
std::vector<T> channel_std(const Matrix<T>& x) {
    const std::vector<T> mu = channel_mean(x);
    std::vector<T> var(x.cols(), T(0));
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const T d = x(r, c) - mu[c];
            var[c] += d * d;
        }
    for (T& v : var) v = std::sqrt(v / static_cast<T>(x.rows()));
    return var;
}

namespace {

template <class T>
void check_style_shapes(const Matrix<T>& x, const Matrix<T>& y, const char* op) {
    if (x.rows() == 0 || y.rows() == 0) throw ShapeError(std::string(op) + ": empty operand");
    if (x.cols() != y.cols())
        throw ShapeError(std::string(op) + ": channel mismatch " + x.shape_str() + " vs " + y.shape_str());
}

template <class T>
std::vector<T> column_sums(const Matrix<T>& g) {
    std::vector<T> s(g.cols(), T(0));
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) s[c] += g(r, c);
    return s;
}

}  // namespace

template <class T>
Matrix<T> adain_mean(const Matrix<T>& x, const Matrix<T>& y) {
    check_style_shapes(x, y, "adain_mean");
    const std::vector<T> mx = channel_mean(x);
    const std::vector<T> my = channel_mean(y);
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) - mx[c] + my[c];
    return out;
}

template <class T>
Matrix<T> adain(const Matrix<T>& x, const Matrix<T>& y) {
    check_style_shapes(x, y, "adain");
    const std::vector<T> mx = channel_mean(x);
    const std::vector<T> sx = channel_std(x);
    const std::vector<T> my = channel_mean(y);
    const std::vector<T> sy = channel_std(y);
    for (std::size_t c = 0; c < sx.size(); ++c)
        if (!(sx[c] > static_cast<T>(kAdainEpsilon)))
            throw DegenerateError("adain: channel " + std::to_string(c) + " of the source has standard deviation " +
                                  std::to_string(static_cast<double>(sx[c])) + " <= 1e-6");
    Matrix<T> out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = sy[c] * (x(r, c) - mx[c]) / sx[c] + my[c];
    return out;
}

template <class T>
StyleGrads<T> adain_mean_backward(const Matrix<T>& x, const Matrix<T>& y, const Matrix<T>& d_out) {
    check_style_shapes(x, y, "adain_mean_backward");
    if (!d_out.same_shape(x)) throw ShapeError("adain_mean_backward: upstream gradient shape");
    const std::vector<T> gsum = column_sums(d_out);
    StyleGrads<T> g{Matrix<T>(x.rows(), x.cols()), Matrix<T>(y.rows(), y.cols())};
    const T inv_nx = T(1) / static_cast<T>(x.rows());
    const T inv_ny = T(1) / static_cast<T>(y.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) g.dx(r, c) = d_out(r, c) - gsum[c] * inv_nx;
    for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) g.dy(r, c) = gsum[c] * inv_ny;
    return g;
}

template <class T>
StyleGrads<T> adain_backward(const Matrix<T>& x, const Matrix<T>& y, const Matrix<T>& d_out) {
    check_style_shapes(x, y, "adain_backward");
    if (!d_out.same_shape(x)) throw ShapeError("adain_backward: upstream gradient shape");
    const std::size_t n = x.rows(), m = y.rows(), ch = x.cols();
    const std::vector<T> mx = channel_mean(x);
    const std::vector<T> sx = channel_std(x);
    const std::vector<T> my = channel_mean(y);
    const std::vector<T> sy = channel_std(y);
    for (std::size_t c = 0; c < ch; ++c)
        if (!(sx[c] > static_cast<T>(kAdainEpsilon)))
            throw DegenerateError("adain_backward: degenerate source statistics in channel " + std::to_string(c));

    StyleGrads<T> g{Matrix<T>(n, ch), Matrix<T>(m, ch)};
    for (std::size_t c = 0; c < ch; ++c) {
        T g_mean = 0, gx_mean = 0;
        for (std::size_t r = 0; r < n; ++r) {
            const T xh = (x(r, c) - mx[c]) / sx[c];
            g_mean += d_out(r, c);
            gx_mean += d_out(r, c) * xh;
        }
        const T d_sigma_y = gx_mean;  // sum_i g_i * xhat_i
        const T d_mu_y = g_mean;      // sum_i g_i
        g_mean /= static_cast<T>(n);
        gx_mean /= static_cast<T>(n);
        const T ratio = sy[c] / sx[c];
        for (std::size_t r = 0; r < n; ++r) {
            const T xh = (x(r, c) - mx[c]) / sx[c];
            g.dx(r, c) = ratio * (d_out(r, c) - g_mean - xh * gx_mean);
        }
        for (std::size_t r = 0; r < m; ++r) {
            // d sigma_y / d y_j = (y_j - mu_y) / (m sigma_y); zero when the target is constant.
            const T dev = sy[c] > T(0) ? (y(r, c) - my[c]) / (static_cast<T>(m) * sy[c]) : T(0);
            g.dy(r, c) = d_mu_y / static_cast<T>(m) + d_sigma_y * dev;
        }
    }
    return g;
}

template <class T>
Matrix<T> style_align(const Matrix<T>& x, const Matrix<T>& y, StyleAlign mode) {
    switch (mode) {
        case StyleAlign::off: return x;
        case StyleAlign::adain_mean: return adain_mean(x, y);
        case StyleAlign::adain: return adain(x, y);
    }
    return x;
}

template <class T>
StyleGrads<T> style_align_backward(const Matrix<T>& x, const Matrix<T>& y, StyleAlign mode, const Matrix<T>& d_out) {
    switch (mode) {
        case StyleAlign::adain_mean: return adain_mean_backward(x, y, d_out);
        case StyleAlign::adain: return adain_backward(x, y, d_out);
        case StyleAlign::off: break;
    }
    return {d_out, Matrix<T>(y.rows(), y.cols())};
}

// ---------------------------------------------------------------------------

template <class T>
Matrix<T> mixed_attend(const Matrix<T>& q, const Matrix<T>& k_id, const Matrix<T>& v_id, const Matrix<T>& k_t,
                       const Matrix<T>& v_t, StyleAlign style, std::size_t heads, MixedAttendCache<T>* cache) {
    if (k_id.rows() != v_id.rows()) throw ShapeError("mixed_attend: identity key/value token mismatch");
    if (k_t.rows() != v_t.rows()) throw ShapeError("mixed_attend: text key/value token mismatch");
    const bool has_text = k_t.rows() > 0;
    if (has_text && (k_t.cols() != k_id.cols() || v_t.cols() != v_id.cols()))
        throw ShapeError("mixed_attend: text keys/values " + k_t.shape_str() + "/" + v_t.shape_str() +
                         " do not match identity " + k_id.shape_str() + "/" + v_id.shape_str());
    if (!has_text && style != StyleAlign::off)
        throw InputError("mixed_attend: style alignment needs text-stream keys and values");

    const Matrix<T> k_al = has_text ? style_align(k_id, k_t, style) : k_id;
    const Matrix<T> v_al = has_text ? style_align(v_id, v_t, style) : v_id;
    std::vector<AttentionCache<T>>* attn = cache ? &cache->attn : nullptr;
    Matrix<T> out = has_text ? multihead_attention(q, concat_rows(k_al, k_t), concat_rows(v_al, v_t), heads, attn)
                             : multihead_attention(q, k_al, v_al, heads, attn);
    if (cache) {
        cache->style = style;
        cache->heads = heads;
        cache->n_id = k_id.rows();
        cache->k_id = k_id;
        cache->v_id = v_id;
        cache->k_t = k_t;
        cache->v_t = v_t;
        cache->valid = true;
    }
    return out;
}

template <class T>
MixedAttendGrads<T> mixed_attend_backward(const MixedAttendCache<T>& cache, const Matrix<T>& d_out) {
    if (!cache.valid) throw StateError("mixed_attend_backward: no forward cache");
    AttentionGrads<T> a = multihead_attention_backward(cache.attn, d_out);
    MixedAttendGrads<T> g;
    g.dq = std::move(a.dq);
    const std::size_t n_id = cache.n_id;
    const std::size_t n_t = cache.k_t.rows();
    if (n_t == 0) {
        g.dk_id = std::move(a.dk);
        g.dv_id = std::move(a.dv);
        g.dk_t = cache.k_t;
        g.dv_t = cache.v_t;
        return g;
    }
    Matrix<T> dk_al = slice_rows(a.dk, 0, n_id);
    Matrix<T> dv_al = slice_rows(a.dv, 0, n_id);
    g.dk_t = slice_rows(a.dk, n_id, n_t);
    g.dv_t = slice_rows(a.dv, n_id, n_t);
    StyleGrads<T> sk = style_align_backward(cache.k_id, cache.k_t, cache.style, dk_al);
    StyleGrads<T> sv = style_align_backward(cache.v_id, cache.v_t, cache.style, dv_al);
    g.dk_id = std::move(sk.dx);
    g.dv_id = std::move(sv.dx);
    g.dk_t += sk.dy;
    g.dv_t += sv.dy;
    return g;
}

template <class T>
Matrix<T> merge_attend(const Matrix<T>& q, const Matrix<T>& k_id, const Matrix<T>& v_id, const Matrix<T>& k_t,
                       const Matrix<T>& v_t, StyleAlign style, bool text_branch, std::size_t heads,
                       MergeAttendCache<T>* cache) {
    const bool has_text = k_t.rows() > 0;
    if (k_t.rows() != v_t.rows()) throw ShapeError("merge_attend: text key/value token mismatch");
    if ((text_branch || style != StyleAlign::off) && !has_text)
        throw InputError("merge_attend: text branch or style alignment requested without text keys/values");
    if (has_text && (k_t.cols() != k_id.cols() || v_t.cols() != v_id.cols()))
        throw ShapeError("merge_attend: text keys/values do not match identity keys/values");

    const Matrix<T> k_al = style != StyleAlign::off ? style_align(k_id, k_t, style) : k_id;
    const Matrix<T> v_al = style != StyleAlign::off ? style_align(v_id, v_t, style) : v_id;
    Matrix<T> out = multihead_attention(q, k_al, v_al, heads, cache ? &cache->attn_id : nullptr);
    if (text_branch) out += multihead_attention(q, k_t, v_t, heads, cache ? &cache->attn_t : nullptr);
    if (cache) {
        cache->style = style;
        cache->text_branch = text_branch;
        cache->k_id = k_id;
        cache->v_id = v_id;
        cache->k_t = k_t;
        cache->v_t = v_t;
        if (!text_branch) cache->attn_t.clear();
        cache->valid = true;
    }
    return out;
}

template <class T>
MergeAttendGrads<T> merge_attend_backward(const MergeAttendCache<T>& cache, const Matrix<T>& d_out) {
    if (!cache.valid) throw StateError("merge_attend_backward: no forward cache");
    AttentionGrads<T> a = multihead_attention_backward(cache.attn_id, d_out);
    MergeAttendGrads<T> g;
    g.dq = std::move(a.dq);
    g.dk_t = Matrix<T>(cache.k_t.rows(), cache.k_t.cols());
    g.dv_t = Matrix<T>(cache.v_t.rows(), cache.v_t.cols());
    if (cache.text_branch) {
        AttentionGrads<T> b = multihead_attention_backward(cache.attn_t, d_out);
        g.dq += b.dq;
        g.dk_t = std::move(b.dk);
        g.dv_t = std::move(b.dv);
    }
    if (cache.style != StyleAlign::off) {
        StyleGrads<T> sk = style_align_backward(cache.k_id, cache.k_t, cache.style, a.dk);
        StyleGrads<T> sv = style_align_backward(cache.v_id, cache.v_t, cache.style, a.dv);
        g.dk_id = std::move(sk.dx);
        g.dv_id = std::move(sv.dx);
        g.dk_t += sk.dy;
        g.dv_t += sv.dy;
    } else {
        g.dk_id = std::move(a.dk);
        g.dv_id = std::move(a.dv);
    }
    return g;
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
void check_projection(const Matrix<T>& w, std::size_t in, const char* name) {
    if (w.rows() != in)
        throw ShapeError(std::string("projection ") + name + " expects " + std::to_string(w.rows()) +
                         " input channels, features have " + std::to_string(in));
}

template <class T>
Matrix<T> project(const Matrix<T>& z, const Matrix<T>& w) {
    if (z.rows() == 0) return Matrix<T>(0, w.cols());
    return matmul(z, w);
}

template <class T>
Matrix<T> grad_weight(const Matrix<T>& z, const Matrix<T>& dy, const Matrix<T>& w) {
    if (z.rows() == 0) return Matrix<T>(w.rows(), w.cols());
    return matmul_tn(z, dy);
}

template <class T>
Matrix<T> zeros_like(const Matrix<T>& w) {
    return Matrix<T>(w.rows(), w.cols());
}

template <class T>
void check_streams(const FeatureMatrix<T>& z_id, const FeatureMatrix<T>& z_t, const char* op) {
    if (z_id.stream != Stream::identity) throw InputError(std::string(op) + ": first operand must be the identity stream");
    if (z_t.stream != Stream::text) throw InputError(std::string(op) + ": second operand must be the text stream");
}

}  // namespace

template <class T>
FeatureMatrix<T> mixed_attention(const FeatureMatrix<T>& z_id, const FeatureMatrix<T>& z_t,
                                 const ProjectionPair<T>& proj, StyleAlign style, TwoStreamCache<T>* cache) {
    validate(z_id, "mixed_attention");
    check_streams(z_id, z_t, "mixed_attention");
    const auto& pi = proj.identity;
    const auto& pt = proj.text;
    check_projection(pi.w_q, z_id.channels(), "W_q^id");
    check_projection(pi.w_k, z_id.channels(), "W_k^id");
    check_projection(pi.w_v, z_id.channels(), "W_v^id");
    if (pi.w_q.cols() != pi.w_k.cols()) throw ShapeError("mixed_attention: W_q^id and W_k^id disagree on d_k");
    if (z_t.tokens() > 0) {
        if (!all_finite(z_t.data)) throw InputError("mixed_attention: text features have non-finite entries");
        check_projection(pt.w_k, z_t.channels(), "W_k^t");
        check_projection(pt.w_v, z_t.channels(), "W_v^t");
        if (pt.w_k.cols() != pi.w_k.cols() || pt.w_v.cols() != pi.w_v.cols())
            throw ShapeError("mixed_attention: identity and text projections disagree on d_k/d_v");
    }
    const Matrix<T> q = matmul(z_id.data, pi.w_q);
    const Matrix<T> k_id = matmul(z_id.data, pi.w_k);
    const Matrix<T> v_id = matmul(z_id.data, pi.w_v);
    const Matrix<T> k_t = z_t.tokens() > 0 ? project(z_t.data, pt.w_k) : Matrix<T>(0, pi.w_k.cols());
    const Matrix<T> v_t = z_t.tokens() > 0 ? project(z_t.data, pt.w_v) : Matrix<T>(0, pi.w_v.cols());
    FeatureMatrix<T> out{mixed_attend(q, k_id, v_id, k_t, v_t, style, 1, cache ? &cache->mixed : nullptr),
                         Stream::identity};
    if (cache) {
        cache->z_id = z_id.data;
        cache->z_t = z_t.data;
        cache->proj = proj;
        cache->valid = true;
    }
    return out;
}

template <class T>
TwoStreamGrads<T> mixed_attention_backward(const TwoStreamCache<T>& cache, const Matrix<T>& d_out) {
    if (!cache.valid || !cache.mixed.valid) throw StateError("mixed_attention_backward: no forward cache");
    MixedAttendGrads<T> a = mixed_attend_backward(cache.mixed, d_out);
    const auto& pi = cache.proj.identity;
    const auto& pt = cache.proj.text;
    TwoStreamGrads<T> g;
    g.identity.dw_q = matmul_tn(cache.z_id, a.dq);
    g.identity.dw_k = matmul_tn(cache.z_id, a.dk_id);
    g.identity.dw_v = matmul_tn(cache.z_id, a.dv_id);
    g.d_identity = matmul_nt(a.dq, pi.w_q);
    g.d_identity += matmul_nt(a.dk_id, pi.w_k);
    g.d_identity += matmul_nt(a.dv_id, pi.w_v);
    g.text.dw_q = zeros_like(pt.w_q);
    if (cache.z_t.rows() > 0) {
        g.text.dw_k = grad_weight(cache.z_t, a.dk_t, pt.w_k);
        g.text.dw_v = grad_weight(cache.z_t, a.dv_t, pt.w_v);
        g.d_text = matmul_nt(a.dk_t, pt.w_k);
        g.d_text += matmul_nt(a.dv_t, pt.w_v);
    } else {
        g.text.dw_k = zeros_like(pt.w_k);
        g.text.dw_v = zeros_like(pt.w_v);
        g.d_text = cache.z_t;
    }
    return g;
}

template <class T>
FeatureMatrix<T> mutual_attention(const FeatureMatrix<T>& z_id, const FeatureMatrix<T>& z_t,
                                  const ProjectionPair<T>& proj, TwoStreamCache<T>* cache) {
    validate(z_id, "mutual_attention");
    check_streams(z_id, z_t, "mutual_attention");
    if (z_t.tokens() == 0) throw DegenerateError("mutual_attention: text stream has no tokens, softmax undefined");
    validate(z_t, "mutual_attention");
    const auto& pi = proj.identity;
    const auto& pt = proj.text;
    check_projection(pi.w_q, z_id.channels(), "W_q^id");
    check_projection(pt.w_k, z_t.channels(), "W_k^t");
    check_projection(pt.w_v, z_t.channels(), "W_v^t");
    const Matrix<T> q = matmul(z_id.data, pi.w_q);
    const Matrix<T> k = matmul(z_t.data, pt.w_k);
    const Matrix<T> v = matmul(z_t.data, pt.w_v);
    FeatureMatrix<T> out{attention(q, k, v, cache ? &cache->mutual : nullptr), Stream::identity};
    if (cache) {
        cache->z_id = z_id.data;
        cache->z_t = z_t.data;
        cache->proj = proj;
        cache->valid = true;
    }
    return out;
}

template <class T>
TwoStreamGrads<T> mutual_attention_backward(const TwoStreamCache<T>& cache, const Matrix<T>& d_out) {
    if (!cache.valid || !cache.mutual.valid) throw StateError("mutual_attention_backward: no forward cache");
    AttentionGrads<T> a = attention_backward(cache.mutual, d_out);
    const auto& pi = cache.proj.identity;
    const auto& pt = cache.proj.text;
    TwoStreamGrads<T> g;
    g.identity.dw_q = matmul_tn(cache.z_id, a.dq);
    g.identity.dw_k = zeros_like(pi.w_k);
    g.identity.dw_v = zeros_like(pi.w_v);
    g.d_identity = matmul_nt(a.dq, pi.w_q);
    g.text.dw_q = zeros_like(pt.w_q);
    g.text.dw_k = matmul_tn(cache.z_t, a.dk);
    g.text.dw_v = matmul_tn(cache.z_t, a.dv);
    g.d_text = matmul_nt(a.dk, pt.w_k);
    g.d_text += matmul_nt(a.dv, pt.w_v);
    return g;
}

template <class T>
FeatureMatrix<T> cross_attention_merge(const FeatureMatrix<T>& q, const Matrix<T>& c_id, const Matrix<T>& c_t,
                                       const ProjectionPair<T>& proj, StyleAlign style, TwoStreamCache<T>* cache) {
    validate(q, "cross_attention_merge");
    if (c_id.rows() == 0 || c_t.rows() == 0)
        throw ShapeError("cross_attention_merge: identity and text embeddings must be non-empty");
    const auto& pi = proj.identity;
    const auto& pt = proj.text;
    check_projection(pi.w_k, c_id.cols(), "W'_k^id");
    check_projection(pi.w_v, c_id.cols(), "W'_v^id");
    check_projection(pt.w_k, c_t.cols(), "W'_k^t");
    check_projection(pt.w_v, c_t.cols(), "W'_v^t");
    if (pi.w_k.cols() != q.channels() || pt.w_k.cols() != q.channels())
        throw ShapeError("cross_attention_merge: key projections must map to the query width");
    const Matrix<T> k_id = matmul(c_id, pi.w_k);
    const Matrix<T> v_id = matmul(c_id, pi.w_v);
    const Matrix<T> k_t = matmul(c_t, pt.w_k);
    const Matrix<T> v_t = matmul(c_t, pt.w_v);
    FeatureMatrix<T> out{merge_attend(q.data, k_id, v_id, k_t, v_t, style, true, 1, cache ? &cache->merge : nullptr),
                         Stream::identity};
    if (cache) {
        cache->z_id = q.data;
        cache->z_t = c_t;
        cache->c_id = c_id;
        cache->proj = proj;
        cache->valid = true;
    }
    return out;
}

template <class T>
TwoStreamGrads<T> cross_attention_merge_backward(const TwoStreamCache<T>& cache, const Matrix<T>& d_out) {
    if (!cache.valid || !cache.merge.valid) throw StateError("cross_attention_merge_backward: no forward cache");
    MergeAttendGrads<T> a = merge_attend_backward(cache.merge, d_out);
    const auto& pi = cache.proj.identity;
    const auto& pt = cache.proj.text;
    TwoStreamGrads<T> g;
    g.d_identity = std::move(a.dq);
    g.identity.dw_q = zeros_like(pi.w_q);
    g.identity.dw_k = matmul_tn(cache.c_id, a.dk_id);
    g.identity.dw_v = matmul_tn(cache.c_id, a.dv_id);
    g.d_c_id = matmul_nt(a.dk_id, pi.w_k);
    g.d_c_id += matmul_nt(a.dv_id, pi.w_v);
    g.text.dw_q = zeros_like(pt.w_q);
    g.text.dw_k = matmul_tn(cache.z_t, a.dk_t);
    g.text.dw_v = matmul_tn(cache.z_t, a.dv_t);
    g.d_text = matmul_nt(a.dk_t, pt.w_k);
    g.d_text += matmul_nt(a.dv_t, pt.w_v);
    return g;
}

#define IDFUSE_INSTANTIATE_ATTENTION(T)                                                                             \
    template void validate(const FeatureMatrix<T>&, const char*);                                                  \
    template Matrix<T> attention(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, AttentionCache<T>*);         \
    template Matrix<T> attention_weights(const Matrix<T>&, const Matrix<T>&);                                       \
    template AttentionGrads<T> attention_backward(const AttentionCache<T>&, const Matrix<T>&);                      \
    template Matrix<T> multihead_attention(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, std::size_t,       \
                                           std::vector<AttentionCache<T>>*);                                        \
    template AttentionGrads<T> multihead_attention_backward(const std::vector<AttentionCache<T>>&, const Matrix<T>&); \
    template std::vector<T> channel_mean(const Matrix<T>&);                                                         \
    template std::vector<T> channel_std(const Matrix<T>&);                                                          \
    template Matrix<T> adain_mean(const Matrix<T>&, const Matrix<T>&);                                              \
    template Matrix<T> adain(const Matrix<T>&, const Matrix<T>&);                                                   \
    template StyleGrads<T> adain_mean_backward(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&);               \
    template StyleGrads<T> adain_backward(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&);                    \
    template Matrix<T> style_align(const Matrix<T>&, const Matrix<T>&, StyleAlign);                                 \
    template StyleGrads<T> style_align_backward(const Matrix<T>&, const Matrix<T>&, StyleAlign, const Matrix<T>&);  \
    template Matrix<T> mixed_attend(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,         \
                                    const Matrix<T>&, StyleAlign, std::size_t, MixedAttendCache<T>*);               \
    template MixedAttendGrads<T> mixed_attend_backward(const MixedAttendCache<T>&, const Matrix<T>&);               \
    template Matrix<T> merge_attend(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,         \
                                    const Matrix<T>&, StyleAlign, bool, std::size_t, MergeAttendCache<T>*);         \
    template MergeAttendGrads<T> merge_attend_backward(const MergeAttendCache<T>&, const Matrix<T>&);               \
    template FeatureMatrix<T> mixed_attention(const FeatureMatrix<T>&, const FeatureMatrix<T>&,                     \
                                              const ProjectionPair<T>&, StyleAlign, TwoStreamCache<T>*);            \
    template TwoStreamGrads<T> mixed_attention_backward(const TwoStreamCache<T>&, const Matrix<T>&);                \
    template FeatureMatrix<T> mutual_attention(const FeatureMatrix<T>&, const FeatureMatrix<T>&,                    \
                                               const ProjectionPair<T>&, TwoStreamCache<T>*);                       \
    template TwoStreamGrads<T> mutual_attention_backward(const TwoStreamCache<T>&, const Matrix<T>&);               \
    template FeatureMatrix<T> cross_attention_merge(const FeatureMatrix<T>&, const Matrix<T>&, const Matrix<T>&,    \
                                                    const ProjectionPair<T>&, StyleAlign, TwoStreamCache<T>*);      \
    template TwoStreamGrads<T> cross_attention_merge_backward(const TwoStreamCache<T>&, const Matrix<T>&);

IDFUSE_INSTANTIATE_ATTENTION(float)
IDFUSE_INSTANTIATE_ATTENTION(double)

#undef IDFUSE_INSTANTIATE_ATTENTION

}  // namespace idfuse
