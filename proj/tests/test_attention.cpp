#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "idfuse/attention.hpp"
#include "support/testing.hpp"

using namespace idfuse;
using idfuse::testing::contract;
using idfuse::testing::numeric_gradient;
using idfuse::testing::random_matrix;
using idfuse::testing::random_size;
using idfuse::testing::relative_error;
using M = Matrix<double>;

namespace {

// Direct loop evaluation of softmax(QK^T/sqrt(d))V, no stabilization.
M naive_attention(const M& q, const M& k, const M& v) {
    M out(q.rows(), v.cols());
    const double scale = 1.0 / std::sqrt(static_cast<double>(k.cols()));
    for (std::size_t i = 0; i < q.rows(); ++i) {
        std::vector<double> w(k.rows());
        double z = 0;
        for (std::size_t j = 0; j < k.rows(); ++j) {
            double s = 0;
            for (std::size_t c = 0; c < k.cols(); ++c) s += q(i, c) * k(j, c);
            w[j] = std::exp(s * scale);
            z += w[j];
        }
        for (std::size_t j = 0; j < k.rows(); ++j)
            for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += w[j] / z * v(j, c);
    }
    return out;
}

M naive_matmul(const M& a, const M& b) {
    M c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j)
            for (std::size_t p = 0; p < a.cols(); ++p) c(i, j) += a(i, p) * b(p, j);
    return c;
}

M stack(const M& a, const M& b) {
    M out(a.rows() + b.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) = a(r, c);
    for (std::size_t r = 0; r < b.rows(); ++r)
        for (std::size_t c = 0; c < b.cols(); ++c) out(a.rows() + r, c) = b(r, c);
    return out;
}

// Mean shift written out per column, independent of adain_mean().
M naive_mean_shift(const M& x, const M& y) {
    M out = x;
    for (std::size_t c = 0; c < x.cols(); ++c) {
        double mx = 0, my = 0;
        for (std::size_t r = 0; r < x.rows(); ++r) mx += x(r, c);
        for (std::size_t r = 0; r < y.rows(); ++r) my += y(r, c);
        mx /= x.rows();
        my /= y.rows();
        for (std::size_t r = 0; r < x.rows(); ++r) out(r, c) = x(r, c) - mx + my;
    }
    return out;
}

ProjectionPair<double> random_pair(std::mt19937_64& rng, std::size_t c_id, std::size_t c_t, std::size_t dk,
                                   std::size_t dv) {
    ProjectionPair<double> p;
    p.identity = {random_matrix(rng, c_id, dk, 0.5), random_matrix(rng, c_id, dk, 0.5), random_matrix(rng, c_id, dv, 0.5)};
    p.text = {random_matrix(rng, c_t, dk, 0.5), random_matrix(rng, c_t, dk, 0.5), random_matrix(rng, c_t, dv, 0.5)};
    return p;
}

FeatureMatrix<double> id_stream(M m) { return {std::move(m), Stream::identity}; }
FeatureMatrix<double> text_stream(M m) { return {std::move(m), Stream::text}; }

}  // namespace

TEST_CASE("scaled dot-product attention: worked examples") {
    CHECK(attention(M{{1, 0}}, M{{1, 0}}, M{{7, 7}}) == M{{7, 7}});
    CHECK(max_abs_diff(attention(M{{0}}, M{{0}, {0}}, M{{2}, {4}}), M{{3}}) < 1e-15);
    const double e = std::exp(1.0);
    const M out = attention(M{{1}}, M{{1}, {0}}, M{{1}, {0}});
    CHECK(out(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-14));
    CHECK(out(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));
}

TEST_CASE("scaled dot-product attention: errors") {
    CHECK_THROWS_AS(attention(M{{1, 0}}, M{{1, 0, 0}}, M{{1}}), ShapeError);
    CHECK_THROWS_AS(attention(M{{1}}, M{{1}, {2}}, M{{1}}), ShapeError);
    CHECK_THROWS_AS(attention(M{{1}}, M(0, 1), M(0, 1)), DegenerateError);
}

TEST_CASE("scaled dot-product attention: large logits stay finite") {
    const M out = attention(M{{1000}}, M{{1000}, {-1000}}, M{{1}, {2}});
    CHECK(out(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("attention weight rows sum to one for random inputs") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) {
        const std::size_t nq = random_size(rng, 1, 8), nk = random_size(rng, 1, 8), d = random_size(rng, 1, 16);
        const M w = attention_weights(random_matrix(rng, nq, d, 2.0), random_matrix(rng, nk, d, 2.0));
        for (std::size_t r = 0; r < w.rows(); ++r) {
            double s = 0;
            for (double v : w.row(r)) s += v;
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("multihead attention equals per-head attention concatenated") {
    std::mt19937_64 rng(2);
    const M q = random_matrix(rng, 5, 8), k = random_matrix(rng, 6, 8), v = random_matrix(rng, 6, 4);
    const M out = multihead_attention(q, k, v, 2);
    const M h0 = naive_attention(slice_cols(q, 0, 4), slice_cols(k, 0, 4), slice_cols(v, 0, 2));
    const M h1 = naive_attention(slice_cols(q, 4, 4), slice_cols(k, 4, 4), slice_cols(v, 2, 2));
    CHECK(max_abs_diff(out, concat_cols(h0, h1)) < 1e-12);
    CHECK_THROWS_AS(multihead_attention(q, k, v, 3), ShapeError);
}

TEST_CASE("channel_mean") {
    CHECK(channel_mean(M{{1}, {2}, {3}}) == std::vector<double>{2});
    CHECK(channel_mean(M{{5, 5}}) == std::vector<double>{5, 5});
    CHECK(channel_mean(M{{1, -1}, {-1, 1}}) == std::vector<double>{0, 0});
    CHECK_THROWS_AS(channel_mean(M(0, 3)), ShapeError);
}

TEST_CASE("adain_mean: worked examples and errors") {
    std::mt19937_64 rng(3);
    const M x = random_matrix(rng, 5, 4);
    CHECK(max_abs_diff(adain_mean(x, x), x) < 1e-15);
    CHECK(max_abs_diff(adain_mean(M{{1}, {2}, {3}}, M{{4}, {5}, {9}}), M{{5}, {6}, {7}}) < 1e-15);
    CHECK_THROWS_AS(adain_mean(M{{1, 2}}, M{{1}}), ShapeError);
}

TEST_CASE("adain_mean properties on random inputs") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        const std::size_t ch = random_size(rng, 1, 16);
        const M x = random_matrix(rng, random_size(rng, 1, 8), ch, 3.0);
        const M y = random_matrix(rng, random_size(rng, 1, 8), ch, 3.0);
        const M out = adain_mean(x, y);
        // output mean equals target mean
        const auto mo = channel_mean(out), my = channel_mean(y);
        for (std::size_t c = 0; c < ch; ++c) CHECK(std::abs(mo[c] - my[c]) <= 1e-9);
        // idempotent in the style target
        CHECK(max_abs_diff(adain_mean(out, y), out) <= 1e-9);
        // per-channel deviations preserved
        const auto mx = channel_mean(x);
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < ch; ++c) CHECK(std::abs((out(r, c) - mo[c]) - (x(r, c) - mx[c])) <= 1e-9);
        // matches the loop oracle
        CHECK(max_abs_diff(out, naive_mean_shift(x, y)) <= 1e-12);
    }
}

TEST_CASE("adain: worked examples, statistics, degenerate input") {
    std::mt19937_64 rng(5);
    const M x = random_matrix(rng, 6, 3);
    CHECK(max_abs_diff(adain(x, x), x) < 1e-12);
    CHECK(max_abs_diff(adain(M{{0}, {2}}, M{{10}, {14}}), M{{10}, {14}}) < 1e-12);
    for (int i = 0; i < 50; ++i) {
        const std::size_t ch = random_size(rng, 1, 16);
        const M a = random_matrix(rng, random_size(rng, 2, 8), ch, 2.0);
        const M b = random_matrix(rng, random_size(rng, 1, 8), ch, 5.0);
        const M out = adain(a, b);
        const auto so = channel_std(out), sb = channel_std(b), mo = channel_mean(out), mb = channel_mean(b);
        for (std::size_t c = 0; c < ch; ++c) {
            CHECK(std::abs(so[c] - sb[c]) <= 1e-6);
            CHECK(std::abs(mo[c] - mb[c]) <= 1e-6);
        }
    }
    CHECK_THROWS_AS(adain(M{{1, 0}, {1, 1}}, M{{0, 0}, {1, 1}}), DegenerateError);
    CHECK_THROWS_AS(adain(M{{1}}, M{{0}, {1}}), DegenerateError);  // single token has zero deviation
}

TEST_CASE("style_align dispatch") {
    const M x{{0}, {2}}, y{{10}, {14}};
    CHECK(style_align(x, y, StyleAlign::off) == x);
    CHECK(style_align(x, y, StyleAlign::adain_mean) == adain_mean(x, y));
    CHECK(style_align(x, y, StyleAlign::adain) == adain(x, y));
    CHECK(style_align_from_string("adain_mean") == StyleAlign::adain_mean);
    CHECK_THROWS_AS(style_align_from_string("bogus"), InputError);
}

TEST_CASE("mixed_attention: empty text stream is plain self-attention") {
    std::mt19937_64 rng(6);
    const M z = random_matrix(rng, 4, 5);
    const auto proj = random_pair(rng, 5, 5, 3, 2);
    const auto out = mixed_attention(id_stream(z), text_stream(M(0, 5)), proj, StyleAlign::off);
    const M q = naive_matmul(z, proj.identity.w_q), k = naive_matmul(z, proj.identity.w_k),
            v = naive_matmul(z, proj.identity.w_v);
    CHECK(max_abs_diff(out.data, naive_attention(q, k, v)) <= 1e-12);
    CHECK(out.stream == Stream::identity);
}

TEST_CASE("mixed_attention matches concat-then-attend, with and without mean shift") {
    std::mt19937_64 rng(7);
    const M z_id = random_matrix(rng, 4, 6), z_t = random_matrix(rng, 3, 5);
    const auto proj = random_pair(rng, 6, 5, 4, 3);
    const M q = naive_matmul(z_id, proj.identity.w_q);
    const M k_id = naive_matmul(z_id, proj.identity.w_k), v_id = naive_matmul(z_id, proj.identity.w_v);
    const M k_t = naive_matmul(z_t, proj.text.w_k), v_t = naive_matmul(z_t, proj.text.w_v);

    const auto plain = mixed_attention(id_stream(z_id), text_stream(z_t), proj, StyleAlign::off);
    CHECK(max_abs_diff(plain.data, naive_attention(q, stack(k_id, k_t), stack(v_id, v_t))) <= 1e-6);

    const auto styled = mixed_attention(id_stream(z_id), text_stream(z_t), proj, StyleAlign::adain_mean);
    const M oracle = naive_attention(q, stack(naive_mean_shift(k_id, k_t), k_t), stack(naive_mean_shift(v_id, v_t), v_t));
    CHECK(max_abs_diff(styled.data, oracle) <= 1e-6);
}

TEST_CASE("mixed_attention: 100 random instances against the oracle") {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        const std::size_t ci = random_size(rng, 1, 16), ct = random_size(rng, 1, 16);
        const std::size_t dk = random_size(rng, 1, 16), dv = random_size(rng, 1, 16);
        const M z_id = random_matrix(rng, random_size(rng, 1, 8), ci);
        const M z_t = random_matrix(rng, random_size(rng, 1, 8), ct);
        const auto proj = random_pair(rng, ci, ct, dk, dv);
        const auto out = mixed_attention(id_stream(z_id), text_stream(z_t), proj, StyleAlign::off);
        const M oracle = naive_attention(naive_matmul(z_id, proj.identity.w_q),
                                         stack(naive_matmul(z_id, proj.identity.w_k), naive_matmul(z_t, proj.text.w_k)),
                                         stack(naive_matmul(z_id, proj.identity.w_v), naive_matmul(z_t, proj.text.w_v)));
        CHECK(max_abs_diff(out.data, oracle) <= 1e-6);
    }
}

TEST_CASE("mixed_attention is invariant to the order of text tokens") {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 20; ++i) {
        const M z_id = random_matrix(rng, 5, 6), z_t = random_matrix(rng, 6, 6);
        const auto proj = random_pair(rng, 6, 6, 4, 4);
        std::vector<std::size_t> perm(z_t.rows());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        M permuted(z_t.rows(), z_t.cols());
        for (std::size_t r = 0; r < perm.size(); ++r)
            for (std::size_t c = 0; c < z_t.cols(); ++c) permuted(r, c) = z_t(perm[r], c);
        for (StyleAlign s : {StyleAlign::off, StyleAlign::adain_mean}) {
            const auto a = mixed_attention(id_stream(z_id), text_stream(z_t), proj, s);
            const auto b = mixed_attention(id_stream(z_id), text_stream(permuted), proj, s);
            CHECK(max_abs_diff(a.data, b.data) <= 1e-6);
        }
    }
}

TEST_CASE("mixed_attention: shape and stream errors") {
    std::mt19937_64 rng(10);
    const M z_id = random_matrix(rng, 3, 4), z_t = random_matrix(rng, 2, 4);
    auto proj = random_pair(rng, 4, 4, 3, 3);
    proj.text.w_k = random_matrix(rng, 4, 2);
    CHECK_THROWS_AS(mixed_attention(id_stream(z_id), text_stream(z_t), proj, StyleAlign::off), ShapeError);
    const auto ok = random_pair(rng, 4, 4, 3, 3);
    CHECK_THROWS_AS(mixed_attention(text_stream(z_id), text_stream(z_t), ok, StyleAlign::off), InputError);
    CHECK_THROWS_AS(mixed_attention(id_stream(M(0, 4)), text_stream(z_t), ok, StyleAlign::off), ShapeError);
}

TEST_CASE("mutual_attention") {
    std::mt19937_64 rng(11);
    const M z = random_matrix(rng, 5, 4);
    auto proj = random_pair(rng, 4, 4, 3, 3);
    proj.text = proj.identity;
    // Replacing keys/values by identical features is plain self-attention.
    const auto same = mutual_attention(id_stream(z), text_stream(z), proj);
    const M self = naive_attention(naive_matmul(z, proj.identity.w_q), naive_matmul(z, proj.identity.w_k),
                                   naive_matmul(z, proj.identity.w_v));
    CHECK(max_abs_diff(same.data, self) <= 1e-12);

    for (int i = 0; i < 100; ++i) {
        const M z_id = random_matrix(rng, random_size(rng, 1, 8), 6);
        const M z_t = random_matrix(rng, random_size(rng, 1, 8), 5);
        const auto p = random_pair(rng, 6, 5, 4, 2);
        const auto out = mutual_attention(id_stream(z_id), text_stream(z_t), p);
        CHECK(out.tokens() == z_id.rows());
        const M oracle = naive_attention(naive_matmul(z_id, p.identity.w_q), naive_matmul(z_t, p.text.w_k),
                                         naive_matmul(z_t, p.text.w_v));
        CHECK(max_abs_diff(out.data, oracle) <= 1e-6);
    }
    CHECK_THROWS_AS(mutual_attention(id_stream(z), text_stream(M(0, 4)), proj), DegenerateError);
}

TEST_CASE("cross_attention_merge") {
    std::mt19937_64 rng(12);
    const M q = random_matrix(rng, 6, 4);
    const M c = random_matrix(rng, 3, 8);
    auto proj = random_pair(rng, 8, 8, 4, 4);
    proj.text = proj.identity;
    const M single = naive_attention(q, naive_matmul(c, proj.identity.w_k), naive_matmul(c, proj.identity.w_v));
    const auto doubled = cross_attention_merge(id_stream(q), c, c, proj, StyleAlign::off);
    CHECK(max_abs_diff(doubled.data, single * 2.0) <= 1e-12);

    for (int i = 0; i < 100; ++i) {
        const M qq = random_matrix(rng, random_size(rng, 1, 8), 4);
        const M c_id = random_matrix(rng, random_size(rng, 1, 8), 7);
        const M c_t = random_matrix(rng, random_size(rng, 1, 8), 5);
        const auto p = random_pair(rng, 7, 5, 4, 3);
        const M k_id = naive_matmul(c_id, p.identity.w_k), v_id = naive_matmul(c_id, p.identity.w_v);
        const M k_t = naive_matmul(c_t, p.text.w_k), v_t = naive_matmul(c_t, p.text.w_v);
        const auto out = cross_attention_merge(id_stream(qq), c_id, c_t, p, StyleAlign::off);
        CHECK(max_abs_diff(out.data, naive_attention(qq, k_id, v_id) + naive_attention(qq, k_t, v_t)) <= 1e-6);

        const auto styled = cross_attention_merge(id_stream(qq), c_id, c_t, p, StyleAlign::adain_mean);
        const M k_shift = naive_mean_shift(k_id, k_t), v_shift = naive_mean_shift(v_id, v_t);
        CHECK(max_abs_diff(styled.data, naive_attention(qq, k_shift, v_shift) + naive_attention(qq, k_t, v_t)) <= 1e-6);
        const auto ms = channel_mean(k_shift), mt = channel_mean(k_t);
        for (std::size_t ch = 0; ch < ms.size(); ++ch) CHECK(std::abs(ms[ch] - mt[ch]) <= 1e-9);
    }
    CHECK_THROWS_AS(cross_attention_merge(id_stream(q), M(0, 8), c, proj, StyleAlign::off), ShapeError);
}

// ---------------------------------------------------------------------------
// Gradients against central finite differences (step 1e-5, relative error 1e-4).

namespace {
constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;
}  // namespace

TEST_CASE("attention backward matches finite differences") {
    std::mt19937_64 rng(20);
    M q = random_matrix(rng, 2, 3), k = random_matrix(rng, 2, 3), v = random_matrix(rng, 2, 2);
    const M up = random_matrix(rng, 2, 2);
    AttentionCache<double> cache;
    attention(q, k, v, &cache);
    const auto g = attention_backward(cache, up);
    auto f = [&] { return contract(up, attention(q, k, v)); };
    CHECK(relative_error(g.dq, numeric_gradient(&q, f, kStep)) <= kTol);
    CHECK(relative_error(g.dk, numeric_gradient(&k, f, kStep)) <= kTol);
    CHECK(relative_error(g.dv, numeric_gradient(&v, f, kStep)) <= kTol);
}

TEST_CASE("multihead attention backward matches finite differences") {
    std::mt19937_64 rng(21);
    M q = random_matrix(rng, 3, 4), k = random_matrix(rng, 5, 4), v = random_matrix(rng, 5, 6);
    const M up = random_matrix(rng, 3, 6);
    std::vector<AttentionCache<double>> caches;
    multihead_attention(q, k, v, 2, &caches);
    const auto g = multihead_attention_backward(caches, up);
    auto f = [&] { return contract(up, multihead_attention(q, k, v, 2)); };
    CHECK(relative_error(g.dq, numeric_gradient(&q, f, kStep)) <= kTol);
    CHECK(relative_error(g.dk, numeric_gradient(&k, f, kStep)) <= kTol);
    CHECK(relative_error(g.dv, numeric_gradient(&v, f, kStep)) <= kTol);
}

TEST_CASE("adain_mean backward: hand-derived form and finite differences") {
    std::mt19937_64 rng(22);
    M x = random_matrix(rng, 4, 3), y = random_matrix(rng, 5, 3);
    // constant upstream: the centering projection annihilates it
    const M ones(4, 3, 1.0);
    const auto gc = adain_mean_backward(x, y, ones);
    CHECK(max_abs_diff(gc.dx, M(4, 3)) <= 1e-15);
    // dy = column sums / n_y = 4/5 for a constant upstream of ones
    CHECK(max_abs_diff(gc.dy, M(5, 3, 0.8)) <= 1e-15);

    const M up = random_matrix(rng, 4, 3);
    const auto g = adain_mean_backward(x, y, up);
    M centered = up;
    const auto mu = channel_mean(up);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) centered(r, c) -= mu[c];
    CHECK(max_abs_diff(g.dx, centered) <= 1e-14);
    auto f = [&] { return contract(up, adain_mean(x, y)); };
    CHECK(relative_error(g.dx, numeric_gradient(&x, f, kStep)) <= kTol);
    CHECK(relative_error(g.dy, numeric_gradient(&y, f, kStep)) <= kTol);
}

TEST_CASE("adain backward matches finite differences") {
    std::mt19937_64 rng(23);
    M x = random_matrix(rng, 5, 3), y = random_matrix(rng, 4, 3, 2.0);
    const M up = random_matrix(rng, 5, 3);
    const auto g = adain_backward(x, y, up);
    auto f = [&] { return contract(up, adain(x, y)); };
    CHECK(relative_error(g.dx, numeric_gradient(&x, f, kStep)) <= kTol);
    CHECK(relative_error(g.dy, numeric_gradient(&y, f, kStep)) <= kTol);
}

namespace {

void check_projection_grads(ProjectionGrads<double> g, Projections<double>* p, const std::function<double()>& f,
                            bool check_q) {
    if (check_q && !p->w_q.empty()) CHECK(relative_error(g.dw_q, numeric_gradient(&p->w_q, f, kStep)) <= kTol);
    CHECK(relative_error(g.dw_k, numeric_gradient(&p->w_k, f, kStep)) <= kTol);
    CHECK(relative_error(g.dw_v, numeric_gradient(&p->w_v, f, kStep)) <= kTol);
}

}  // namespace

TEST_CASE("mixed_attention backward matches finite differences for every style mode") {
    std::mt19937_64 rng(24);
    for (StyleAlign style : {StyleAlign::off, StyleAlign::adain_mean, StyleAlign::adain}) {
        CAPTURE(to_string(style));
        M z_id = random_matrix(rng, 4, 5), z_t = random_matrix(rng, 3, 4);
        auto proj = random_pair(rng, 5, 4, 3, 2);
        const M up = random_matrix(rng, 4, 2);
        TwoStreamCache<double> cache;
        mixed_attention(id_stream(z_id), text_stream(z_t), proj, style, &cache);
        const auto g = mixed_attention_backward(cache, up);
        auto f = [&] { return contract(up, mixed_attention(id_stream(z_id), text_stream(z_t), proj, style).data); };
        CHECK(relative_error(g.d_identity, numeric_gradient(&z_id, f, kStep)) <= kTol);
        CHECK(relative_error(g.d_text, numeric_gradient(&z_t, f, kStep)) <= kTol);
        check_projection_grads(g.identity, &proj.identity, f, true);
        check_projection_grads(g.text, &proj.text, f, false);
    }
}

TEST_CASE("mutual_attention backward matches finite differences") {
    std::mt19937_64 rng(25);
    M z_id = random_matrix(rng, 3, 4), z_t = random_matrix(rng, 5, 6);
    auto proj = random_pair(rng, 4, 6, 3, 2);
    const M up = random_matrix(rng, 3, 2);
    TwoStreamCache<double> cache;
    mutual_attention(id_stream(z_id), text_stream(z_t), proj, &cache);
    const auto g = mutual_attention_backward(cache, up);
    auto f = [&] { return contract(up, mutual_attention(id_stream(z_id), text_stream(z_t), proj).data); };
    CHECK(relative_error(g.d_identity, numeric_gradient(&z_id, f, kStep)) <= kTol);
    CHECK(relative_error(g.d_text, numeric_gradient(&z_t, f, kStep)) <= kTol);
    CHECK(relative_error(g.identity.dw_q, numeric_gradient(&proj.identity.w_q, f, kStep)) <= kTol);
    check_projection_grads(g.text, &proj.text, f, false);
}

TEST_CASE("cross_attention_merge backward matches finite differences for every style mode") {
    std::mt19937_64 rng(26);
    for (StyleAlign style : {StyleAlign::off, StyleAlign::adain_mean, StyleAlign::adain}) {
        CAPTURE(to_string(style));
        M q = random_matrix(rng, 4, 3), c_id = random_matrix(rng, 3, 5), c_t = random_matrix(rng, 4, 6);
        auto proj = random_pair(rng, 5, 6, 3, 2);
        const M up = random_matrix(rng, 4, 2);
        TwoStreamCache<double> cache;
        cross_attention_merge(id_stream(q), c_id, c_t, proj, style, &cache);
        const auto g = cross_attention_merge_backward(cache, up);
        auto f = [&] { return contract(up, cross_attention_merge(id_stream(q), c_id, c_t, proj, style).data); };
        CHECK(relative_error(g.d_identity, numeric_gradient(&q, f, kStep)) <= kTol);
        CHECK(relative_error(g.d_c_id, numeric_gradient(&c_id, f, kStep)) <= kTol);
        CHECK(relative_error(g.d_text, numeric_gradient(&c_t, f, kStep)) <= kTol);
        check_projection_grads(g.identity, &proj.identity, f, false);
        check_projection_grads(g.text, &proj.text, f, false);
    }
}

TEST_CASE("zero upstream gives zero gradients; missing cache is a state error") {
    std::mt19937_64 rng(27);
    const M z_id = random_matrix(rng, 3, 4), z_t = random_matrix(rng, 2, 4);
    const auto proj = random_pair(rng, 4, 4, 3, 3);
    TwoStreamCache<double> cache;
    mixed_attention(id_stream(z_id), text_stream(z_t), proj, StyleAlign::adain_mean, &cache);
    const auto g = mixed_attention_backward(cache, M(3, 3));
    CHECK(max_abs_diff(g.d_identity, M(3, 4)) == 0.0);
    CHECK(max_abs_diff(g.d_text, M(2, 4)) == 0.0);
    CHECK(max_abs_diff(g.identity.dw_k, M(4, 3)) == 0.0);

    CHECK_THROWS_AS(attention_backward(AttentionCache<double>{}, M(1, 1)), StateError);
    CHECK_THROWS_AS(mixed_attention_backward(TwoStreamCache<double>{}, M(1, 1)), StateError);
    CHECK_THROWS_AS(mutual_attention_backward(TwoStreamCache<double>{}, M(1, 1)), StateError);
    CHECK_THROWS_AS(cross_attention_merge_backward(TwoStreamCache<double>{}, M(1, 1)), StateError);
}
