#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "idfuse/graph.hpp"
#include "support/testing.hpp"

using namespace idfuse;
using idfuse::testing::contract;
using idfuse::testing::numeric_gradient;
using idfuse::testing::random_matrix;
using idfuse::testing::relative_error;
using M = Matrix<double>;
using G = Graph<double>;
using Id = G::Id;

namespace {

using Builder = std::function<Id(G&, const std::vector<Id>&)>;

Id forward(const Builder& build, std::vector<M>& inputs, G& g, std::vector<M>* grads) {
    std::vector<Id> ids;
    for (std::size_t i = 0; i < inputs.size(); ++i) ids.push_back(g.parameter(inputs[i], grads ? &(*grads)[i] : nullptr));
    return build(g, ids);
}

// Analytic gradients of <upstream, f(inputs)> against central differences, for every input.
void check_gradients(const Builder& build, std::vector<M> inputs, std::uint64_t seed, double tol = 1e-4) {
    std::mt19937_64 rng(seed);
    std::vector<M> grads;
    for (const auto& x : inputs) grads.emplace_back(x.rows(), x.cols());
    G g;
    const Id out = forward(build, inputs, g, &grads);
    const M up = random_matrix(rng, g.value(out).rows(), g.value(out).cols());
    g.backward(out, up);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto objective = [&] {
            G h(false);
            const Id o = forward(build, inputs, h, nullptr);
            return contract(up, h.value(o));
        };
        const M fd = numeric_gradient(&inputs[i], objective);
        INFO("input " << i);
        CHECK(relative_error(grads[i], fd) <= tol);
    }
}

M eval(const Builder& build, std::vector<M> inputs) {
    G g(false);
    return g.value(forward(build, inputs, g, nullptr));
}

double max_abs_diff(const M& a, const M& b) {
    REQUIRE(a.same_shape(b));
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// Zero-padded 3x3 convolution written as four nested loops.
M naive_conv(const M& x, const M& w, const M& b, std::size_t h, std::size_t wd) {
    const std::size_t cin = x.cols(), cout = w.cols();
    M out(h * wd, cout);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx)
            for (std::size_t o = 0; o < cout; ++o) {
                double s = b(0, o);
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const long sy = long(y) + ky - 1, sx = long(xx) + kx - 1;
                        if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(wd)) continue;
                        for (std::size_t c = 0; c < cin; ++c)
                            s += x(sy * wd + sx, c) * w((ky * 3 + kx) * cin + c, o);
                    }
                out(y * wd + xx, o) = s;
            }
    return out;
}

}  // namespace

TEST_CASE("forward values against direct formulas") {
    std::mt19937_64 rng(1);
    const M a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2), r = random_matrix(rng, 1, 4);

    const M mm = eval([](G& g, auto& v) { return g.matmul(v[0], v[1]); }, {a, b});
    CHECK(mm(2, 1) == doctest::Approx(a(2, 0) * b(0, 1) + a(2, 1) * b(1, 1) + a(2, 2) * b(2, 1) + a(2, 3) * b(3, 1)));

    const M ar = eval([](G& g, auto& v) { return g.add_row(v[0], v[1]); }, {a, r});
    CHECK(ar(1, 3) == doctest::Approx(a(1, 3) + r(0, 3)));

    const M cc = eval([](G& g, auto& v) { return g.concat_cols(v[0], v[1]); }, {a, a});
    CHECK(cc.cols() == 8);
    CHECK(cc(1, 5) == a(1, 1));
    const M cr = eval([](G& g, auto& v) { return g.concat_rows(v[0], v[1]); }, {a, r});
    CHECK(cr.rows() == 4);
    CHECK(cr(3, 2) == r(0, 2));

    const M si = eval([](G& g, auto& v) { return g.silu(v[0]); }, {a});
    CHECK(si(0, 0) == doctest::Approx(a(0, 0) / (1 + std::exp(-a(0, 0)))));

    const M ln = eval([](G& g, auto& v) { return g.layer_norm(v[0]); }, {a});
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 4; ++c) mean += a(1, c) / 4;
    for (std::size_t c = 0; c < 4; ++c) var += (a(1, c) - mean) * (a(1, c) - mean) / 4;
    CHECK(ln(1, 2) == doctest::Approx((a(1, 2) - mean) / std::sqrt(var + 1e-5)));

    // Group norm: statistics over every token and the channels of one group.
    const M x = random_matrix(rng, 5, 6);
    const M gn = eval([](G& g, auto& v) { return g.group_norm(v[0], 3); }, {x});
    mean = var = 0;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t c = 2; c < 4; ++c) mean += x(t, c) / 10;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t c = 2; c < 4; ++c) var += (x(t, c) - mean) * (x(t, c) - mean) / 10;
    CHECK(gn(4, 3) == doctest::Approx((x(4, 3) - mean) / std::sqrt(var + 1e-5)));

    const M img = random_matrix(rng, 4 * 6, 2), w = random_matrix(rng, 18, 3), bias = random_matrix(rng, 1, 3);
    const M cv = eval([](G& g, auto& v) { return g.conv3x3(v[0], v[1], v[2], 4, 6); }, {img, w, bias});
    CHECK(max_abs_diff(cv, naive_conv(img, w, bias, 4, 6)) <= 1e-12);

    const M pool = eval([](G& g, auto& v) { return g.avgpool2(v[0], 4, 6); }, {img});
    CHECK(pool.rows() == 6);
    CHECK(pool(1 * 3 + 2, 1) == doctest::Approx((img(2 * 6 + 4, 1) + img(2 * 6 + 5, 1) + img(3 * 6 + 4, 1) + img(3 * 6 + 5, 1)) / 4));
    const M up = eval([](G& g, auto& v) { return g.upsample2(v[0], 4, 6); }, {img});
    CHECK(up.rows() == 96);
    CHECK(up(5 * 12 + 7, 0) == img(2 * 6 + 3, 0));
}

TEST_CASE("graph attention nodes agree with the attention core") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const M q = random_matrix(rng, 5, 4), k = random_matrix(rng, 5, 4), v = random_matrix(rng, 5, 4);
        const M kt = random_matrix(rng, 3, 4), vt = random_matrix(rng, 3, 4);
        const auto style = static_cast<StyleAlign>(trial % 3);
        const std::size_t heads = 1 + trial % 2;
        CHECK(max_abs_diff(eval([&](G& g, auto& x) { return g.attention(x[0], x[1], x[2], heads); }, {q, k, v}),
                           multihead_attention(q, k, v, heads)) <= 1e-12);
        CHECK(max_abs_diff(eval([&](G& g, auto& x) { return g.mixed_attend(x[0], x[1], x[2], x[3], x[4], style, heads); },
                                {q, k, v, kt, vt}),
                           mixed_attend(q, k, v, kt, vt, style, heads)) <= 1e-12);
        CHECK(max_abs_diff(
                  eval([&](G& g, auto& x) { return g.merge_attend(x[0], x[1], x[2], x[3], x[4], style, true, heads); },
                       {q, k, v, kt, vt}),
                  merge_attend(q, k, v, kt, vt, style, true, heads)) <= 1e-12);
    }
}

TEST_CASE("every graph op: analytic gradients match central differences") {
    std::mt19937_64 rng(3);
    auto R = [&](std::size_t r, std::size_t c) { return random_matrix(rng, r, c); };
    check_gradients([](G& g, auto& v) { return g.matmul(v[0], v[1]); }, {R(3, 4), R(4, 2)}, 10);
    check_gradients([](G& g, auto& v) { return g.add_row(v[0], v[1]); }, {R(3, 4), R(1, 4)}, 11);
    check_gradients([](G& g, auto& v) { return g.add(v[0], v[1]); }, {R(3, 4), R(3, 4)}, 12);
    check_gradients([](G& g, auto& v) { return g.concat_cols(v[0], v[1]); }, {R(3, 2), R(3, 4)}, 13);
    check_gradients([](G& g, auto& v) { return g.concat_rows(v[0], v[1]); }, {R(2, 3), R(4, 3)}, 14);
    check_gradients([](G& g, auto& v) { return g.silu(v[0]); }, {R(3, 5)}, 15);
    check_gradients([](G& g, auto& v) { return g.layer_norm(v[0]); }, {R(3, 6)}, 16);
    check_gradients([](G& g, auto& v) { return g.group_norm(v[0], 2); }, {R(6, 4)}, 17);
    check_gradients([](G& g, auto& v) { return g.conv3x3(v[0], v[1], v[2], 3, 4); }, {R(12, 2), R(18, 3), R(1, 3)}, 18);
    check_gradients([](G& g, auto& v) { return g.avgpool2(v[0], 4, 4); }, {R(16, 3)}, 19);
    check_gradients([](G& g, auto& v) { return g.upsample2(v[0], 2, 3); }, {R(6, 2)}, 20);
    check_gradients([](G& g, auto& v) { return g.attention(v[0], v[1], v[2], 2); }, {R(3, 4), R(5, 4), R(5, 4)}, 21);
    for (auto style : {StyleAlign::off, StyleAlign::adain_mean, StyleAlign::adain}) {
        check_gradients([&](G& g, auto& v) { return g.mixed_attend(v[0], v[1], v[2], v[3], v[4], style, 2); },
                        {R(4, 4), R(4, 4), R(4, 4), R(3, 4), R(3, 4)}, 22);
        for (bool text : {true, false})
            check_gradients(
                [&](G& g, auto& v) { return g.merge_attend(v[0], v[1], v[2], v[3], v[4], style, text, 2); },
                {R(4, 4), R(3, 4), R(3, 4), R(5, 4), R(5, 4)}, 23);
    }
    check_gradients([](G& g, auto& v) { return g.merge_attend(v[0], v[1], v[2], G::none, G::none, StyleAlign::off, false, 1); },
                    {R(4, 4), R(3, 4), R(3, 4)}, 24);
}

TEST_CASE("a small composed network: gradients through every layer kind") {
    std::mt19937_64 rng(4);
    auto R = [&](std::size_t r, std::size_t c) { return random_matrix(rng, r, c, 0.5); };
    const Builder net = [](G& g, auto& v) {
        Id h = g.conv3x3(v[0], v[1], v[2], 4, 4);
        h = g.silu(g.group_norm(h, 2));
        const Id q = g.matmul(g.layer_norm(h), v[3]);
        h = g.add(h, g.merge_attend(q, g.matmul(v[4], v[3]), v[4], G::none, G::none, StyleAlign::off, false, 1));
        h = g.avgpool2(h, 4, 4);
        return g.upsample2(h, 2, 2);
    };
    check_gradients(net, {R(16, 2), R(18, 4), R(1, 4), R(4, 4), R(3, 4)}, 30);
}

TEST_CASE("frozen inputs carry no gradient and cost no backward work") {
    std::mt19937_64 rng(5);
    M a = random_matrix(rng, 3, 3), b = random_matrix(rng, 3, 3), ga(3, 3);
    G g;
    const Id pa = g.parameter(a, &ga);
    const Id pb = g.parameter(b, nullptr);
    const Id frozen = g.silu(g.matmul(pb, pb));
    CHECK_FALSE(g.requires_grad(frozen));
    const Id out = g.add(g.matmul(pa, pb), frozen);
    CHECK(g.requires_grad(out));
    g.backward(out, M(3, 3, 1.0));
    // d/dA sum(A B) = 1 B^T
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(ga(i, j) == doctest::Approx(b(j, 0) + b(j, 1) + b(j, 2)));
    // Accumulates across calls.
    G g2;
    const Id p2 = g2.parameter(a, &ga);
    g2.backward(g2.silu(p2), M(3, 3, 0.0));
    CHECK(ga(0, 0) == doctest::Approx(b(0, 0) + b(0, 1) + b(0, 2)));
    G g3(false);
    const Id p3 = g3.parameter(a, &ga);
    CHECK_THROWS_AS(g3.backward(p3, M(3, 3, 1.0)), StateError);
    CHECK_THROWS_AS(g.matmul(pa, g.constant(M(2, 2))), ShapeError);
}
