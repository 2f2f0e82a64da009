#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "idfuse/inference.hpp"
#include "idfuse/synthetic.hpp"

using namespace idfuse;

namespace {

UNetConfig small_unet() {
    UNetConfig c;
    c.latent_size = 8;
    c.base_channels = 16;
    c.channel_multipliers = {1, 2};
    c.attention_resolutions = {8, 4};
    c.d_model = 32;
    c.heads = 2;
    c.groups = 4;
    return c;
}

EncoderConfig small_encoders() {
    EncoderConfig e;
    e.clip_tokens = 4;
    e.clip_dim = 8;
    e.face_dim = 6;
    e.align_size = 16;
    return e;
}

Image sprite(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto id = sample_identity(rng);
    return render_sprite(id, sample_variant(rng), 16);
}

struct Fixture {
    UNetConfig cfg = small_unet();
    NoiseSchedule sched = make_noise_schedule(100, 1e-3, 0.05);
    ParamStore params = init_model(cfg, 8, 6, 11);
    UNet unet{cfg, params, sched};
    Encoders enc = make_encoders(small_encoders(), 32);
    GenerationModel model{unet, enc, mappers_from(params), 2, "digest"};

    GenerationRequest request(GenerationVariant v = GenerationVariant::mixed_attention) const {
        GenerationRequest r;
        r.prompt = "a photo of a person";
        r.id_images = {sprite(1)};
        r.seed = 3;
        r.steps = 4;
        r.variant = v;
        return r;
    }
};

double max_diff(const Matrix<float>& a, const Matrix<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("classifier-free guidance: worked values") {
    const Matrix<float> cond(1, 3, std::vector<float>{2.f, -1.f, 0.5f});
    const Matrix<float> uncond(1, 3, std::vector<float>{1.f, 1.f, 0.5f});
    CHECK(classifier_free_guidance(cond, uncond, 0.0) == uncond);
    CHECK(classifier_free_guidance(cond, uncond, 1.0) == cond);
    const auto g = classifier_free_guidance(cond, uncond, 5.0);
    CHECK(g(0, 0) == doctest::Approx(6.0));
    CHECK(g(0, 1) == doctest::Approx(-9.0));
    CHECK(g(0, 2) == doctest::Approx(0.5));
    CHECK_THROWS_AS(classifier_free_guidance(cond, Matrix<float>(1, 2), 1.0), ShapeError);
}

TEST_CASE("request validation") {
    Fixture f;
    CHECK_NOTHROW(validate(f.request()));
    auto r = f.request();
    r.steps = 0;
    CHECK_THROWS_AS(validate(r), InputError);
    r = f.request();
    r.guidance_scale = -1;
    CHECK_THROWS_AS(validate(r), InputError);
    r = f.request();
    r.id_images.clear();
    CHECK_THROWS_AS(validate(r), InputError);
    r.variant = GenerationVariant::text_only;
    CHECK_NOTHROW(validate(r));
    r = f.request();
    r.prompt = "   ";
    CHECK_THROWS_AS(validate(r), InputError);
    r.merge_cross_attention = false;
    CHECK_NOTHROW(validate(r));
    r = f.request();
    r.mix_weights = {0.5, 0.5};
    CHECK_THROWS_AS(validate(r), InputError);
    r = f.request();
    r.id_sources = {"a", "b"};
    CHECK_THROWS_AS(validate(r), InputError);
    CHECK_THROWS_AS(generation_variant_from_string("fancy"), InputError);
    CHECK(generation_variant_from_string("mutual_attention") == GenerationVariant::mutual_attention);

    // Fusion consumes the text stream; asking to skip it is a usage error.
    r = f.request();
    r.run_text_stream = false;
    CHECK_THROWS_AS(generate(r, f.model), StateError);
}

TEST_CASE("lockstep: one capture set per step for fusion variants") {
    Fixture f;
    for (auto v : {GenerationVariant::mixed_attention, GenerationVariant::mutual_attention,
                   GenerationVariant::no_mixed_attention, GenerationVariant::text_only}) {
        const auto res = generate(f.request(v), f.model);
        const auto& p = res.provenance;
        REQUIRE(p.steps.size() == 4);
        const bool fusion = v == GenerationVariant::mixed_attention || v == GenerationVariant::mutual_attention;
        for (std::size_t i = 0; i < p.steps.size(); ++i) {
            CHECK(p.steps[i].captures == (fusion ? 1u : 0u));
            if (i > 0) CHECK(p.steps[i].t == p.steps[i - 1].t_prev);
        }
        CHECK(p.steps.front().t == 100);
        CHECK(p.steps.back().t_prev == 0);
        CHECK(p.text_stream_ran == (v != GenerationVariant::text_only));
        CHECK(p.identity_tokens == (v == GenerationVariant::text_only ? 0u : 5u));
        CHECK(p.variant == to_string(v));
        CHECK(p.site_tokens == f.unet.self_attention_tokens());
        CHECK(res.image.height == 16);
        CHECK(res.image.pixels.size() == 16 * 16 * 3);
    }
}

TEST_CASE("generation is a function of the seed") {
    Fixture f;
    const auto a = generate(f.request(), f.model);
    const auto b = generate(f.request(), f.model);
    CHECK(a.latent == b.latent);
    CHECK(quantize8(a.image) == quantize8(b.image));
    auto r = f.request();
    r.seed = 4;
    CHECK_FALSE(generate(r, f.model).latent == a.latent);
}

TEST_CASE("variants produce distinct outputs") {
    Fixture f;
    const auto mixed = generate(f.request(GenerationVariant::mixed_attention), f.model).latent;
    const auto mutual = generate(f.request(GenerationVariant::mutual_attention), f.model).latent;
    const auto plain = generate(f.request(GenerationVariant::no_mixed_attention), f.model).latent;
    const auto text = generate(f.request(GenerationVariant::text_only), f.model).latent;
    CHECK_FALSE(mixed == mutual);
    CHECK_FALSE(mixed == plain);
    CHECK_FALSE(plain == text);
    auto r = f.request();
    r.style = StyleAlign::adain_mean;
    CHECK_FALSE(generate(r, f.model).latent == mixed);
    r.style = StyleAlign::adain;
    CHECK(generate(r, f.model).provenance.style == "adain");
}

TEST_CASE("no_mixed_attention without merging matches a hand-rolled single-stream sampler") {
    Fixture f;
    auto r = f.request(GenerationVariant::no_mixed_attention);
    r.merge_cross_attention = false;
    r.negative_prompt = "blurry";
    const auto res = generate(r, f.model);

    const auto emb = extract_identity_embedding(r.id_images[0], *f.enc.clip, *f.enc.face, f.model.mappers, 16, "x");
    const auto c_neg = f.enc.text.encode("blurry");
    std::mt19937_64 rng(r.seed);
    Latent z = gaussian_latent(8, 8, 4, rng);
    const auto ts = ddim_timesteps(f.sched, 4);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int tp = i + 1 < ts.size() ? ts[i + 1] : 0;
        const Latent cond = f.unet.forward(z, ts[i], {emb.tokens, {}, true});
        const Latent uncond = f.unet.forward(z, ts[i], {{}, c_neg, true});
        Latent guided = cond;
        for (std::size_t k = 0; k < guided.data.size(); ++k) {
            const double u = uncond.data.data()[k];
            guided.data.data()[k] = static_cast<float>(u + 5.0 * (cond.data.data()[k] - u));
        }
        z = ddim_step(z, guided, ts[i], tp, f.sched);
    }
    CHECK(max_diff(res.latent.data, z.data) <= 1e-6);

    // Without merging or fusion, the prompt cannot reach the identity stream.
    r.prompt = "something else entirely";
    CHECK(generate(r, f.model).latent == res.latent);
    // Nor does skipping the text stream change anything.
    r.run_text_stream = false;
    const auto skipped = generate(r, f.model);
    CHECK(skipped.latent == res.latent);
    CHECK_FALSE(skipped.provenance.text_stream_ran);
}

TEST_CASE("mixed attention carries the prompt through the captured keys and values") {
    Fixture f;
    auto r = f.request();
    r.merge_cross_attention = false;
    const auto a = generate(r, f.model).latent;
    r.prompt = "something else entirely";
    CHECK_FALSE(generate(r, f.model).latent == a);
}

TEST_CASE("multiple identities: stacking and mixing") {
    Fixture f;
    auto r = f.request();
    r.id_images = {sprite(1), sprite(2)};
    r.id_sources = {"alice", "bob"};
    const auto stacked = generate(r, f.model);
    CHECK(stacked.provenance.identity_tokens == 10);
    CHECK(stacked.provenance.source_ids == std::vector<std::string>{"alice", "bob"});

    r.mix_weights = {1.0, 0.0};
    const auto mixed = generate(r, f.model);
    CHECK(mixed.provenance.identity_tokens == 5);
    CHECK(mixed.provenance.mix_weights == std::vector<double>{1.0, 0.0});
    const auto single = generate(f.request(), f.model);
    CHECK(max_diff(mixed.latent.data, single.latent.data) <= 1e-6);

    r.mix_weights = {0.7, 0.7};
    CHECK_THROWS_AS(generate(r, f.model), InputError);
}

TEST_CASE("provenance: guidance re-derivable from the recorded branches, JSON round trip") {
    Fixture f;
    for (double scale : {0.0, 1.0, 5.0, 7.5}) {
        auto r = f.request();
        r.guidance_scale = scale;
        const auto p = generate(r, f.model).provenance;
        CHECK(p.guidance_scope == "identity_stream");
        CHECK(max_diff(classifier_free_guidance(p.eps_cond, p.eps_uncond, scale), p.eps_guided) <= 1e-6);
        if (scale == 1.0) CHECK(p.eps_guided == p.eps_cond);

        const auto q = provenance_from_json(to_json(p));
        CHECK(q.seed == p.seed);
        CHECK(q.config_digest == "digest");
        CHECK(q.train_mode == "identity_enhanced");
        CHECK(q.guidance_scale == scale);
        CHECK(q.steps.size() == p.steps.size());
        CHECK(q.eps_guided == p.eps_guided);
        CHECK(q.site_tokens == p.site_tokens);
    }
    CHECK_THROWS_AS(provenance_from_json("{}"), InputError);
}
