#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "idfuse/evaluation.hpp"
#include "idfuse/io.hpp"
#include "idfuse/synthetic.hpp"

using namespace idfuse;

namespace {

Image sprite(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto id = sample_identity(rng);
    return render_sprite(id, sample_variant(rng), 32);
}

EvalRecord record(Image gen, Image ref, std::string prompt, std::string method = "default") {
    EvalRecord r;
    r.generated = std::move(gen);
    r.reference = std::move(ref);
    r.prompt = std::move(prompt);
    r.method = std::move(method);
    return r;
}

struct Fixture {
    Encoders enc = make_encoders(EncoderConfig{}, 64);
    HashTextEmbedder text{enc.clip_text};
    EvalEncoders ee{*enc.clip, *enc.face, text, 32};
};

const MethodSummary& method(const MetricReport& r, const std::string& name) {
    const auto it = std::find_if(r.methods.begin(), r.methods.end(), [&](const auto& s) { return s.method == name; });
    REQUIRE(it != r.methods.end());
    return *it;
}

}  // namespace

TEST_CASE("cosine: worked values, bounds, errors") {
    const std::vector<double> a{1, 0, 0}, b{0, 2, 0}, c{-3, 0, 0}, d{1, 1, 0};
    CHECK(cosine(a, a) == doctest::Approx(1.0));
    CHECK(cosine(a, b) == doctest::Approx(0.0));
    CHECK(cosine(a, c) == doctest::Approx(-1.0));
    CHECK(cosine(a, d) == doctest::Approx(1 / std::sqrt(2.0)));
    CHECK_THROWS_AS(cosine(a, std::vector<double>{0, 0, 0}), DegenerateError);
    CHECK_THROWS_AS(cosine(a, std::vector<double>{1, 0}), ShapeError);
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n;
    for (int i = 0; i < 200; ++i) {
        std::vector<float> u(7), v(7);
        for (auto& x : u) x = n(rng);
        for (auto& x : v) x = n(rng);
        const double s = cosine(u, v);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
        CHECK(cosine(u, u) <= 1.0);
        CHECK(s == doctest::Approx(cosine(v, u)));
    }
}

TEST_CASE("z-score: worked example, zero mean, constant input") {
    const auto z = z_score({1, 2, 3});
    CHECK(z[0] == doctest::Approx(-1.224744871));
    CHECK(z[1] == doctest::Approx(0.0));
    CHECK(z[2] == doctest::Approx(1.224744871));
    CHECK(z_score({4, 4, 4}) == std::vector<double>{0, 0, 0});
    CHECK_THROWS_AS(z_score({1}), InputError);

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> f(2 + trial % 5), c(f.size());
        for (auto& x : f) x = u(rng);
        for (auto& x : c) x = u(rng);
        const auto fused = z_score_fuse(f, c);
        double mean = 0;
        for (double v : fused) mean += v;
        CHECK(mean / double(fused.size()) == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
        // Affine rescaling of either metric leaves the fused score unchanged.
        std::vector<double> f2 = f;
        for (auto& x : f2) x = 3 * x + 7;
        const auto again = z_score_fuse(f2, c);
        for (std::size_t i = 0; i < fused.size(); ++i) CHECK(again[i] == doctest::Approx(fused[i]));
    }
    CHECK_THROWS_AS(z_score_fuse({1, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("metrics compose from the encoders and cosine") {
    Fixture f;
    const EvalRecord rec = record(sprite(1), sprite(2), "a photo of a person");
    const auto gf = f.enc.face->encode(align_face(rec.generated, 32));
    const auto rf = f.enc.face->encode(align_face(rec.reference, 32));
    CHECK(metric_m_facenet(rec, *f.enc.face, 32) == doctest::Approx(cosine(gf.row(0), rf.row(0))));
    const auto gc = pool_tokens(f.enc.clip->encode(align_face(rec.generated, 32)));
    const auto rc = pool_tokens(f.enc.clip->encode(align_face(rec.reference, 32)));
    CHECK(metric_clip_i(rec, *f.enc.clip, 32) == doctest::Approx(cosine(gc, rc)));
    const auto img = pool_tokens(f.enc.clip->encode(rec.generated));
    CHECK(metric_clip_t(rec, *f.enc.clip, f.text) == doctest::Approx(cosine(img, f.enc.clip_text.pooled(rec.prompt))));

    CHECK_THROWS_AS(metric_m_facenet(rec, *f.enc.clip, 32), InputError);
    CHECK_THROWS_AS(metric_clip_i(rec, *f.enc.face, 32), InputError);
}

TEST_CASE("self-pairs score exactly one; canonical prompts are fixed points of CLIP-T") {
    Fixture f;
    const Image img = sprite(3);
    const EvalRecord self = record(img, img, "x");
    CHECK(metric_m_facenet(self, *f.enc.face, 32) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(metric_clip_i(self, *f.enc.clip, 32) == doctest::Approx(1.0).epsilon(1e-9));

    CanonicalTextEmbedder canon(*f.enc.clip);
    canon.add("smiling", img);
    CHECK(metric_clip_t(record(img, img, "smiling"), *f.enc.clip, canon) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(metric_clip_t(record(sprite(4), img, "smiling"), *f.enc.clip, canon) < 1.0);
    CHECK_THROWS_AS(canon.embed("unknown"), InputError);
}

TEST_CASE("evaluate: per-method aggregates, fusion, failures stay local") {
    Fixture f;
    std::vector<EvalRecord> recs;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const Image ref = sprite(10 + s);
        recs.push_back(record(ref, ref, "a photo of a person", "ours"));
        recs.push_back(record(sprite(20 + s), ref, "a photo of a person", "baseline"));
    }
    const EvalRecord broken = record(Image(32, 32, 0.5f), sprite(10), "a photo", "baseline");  // flat image: no face
    recs.push_back(broken);
    EvalRecord missing{};
    missing.method = "ours";
    missing.load_error = "cannot read gen.png";
    recs.push_back(missing);

    const auto rep = evaluate(recs, f.ee);
    REQUIRE(rep.records.size() == 8);
    CHECK_FALSE(rep.records[6].error.empty());
    CHECK_FALSE(rep.records[6].m_facenet.has_value());
    CHECK(rep.records[7].error == "cannot read gen.png");
    REQUIRE(rep.methods.size() == 2);
    CHECK(rep.methods[0].method == "ours");
    const auto& ours = method(rep, "ours");
    const auto& base = method(rep, "baseline");
    CHECK(ours.records == 3);
    CHECK(base.records == 3);
    CHECK(ours.m_facenet == doctest::Approx(1.0));
    double expect = 0;
    for (std::size_t i = 1; i < 6; i += 2) expect += *rep.records[i].m_facenet / 3.0;
    CHECK(base.m_facenet == doctest::Approx(expect));
    REQUIRE(ours.fused_identity.has_value());
    // Two methods: the fused scores are +-1 around zero.
    CHECK(*ours.fused_identity == doctest::Approx(1.0));
    CHECK(*base.fused_identity == doctest::Approx(-1.0));

    const auto single = evaluate({recs[0], recs[2]}, f.ee);
    CHECK_FALSE(single.methods[0].fused_identity.has_value());
    CHECK_THROWS_AS(evaluate({}, f.ee), InputError);

    // Permuting records does not move any aggregate.
    auto shuffled = recs;
    std::mt19937_64 rng(5);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto rep2 = evaluate(shuffled, f.ee);
    for (const auto& name : {"ours", "baseline"}) {
        CHECK(method(rep2, name).clip_t == doctest::Approx(method(rep, name).clip_t).epsilon(1e-12));
        CHECK(method(rep2, name).clip_i == doctest::Approx(method(rep, name).clip_i).epsilon(1e-12));
        CHECK(method(rep2, name).m_facenet == doctest::Approx(method(rep, name).m_facenet).epsilon(1e-12));
    }

    const std::string csv = report_csv(rep);
    CHECK(csv.rfind("method,CLIP-T,CLIP-I,M_FaceNet\nours,", 0) == 0);
    CHECK(csv.find("\nbaseline,") != std::string::npos);
    const std::string js = report_json(rep);
    CHECK(js.find("\"fused_identity\"") != std::string::npos);
    CHECK(js.find("cannot read gen.png") != std::string::npos);
}

TEST_CASE("manifest parsing") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "idfuse_test_manifest";
    fs::remove_all(dir);
    write_file_atomic(dir / "m.jsonl", std::string_view(
        "{\"generated\": \"g/1.png\", \"reference\": \"/abs/r.png\", \"prompt\": \"p\"}\n"
        "\n"
        "{\"generated\": \"g/2.png\", \"reference\": \"r.png\", \"prompt\": \"q\", \"method\": \"m2\"}\n"));
    const auto m = read_manifest(dir / "m.jsonl");
    REQUIRE(m.size() == 2);
    CHECK(m[0].generated == dir / "g/1.png");
    CHECK(m[0].reference == fs::path("/abs/r.png"));
    CHECK(m[0].method == "default");
    CHECK(m[1].method == "m2");

    write_file_atomic(dir / "bad.jsonl", std::string_view("{\"generated\": \"a\", \"reference\": \"b\", \"prompt\": \"c\", \"extra\": 1}\n"));
    CHECK_THROWS_AS(read_manifest(dir / "bad.jsonl"), InputError);
    write_file_atomic(dir / "missing.jsonl", std::string_view("{\"generated\": \"a\"}\n"));
    CHECK_THROWS_AS(read_manifest(dir / "missing.jsonl"), InputError);
    write_file_atomic(dir / "empty.jsonl", std::string_view("\n"));
    CHECK_THROWS_AS(read_manifest(dir / "empty.jsonl"), InputError);
    write_file_atomic(dir / "junk.jsonl", std::string_view("not json\n"));
    CHECK_THROWS_AS(read_manifest(dir / "junk.jsonl"), InputError);
    fs::remove_all(dir);
}
