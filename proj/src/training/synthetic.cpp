#include "idfuse/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <json.hpp>

#include "idfuse/errors.hpp"
#include "idfuse/io.hpp"

namespace idfuse {

using nlohmann::json;

namespace {

Rgb random_color(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return {static_cast<float>(u(rng)), static_cast<float>(u(rng)), static_cast<float>(u(rng))};
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct NamedColor {
    const char* name;
    Rgb rgb;
};

constexpr NamedColor kPalette[] = {
    {"black", {0.05f, 0.05f, 0.05f}}, {"white", {0.95f, 0.95f, 0.95f}}, {"gray", {0.5f, 0.5f, 0.5f}},
    {"red", {0.85f, 0.15f, 0.15f}},   {"orange", {0.95f, 0.55f, 0.1f}}, {"yellow", {0.9f, 0.85f, 0.2f}},
    {"green", {0.2f, 0.7f, 0.25f}},   {"teal", {0.1f, 0.55f, 0.55f}},   {"blue", {0.2f, 0.3f, 0.85f}},
    {"purple", {0.55f, 0.25f, 0.7f}}, {"pink", {0.95f, 0.6f, 0.75f}},   {"brown", {0.5f, 0.3f, 0.15f}},
};

const char* color_name(const Rgb& c) {
    const char* best = kPalette[0].name;
    double bd = std::numeric_limits<double>::max();
    for (const auto& p : kPalette) {
        double d = 0;
        for (int i = 0; i < 3; ++i) d += (c[i] - p.rgb[i]) * (c[i] - p.rgb[i]);
        if (d < bd) bd = d, best = p.name;
    }
    return best;
}

json rgb_json(const Rgb& c) { return json::array({c[0], c[1], c[2]}); }
Rgb rgb_from(const json& j) { return {j.at(0).get<float>(), j.at(1).get<float>(), j.at(2).get<float>()}; }

std::string variant_file(std::size_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "v%02zu.png", v);
    return buf;
}

}  // namespace

IdentityParams sample_identity(std::mt19937_64& rng) {
    IdentityParams p;
    p.background = random_color(rng);
    p.skin = random_color(rng);
    p.hair = random_color(rng);
    p.eyes = random_color(rng);
    p.mouth = random_color(rng);
    p.face_w = uniform(rng, 8, 12);
    p.face_h = uniform(rng, 10, 13);
    p.hair_line = uniform(rng, 0.2, 0.6);
    p.eye_dx = uniform(rng, 3, 5);
    p.eye_dy = uniform(rng, 2, 4);
    p.eye_r = uniform(rng, 1.2, 2.2);
    p.mouth_y = uniform(rng, 3, 6);
    p.mouth_w = uniform(rng, 2.5, 5);
    p.mouth_t = uniform(rng, 0.6, 1.2);
    return p;
}

VariantParams sample_variant(std::mt19937_64& rng) {
    VariantParams v;
    v.tx = uniform(rng, -1.5, 1.5);
    v.ty = uniform(rng, -1.5, 1.5);
    v.rotation = uniform(rng, -0.2, 0.2);
    v.mouth_curve = uniform(rng, -1.5, 1.5);
    v.eye_open = uniform(rng, 0.4, 1.0);
    return v;
}

Image render_sprite(const IdentityParams& id, const VariantParams& var, std::size_t size) {
    if (size < 8) throw InputError("sprite size must be at least 8");
    constexpr int ss = 2;
    const double scale = 32.0 / static_cast<double>(size);
    const double cx = 16 + var.tx, cy = 16 + var.ty;
    const double cr = std::cos(var.rotation), sr = std::sin(var.rotation);
    Image img(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            double acc[3] = {0, 0, 0};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = (x + (sx + 0.5) / ss) * scale - cx;
                    const double py = (y + (sy + 0.5) / ss) * scale - cy;
                    const double u = cr * px + sr * py, v = -sr * px + cr * py;
                    const Rgb* c = &id.background;
                    const bool face = (u / id.face_w) * (u / id.face_w) + (v / id.face_h) * (v / id.face_h) <= 1.0;
                    if (face) c = v < -id.face_h * id.hair_line ? &id.hair : &id.skin;
                    for (int side : {-1, 1}) {
                        const double eu = (u - side * id.eye_dx) / id.eye_r;
                        const double ev = (v + id.eye_dy) / (id.eye_r * var.eye_open);
                        if (eu * eu + ev * ev <= 1.0) c = &id.eyes;
                    }
                    const double mu = u / id.mouth_w;
                    const double mv = v - id.mouth_y - var.mouth_curve * (1.0 - mu * mu);
                    if (std::abs(mu) <= 1.0 && std::abs(mv) <= id.mouth_t) c = &id.mouth;
                    for (int ch = 0; ch < 3; ++ch) acc[ch] += (*c)[ch];
                }
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = static_cast<float>(acc[ch] / (ss * ss));
        }
    return quantize8(std::move(img));
}

std::string describe(const IdentityParams& id) {
    return std::string("a portrait with ") + color_name(id.hair) + " hair and " + color_name(id.skin) + " skin on a " +
           color_name(id.background) + " background";
}

std::vector<TrainingPair> enumerate_pairs(const std::vector<SyntheticIdentity>& identities) {
    std::vector<TrainingPair> pairs;
    for (std::size_t i = 0; i < identities.size(); ++i) {
        const std::size_t nv = identities[i].images.size();
        for (std::size_t a = 0; a < nv; ++a)
            for (std::size_t b = 0; b < nv; ++b)
                if (a != b) pairs.push_back({i, a, b});
    }
    return pairs;
}

double max_cross_identity_cosine(const std::vector<SyntheticIdentity>& ids, const EncoderBackend& face,
                                 std::size_t align_size) {
    std::vector<std::vector<Matrix<float>>> emb(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (const Image& img : ids[i].images) emb[i].push_back(face.encode(align_face(img, align_size)));
    double worst = -1.0;
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = i + 1; j < ids.size(); ++j)
            for (const auto& a : emb[i])
                for (const auto& b : emb[j]) {
                    double dot = 0, na = 0, nb = 0;
                    for (std::size_t k = 0; k < a.size(); ++k) {
                        dot += static_cast<double>(a.data()[k]) * b.data()[k];
                        na += static_cast<double>(a.data()[k]) * a.data()[k];
                        nb += static_cast<double>(b.data()[k]) * b.data()[k];
                    }
                    worst = std::max(worst, dot / std::sqrt(na * nb));
                }
    return worst;
}

Dataset generate_synthetic_dataset(const DatasetOptions& o, const EncoderBackend& face) {
    if (o.n_identities < 2) throw InputError("need at least 2 identities");
    if (o.variants < 2) throw InputError("need at least 2 variants per identity");
    if (face.kind() != EncoderKind::face_like) throw InputError("separation check needs a face_like backend");
    double worst = 0;
    for (int attempt = 0; attempt <= o.max_retries; ++attempt) {
        // Each attempt draws from an independent stream derived from the seed.
        std::seed_seq seq{static_cast<std::uint32_t>(o.seed), static_cast<std::uint32_t>(o.seed >> 32),
                          static_cast<std::uint32_t>(attempt)};
        std::mt19937_64 rng(seq);
        Dataset d;
        d.seed = o.seed;
        d.attempt = attempt;
        d.image_size = o.image_size;
        for (std::size_t i = 0; i < o.n_identities; ++i) {
            SyntheticIdentity si;
            char name[16];
            std::snprintf(name, sizeof name, "id%03zu", i);
            si.spec = {name, sample_identity(rng)};
            for (std::size_t v = 0; v < o.variants; ++v) {
                si.variants.push_back(sample_variant(rng));
                si.images.push_back(render_sprite(si.spec.params, si.variants.back(), o.image_size));
            }
            si.caption = describe(si.spec.params);
            d.identities.push_back(std::move(si));
        }
        worst = max_cross_identity_cosine(d.identities, face, o.align_size);
        if (worst < o.max_cross_cosine) {
            d.pairs = enumerate_pairs(d.identities);
            return d;
        }
    }
    throw GenerationError("could not separate identities after " + std::to_string(o.max_retries) +
                          " retries (last max cosine " + std::to_string(worst) + ")");
}

void export_dataset(const Dataset& d, const std::filesystem::path& dir, const std::string& config_digest) {
    std::filesystem::create_directories(dir);
    json ids = json::array();
    for (const auto& si : d.identities) {
        json files = json::array(), variants = json::array();
        for (std::size_t v = 0; v < si.images.size(); ++v) {
            const std::string rel = si.spec.identity_id + "/" + variant_file(v);
            write_png(dir / rel, si.images[v]);
            files.push_back(rel);
            const auto& vp = si.variants[v];
            variants.push_back({{"tx", vp.tx}, {"ty", vp.ty}, {"rotation", vp.rotation},
                                {"mouth_curve", vp.mouth_curve}, {"eye_open", vp.eye_open}});
        }
        const auto& p = si.spec.params;
        ids.push_back({{"identity_id", si.spec.identity_id},
                       {"caption", si.caption},
                       {"files", files},
                       {"variants", variants},
                       {"params",
                        {{"background", rgb_json(p.background)}, {"skin", rgb_json(p.skin)},
                         {"hair", rgb_json(p.hair)}, {"eyes", rgb_json(p.eyes)}, {"mouth", rgb_json(p.mouth)},
                         {"face_w", p.face_w}, {"face_h", p.face_h}, {"hair_line", p.hair_line},
                         {"eye_dx", p.eye_dx}, {"eye_dy", p.eye_dy}, {"eye_r", p.eye_r},
                         {"mouth_y", p.mouth_y}, {"mouth_w", p.mouth_w}, {"mouth_t", p.mouth_t}}}});
    }
    json manifest = {{"format", "idfuse-dataset"}, {"version", 1},
                     {"seed", d.seed},             {"attempt", d.attempt},
                     {"image_size", d.image_size}, {"pair_count", d.pairs.size()},
                     {"identities", ids}};
    if (!config_digest.empty()) manifest["config_digest"] = config_digest;
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset import_dataset(const std::filesystem::path& dir) {
    json m;
    try {
        m = json::parse(read_file_text(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw InputError("dataset manifest: " + std::string(e.what()));
    }
    if (m.value("format", "") != "idfuse-dataset") throw InputError("not a dataset manifest: " + dir.string());
    Dataset d;
    try {
        d.seed = m.at("seed").get<std::uint64_t>();
        d.attempt = m.at("attempt").get<int>();
        d.image_size = m.at("image_size").get<std::size_t>();
        for (const auto& j : m.at("identities")) {
            SyntheticIdentity si;
            si.spec.identity_id = j.at("identity_id").get<std::string>();
            si.caption = j.at("caption").get<std::string>();
            if (j.contains("params")) {
                const auto& p = j["params"];
                auto& ip = si.spec.params;
                ip.background = rgb_from(p.at("background"));
                ip.skin = rgb_from(p.at("skin"));
                ip.hair = rgb_from(p.at("hair"));
                ip.eyes = rgb_from(p.at("eyes"));
                ip.mouth = rgb_from(p.at("mouth"));
                ip.face_w = p.at("face_w");
                ip.face_h = p.at("face_h");
                ip.hair_line = p.at("hair_line");
                ip.eye_dx = p.at("eye_dx");
                ip.eye_dy = p.at("eye_dy");
                ip.eye_r = p.at("eye_r");
                ip.mouth_y = p.at("mouth_y");
                ip.mouth_w = p.at("mouth_w");
                ip.mouth_t = p.at("mouth_t");
            }
            const auto& files = j.at("files");
            for (std::size_t v = 0; v < files.size(); ++v) {
                si.images.push_back(read_png(dir / files[v].get<std::string>()));
                VariantParams vp;
                if (j.contains("variants") && v < j["variants"].size()) {
                    const auto& jv = j["variants"][v];
                    vp = {jv.at("tx"), jv.at("ty"), jv.at("rotation"), jv.at("mouth_curve"), jv.at("eye_open")};
                }
                si.variants.push_back(vp);
            }
            d.identities.push_back(std::move(si));
        }
    } catch (const json::exception& e) {
        throw InputError("dataset manifest: " + std::string(e.what()));
    }
    d.pairs = enumerate_pairs(d.identities);
    return d;
}

}  // namespace idfuse
