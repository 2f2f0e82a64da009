#include "idfuse/inference.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace idfuse {

using nlohmann::json;

const char* to_string(GenerationVariant v) {
    switch (v) {
        case GenerationVariant::mixed_attention: return "mixed_attention";
        case GenerationVariant::no_mixed_attention: return "no_mixed_attention";
        case GenerationVariant::mutual_attention: return "mutual_attention";
        case GenerationVariant::text_only: return "text_only";
    }
    return "?";
}

GenerationVariant generation_variant_from_string(const std::string& s) {
    for (auto v : {GenerationVariant::mixed_attention, GenerationVariant::no_mixed_attention,
                   GenerationVariant::mutual_attention, GenerationVariant::text_only})
        if (s == to_string(v)) return v;
    throw InputError("unknown generation variant '" + s + "'");
}

void validate(const GenerationRequest& r) {
    if (r.steps < 1) throw InputError("steps must be at least 1");
    if (!(r.guidance_scale >= 0) || !std::isfinite(r.guidance_scale))
        throw InputError("guidance_scale must be finite and non-negative");
    if (r.variant != GenerationVariant::text_only && r.id_images.empty())
        throw InputError("at least one id image is required");
    if (r.merge_cross_attention && tokenize(r.prompt).empty())
        throw InputError("cross-attention merging needs a non-empty prompt");
    if (!r.mix_weights.empty() && r.mix_weights.size() != r.id_images.size())
        throw InputError("mix_weights needs one weight per id image");
    if (!r.id_sources.empty() && r.id_sources.size() != r.id_images.size())
        throw InputError("id_sources needs one label per id image");
}

KVSet capture_text_stream_kv(const UNet& unet, const Latent& z_text, int t, const Matrix<float>& c_t,
                             Latent* eps_text) {
    KVSet kv;
    AttentionHooks hooks;
    hooks.capture = &kv;
    Latent eps = unet.forward(z_text, t, {Matrix<float>{}, c_t, true}, hooks);
    if (eps_text) *eps_text = std::move(eps);
    return kv;
}

Latent denoise_identity_stream(const UNet& unet, const Latent& z_id, int t, const Matrix<float>& c_id,
                               const Matrix<float>& c_t, const KVSet* captures, const GenerationRequest& req,
                               std::vector<StyleProbe>* probe) {
    AttentionHooks hooks;
    hooks.probe = probe;
    switch (req.variant) {
        case GenerationVariant::text_only:
            return unet.forward(z_id, t, {Matrix<float>{}, c_t, true}, hooks);
        case GenerationVariant::mixed_attention: hooks.variant = SelfAttentionVariant::mixed; break;
        case GenerationVariant::mutual_attention: hooks.variant = SelfAttentionVariant::mutual; break;
        case GenerationVariant::no_mixed_attention: hooks.variant = SelfAttentionVariant::self; break;
    }
    hooks.inject = captures;
    hooks.self_style = req.style;
    hooks.cross_style = req.style;
    return unet.forward(z_id, t, {c_id, c_t, req.merge_cross_attention}, hooks);
}

Matrix<float> classifier_free_guidance(const Matrix<float>& cond, const Matrix<float>& uncond, double scale) {
    if (!cond.same_shape(uncond))
        throw ShapeError("guidance branches differ in shape: " + cond.shape_str() + " vs " + uncond.shape_str());
    Matrix<float> out(cond.rows(), cond.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double u = uncond.data()[i];
        out.data()[i] = static_cast<float>(u + scale * (cond.data()[i] - u));
    }
    return out;
}

Latent classifier_free_guidance(const Latent& cond, const Latent& uncond, double scale) {
    if (cond.height != uncond.height || cond.width != uncond.width) throw ShapeError("guidance branches differ in grid");
    return {cond.height, cond.width, classifier_free_guidance(cond.data, uncond.data, scale)};
}

IdentityEmbedding request_identity(const GenerationRequest& r, const GenerationModel& m) {
    std::vector<IdentityEmbedding> ids;
    for (std::size_t i = 0; i < r.id_images.size(); ++i) {
        const std::string label = r.id_sources.empty() ? "id" + std::to_string(i) : r.id_sources[i];
        ids.push_back(extract_identity_embedding(r.id_images[i], *m.encoders.clip, *m.encoders.face, m.mappers,
                                                 m.encoders.align_size, label));
    }
    return r.mix_weights.empty() ? stack_identities(ids) : mix_identities(ids, r.mix_weights);
}

GenerationResult generate(const GenerationRequest& r, const GenerationModel& m) {
    validate(r);
    const UNet& unet = m.unet;
    const auto& cfg = unet.config();
    const bool identity = r.variant != GenerationVariant::text_only;
    const bool fusion = identity && (r.variant != GenerationVariant::no_mixed_attention);
    if (fusion && !r.run_text_stream) throw StateError(std::string(to_string(r.variant)) + " needs the text stream");

    Provenance prov;
    prov.seed = r.seed;
    prov.config_digest = m.config_digest;
    prov.variant = to_string(r.variant);
    prov.train_mode = m.train_mode;
    prov.style = to_string(r.style);
    prov.merge_cross_attention = r.merge_cross_attention;
    prov.guidance_scale = r.guidance_scale;
    prov.mix_weights = r.mix_weights;
    prov.site_tokens = unet.self_attention_tokens();
    prov.text_stream_ran = identity && r.run_text_stream;

    Matrix<float> c_id;
    if (identity) {
        IdentityEmbedding e = request_identity(r, m);
        c_id = std::move(e.tokens);
        prov.source_ids = std::move(e.source_ids);
        prov.identity_tokens = c_id.rows();
    }
    const Matrix<float> c_t = m.encoders.text.encode(r.prompt);
    const Matrix<float> c_neg = m.encoders.text.encode(r.negative_prompt);

    std::mt19937_64 rng(r.seed);
    DualStreamState st;
    st.z_id = gaussian_latent(cfg.latent_size, cfg.latent_size, cfg.latent_channels, rng);
    st.z_text = st.z_id;

    const std::vector<int> ts = ddim_timesteps(unet.schedule(), r.steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        StepRecord rec{t, t_prev, 0};
        if (prov.text_stream_ran) {
            Latent eps_text;
            st.captures = capture_text_stream_kv(unet, st.z_text, t, c_t, &eps_text);
            st.z_text = ddim_step(st.z_text, eps_text, t, t_prev, unet.schedule());
            if (fusion) rec.captures = 1;
        }
        const Latent cond = denoise_identity_stream(unet, st.z_id, t, c_id, c_t, fusion ? &st.captures : nullptr, r);
        const Latent uncond = unet.forward(st.z_id, t, {Matrix<float>{}, c_neg, true});
        const Latent guided = classifier_free_guidance(cond, uncond, r.guidance_scale);
        st.z_id = ddim_step(st.z_id, guided, t, t_prev, unet.schedule());
        prov.steps.push_back(rec);
        if (i + 1 == ts.size()) {
            prov.eps_cond = cond.data;
            prov.eps_uncond = uncond.data;
            prov.eps_guided = guided.data;
        }
    }
    return {decode_latent(st.z_id, m.latent_factor), st.z_id, std::move(prov)};
}

namespace {

json matrix_json(const Matrix<float>& m) {
    json data = json::array();
    for (float v : m.flat()) data.push_back(v);
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix<float> matrix_from(const json& j) {
    std::vector<float> d = j.at("data").get<std::vector<float>>();
    return Matrix<float>(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), std::move(d));
}

}  // namespace

std::string to_json(const Provenance& p) {
    json steps = json::array();
    for (const auto& s : p.steps) steps.push_back({{"t", s.t}, {"t_prev", s.t_prev}, {"captures", s.captures}});
    json j{
        {"seed", p.seed},
        {"config_digest", p.config_digest},
        {"variant", p.variant},
        {"train_mode", p.train_mode},
        {"style", p.style},
        {"merge_cross_attention", p.merge_cross_attention},
        {"guidance_scale", p.guidance_scale},
        {"guidance_scope", p.guidance_scope},
        {"text_stream_ran", p.text_stream_ran},
        {"identity_tokens", p.identity_tokens},
        {"source_ids", p.source_ids},
        {"mix_weights", p.mix_weights},
        {"site_tokens", p.site_tokens},
        {"steps", std::move(steps)},
        {"final_step",
         {{"eps_cond", matrix_json(p.eps_cond)},
          {"eps_uncond", matrix_json(p.eps_uncond)},
          {"eps_guided", matrix_json(p.eps_guided)}}},
    };
    return j.dump(2) + "\n";
}

Provenance provenance_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        Provenance p;
        p.seed = j.at("seed").get<std::uint64_t>();
        p.config_digest = j.at("config_digest").get<std::string>();
        p.variant = j.at("variant").get<std::string>();
        p.train_mode = j.at("train_mode").get<std::string>();
        p.style = j.at("style").get<std::string>();
        p.merge_cross_attention = j.at("merge_cross_attention").get<bool>();
        p.guidance_scale = j.at("guidance_scale").get<double>();
        p.guidance_scope = j.at("guidance_scope").get<std::string>();
        p.text_stream_ran = j.at("text_stream_ran").get<bool>();
        p.identity_tokens = j.at("identity_tokens").get<std::size_t>();
        p.source_ids = j.at("source_ids").get<std::vector<std::string>>();
        p.mix_weights = j.at("mix_weights").get<std::vector<double>>();
        p.site_tokens = j.at("site_tokens").get<std::vector<std::size_t>>();
        for (const auto& s : j.at("steps"))
            p.steps.push_back({s.at("t").get<int>(), s.at("t_prev").get<int>(), s.at("captures").get<std::size_t>()});
        const json& f = j.at("final_step");
        p.eps_cond = matrix_from(f.at("eps_cond"));
        p.eps_uncond = matrix_from(f.at("eps_uncond"));
        p.eps_guided = matrix_from(f.at("eps_guided"));
        return p;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed provenance: ") + e.what());
    }
}

}  // namespace idfuse
