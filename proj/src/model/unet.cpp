#include "idfuse/unet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "idfuse/errors.hpp"

namespace idfuse {

void validate(const UNetConfig& cfg) {
    auto fail = [](const std::string& m) { throw InputError("unet config: " + m); };
    if (cfg.latent_size < 8 || (cfg.latent_size & (cfg.latent_size - 1))) fail("latent_size must be a power of two >= 8");
    if (cfg.latent_channels < 3) fail("latent_channels must be >= 3");
    if (cfg.channel_multipliers.empty()) fail("channel_multipliers must be non-empty");
    if (cfg.latent_size >> (cfg.channel_multipliers.size() - 1) < 2) fail("too many levels for the latent size");
    if (cfg.base_channels == 0 || cfg.d_model == 0 || cfg.heads == 0 || cfg.groups == 0) fail("sizes must be positive");
    if (cfg.base_channels * 4 % 2) fail("time embedding must be even");
    for (std::size_t m : cfg.channel_multipliers) {
        const std::size_t ch = m * cfg.base_channels;
        if (m == 0) fail("channel multipliers must be positive");
        if (ch % cfg.groups) fail("channels must be divisible by groups");
        if (ch % cfg.heads) fail("channels must be divisible by heads");
    }
    if (cfg.attention_resolutions.empty()) fail("at least one attention resolution is required");
    for (std::size_t r : cfg.attention_resolutions) {
        bool found = false;
        for (std::size_t l = 0; l < cfg.channel_multipliers.size(); ++l) found |= (cfg.latent_size >> l) == r;
        if (!found) fail("attention resolution " + std::to_string(r) + " matches no level");
    }
    if (!(cfg.prior_std > 0.0)) fail("prior_std must be positive");
}

const char* to_string(SelfAttentionVariant v) {
    switch (v) {
        case SelfAttentionVariant::self: return "self";
        case SelfAttentionVariant::mixed: return "mixed";
        case SelfAttentionVariant::mutual: return "mutual";
    }
    return "?";
}

namespace {

bool has_attention(const UNetConfig& cfg, std::size_t level) {
    const std::size_t r = cfg.latent_size >> level;
    return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), r) !=
           cfg.attention_resolutions.end();
}

std::string level_name(const char* stage, std::size_t l) { return std::string(stage) + std::to_string(l); }

class Initializer {
public:
    Initializer(ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

    void dense(const std::string& name, std::size_t in, std::size_t out, bool bias,
               const std::string& group = kBaseGroup, bool trainable = false) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        store_.add(name + ".weight", group, trainable, uniform(in, out, bound));
        if (bias) store_.add(name + ".bias", group, trainable, uniform(1, out, bound));
    }
    void conv(const std::string& name, std::size_t in, std::size_t out) {
        const double bound = 1.0 / std::sqrt(9.0 * in);
        store_.add(name + ".weight", kBaseGroup, false, uniform(9 * in, out, bound));
        store_.add(name + ".bias", kBaseGroup, false, uniform(1, out, bound));
    }
    void gaussian(const std::string& name, std::size_t rows, std::size_t cols) {
        Matrix<float> m(rows, cols);
        std::normal_distribution<double> n(0.0, 1.0);
        for (auto& v : m.storage()) v = static_cast<float>(n(rng_));
        store_.add(name, kBaseGroup, false, std::move(m));
    }
    void resblock(const std::string& p, std::size_t in, std::size_t out, std::size_t temb) {
        conv(p + ".conv1", in, out);
        dense(p + ".temb", temb, out, true);
        conv(p + ".conv2", out, out);
        if (in != out) dense(p + ".skip", in, out, true);
    }
    void transformer(const std::string& p, std::size_t tokens, std::size_t ch, std::size_t d_model) {
        gaussian(p + ".pos", tokens, ch);
        dense(p + ".self.q", ch, ch, false);
        dense(p + ".self.k", ch, ch, false);
        dense(p + ".self.v", ch, ch, false);
        dense(p + ".self.out", ch, ch, true);
        dense(p + ".cross.q", ch, ch, false);
        dense(p + ".cross.k_text", d_model, ch, false);
        dense(p + ".cross.v_text", d_model, ch, false);
        dense(p + ".cross.out", ch, ch, true);
        store_.add(p + ".cross.k_image.weight", kImageCrossGroup, true, store_.value(p + ".cross.k_text.weight"));
        store_.add(p + ".cross.v_image.weight", kImageCrossGroup, true, store_.value(p + ".cross.v_text.weight"));
    }
    std::mt19937_64& rng() { return rng_; }

private:
    Matrix<float> uniform(std::size_t r, std::size_t c, double bound) {
        Matrix<float> m(r, c);
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : m.storage()) v = static_cast<float>(u(rng_));
        return m;
    }

    ParamStore& store_;
    std::mt19937_64 rng_;
};

}  // namespace

ParamStore init_model(const UNetConfig& cfg, std::size_t clip_dim, std::size_t face_dim, std::uint64_t seed) {
    validate(cfg);
    ParamStore store;
    Initializer init(store, seed);
    const std::size_t temb = cfg.time_embed_dim();
    init.dense("time.fc1", temb, temb, true);
    init.dense("time.fc2", temb, temb, true);

    const std::size_t levels = cfg.channel_multipliers.size();
    std::vector<std::size_t> ch(levels);
    for (std::size_t l = 0; l < levels; ++l) ch[l] = cfg.base_channels * cfg.channel_multipliers[l];

    init.conv("conv_in", cfg.latent_channels, ch[0]);
    std::size_t cur = ch[0];
    for (std::size_t l = 0; l < levels; ++l) {
        const std::size_t res = cfg.latent_size >> l;
        init.resblock(level_name("down", l) + ".res", cur, ch[l], temb);
        cur = ch[l];
        if (has_attention(cfg, l)) init.transformer(level_name("down", l) + ".attn", res * res, cur, cfg.d_model);
    }
    init.resblock("mid.res", cur, cur, temb);
    for (std::size_t l = levels; l-- > 0;) {
        const std::size_t res = cfg.latent_size >> l;
        init.resblock(level_name("up", l) + ".res", cur + ch[l], ch[l], temb);
        cur = ch[l];
        if (has_attention(cfg, l)) init.transformer(level_name("up", l) + ".attn", res * res, cur, cfg.d_model);
    }
    init.conv("out.conv", cur, cfg.latent_channels);

    auto clip = init_mapper<float>(clip_dim, cfg.d_model, init.rng());
    auto face = init_mapper<float>(face_dim, cfg.d_model, init.rng());
    store.add("mapper.clip.weight", kClipMapperGroup, true, std::move(clip.weight));
    store.add("mapper.clip.bias", kClipMapperGroup, true, std::move(clip.bias));
    store.add("mapper.face.weight", kFaceMapperGroup, true, std::move(face.weight));
    store.add("mapper.face.bias", kFaceMapperGroup, true, std::move(face.bias));
    return store;
}

MapperWeights mappers_from(const ParamStore& p) {
    return {{p.value("mapper.clip.weight"), p.value("mapper.clip.bias")},
            {p.value("mapper.face.weight"), p.value("mapper.face.bias")}};
}

// ---------------------------------------------------------------------------

struct UNet::Ctx {
    Graph<float>& g;
    GradStore* grads;
    const AttentionHooks& hooks;
    Id c_id, c_t;
    bool text_active;
    Id temb = Graph<float>::none;
    std::size_t site = 0;
};

UNet::UNet(UNetConfig cfg, const ParamStore& params, const NoiseSchedule& sched)
    : cfg_(std::move(cfg)), params_(params), sched_(sched) {
    validate(cfg_);
    const std::size_t levels = cfg_.channel_multipliers.size();
    for (std::size_t l = 0; l < levels; ++l)
        if (has_attention(cfg_, l)) site_tokens_.push_back((cfg_.latent_size >> l) * (cfg_.latent_size >> l));
    for (std::size_t l = levels; l-- > 0;)
        if (has_attention(cfg_, l)) site_tokens_.push_back((cfg_.latent_size >> l) * (cfg_.latent_size >> l));
}

UNet::Id UNet::param(Ctx& c, const std::string& name) const {
    const Parameter& p = params_.at(name);
    return c.g.parameter(p.value, c.grads ? c.grads->find(name) : nullptr);
}

UNet::Id UNet::linear(Ctx& c, Id x, const std::string& prefix, bool bias) const {
    Id y = c.g.matmul(x, param(c, prefix + ".weight"));
    return bias ? c.g.add_row(y, param(c, prefix + ".bias")) : y;
}

UNet::Id UNet::resblock(Ctx& c, Id x, Id temb, std::size_t h, std::size_t w, const std::string& p) const {
    auto& g = c.g;
    Id a = g.silu(g.group_norm(x, cfg_.groups));
    a = g.conv3x3(a, param(c, p + ".conv1.weight"), param(c, p + ".conv1.bias"), h, w);
    a = g.add_row(a, linear(c, temb, p + ".temb", true));
    a = g.silu(g.group_norm(a, cfg_.groups));
    a = g.conv3x3(a, param(c, p + ".conv2.weight"), param(c, p + ".conv2.bias"), h, w);
    const Id skip = params_.contains(p + ".skip.weight") ? linear(c, x, p + ".skip", true) : x;
    return g.add(a, skip);
}

UNet::Id UNet::transformer(Ctx& c, Id x, std::size_t h, std::size_t w, const std::string& p) const {
    auto& g = c.g;
    const auto& hooks = c.hooks;
    const std::size_t site = c.site++;
    const Id pos = param(c, p + ".pos");
    if (g.value(pos).rows() != h * w) throw ShapeError("positional table does not match grid");

    // Self-attention
    {
        const Id a = g.add(g.layer_norm(x), pos);
        const Id q = linear(c, a, p + ".self.q", false);
        const Id k = linear(c, a, p + ".self.k", false);
        const Id v = linear(c, a, p + ".self.v", false);
        if (hooks.capture) {
            if (hooks.capture->size() <= site) hooks.capture->resize(site + 1);
            (*hooks.capture)[site] = {g.value(k), g.value(v)};
        }
        Id attn;
        if (hooks.variant == SelfAttentionVariant::self) {
            attn = g.attention(q, k, v, cfg_.heads);
        } else {
            if (!hooks.inject || hooks.inject->size() <= site)
                throw StateError(std::string(to_string(hooks.variant)) + " attention needs captured keys/values for site " +
                                 std::to_string(site));
            const KV& kv = (*hooks.inject)[site];
            if (kv.k.cols() != g.value(k).cols() || kv.v.cols() != g.value(v).cols())
                throw ShapeError("captured keys/values have the wrong width at site " + std::to_string(site));
            const Id kt = g.constant(kv.k), vt = g.constant(kv.v);
            if (hooks.variant == SelfAttentionVariant::mixed) {
                attn = g.mixed_attend(q, k, v, kt, vt, hooks.self_style, cfg_.heads);
                if (hooks.probe)
                    hooks.probe->push_back({site, style_align(g.value(k), kv.k, hooks.self_style),
                                            style_align(g.value(v), kv.v, hooks.self_style), kv.k, kv.v});
            } else {
                attn = g.attention(q, kt, vt, cfg_.heads);
            }
        }
        x = g.add(x, linear(c, attn, p + ".self.out", true));
    }

    // Cross-attention. The text unit is evaluated only when it contributes or
    // serves as a style target.
    const bool have_id = c.c_id != Graph<float>::none;
    const bool have_t = c.c_t != Graph<float>::none;
    const bool text_out = have_t && c.text_active;
    const bool text_needed = text_out || (have_id && have_t && hooks.cross_style != StyleAlign::off);
    if (!have_id && !text_out) return x;
    {
        const Id a = g.add(g.layer_norm(x), pos);
        const Id q = linear(c, a, p + ".cross.q", false);
        Id kt = Graph<float>::none, vt = Graph<float>::none;
        if (text_needed) {
            kt = linear(c, c.c_t, p + ".cross.k_text", false);
            vt = linear(c, c.c_t, p + ".cross.v_text", false);
        }
        Id out;
        if (have_id) {
            const Id ki = linear(c, c.c_id, p + ".cross.k_image", false);
            const Id vi = linear(c, c.c_id, p + ".cross.v_image", false);
            out = g.merge_attend(q, ki, vi, kt, vt, have_t ? hooks.cross_style : StyleAlign::off, text_out, cfg_.heads);
        } else {
            out = g.attention(q, kt, vt, cfg_.heads);
        }
        x = g.add(x, linear(c, out, p + ".cross.out", true));
    }
    return x;
}

UNet::Id UNet::build(Graph<float>& g, const Latent& z_t, int t, Id c_id, Id c_t, bool text_active,
                     const AttentionHooks& hooks, GradStore* grads) const {
    const std::size_t n = cfg_.latent_size;
    if (z_t.height != n || z_t.width != n || z_t.channels() != cfg_.latent_channels)
        throw ShapeError("latent must be " + std::to_string(n) + "x" + std::to_string(n) + "x" +
                         std::to_string(cfg_.latent_channels));
    if (t < 1 || t > sched_.steps) throw InputError("timestep out of range");
    for (Id ctx : {c_id, c_t})
        if (ctx != Graph<float>::none && g.value(ctx).cols() != cfg_.d_model)
            throw ShapeError("context width " + std::to_string(g.value(ctx).cols()) + " != d_model " +
                             std::to_string(cfg_.d_model));
    if (c_id != Graph<float>::none && g.value(c_id).rows() == 0) c_id = Graph<float>::none;
    if (c_t != Graph<float>::none && g.value(c_t).rows() == 0) c_t = Graph<float>::none;

    Ctx c{g, grads, hooks, c_id, c_t, text_active};
    if (hooks.capture) hooks.capture->clear();

    // Sinusoidal timestep features -> MLP.
    const std::size_t d = cfg_.time_embed_dim(), half = d / 2;
    Matrix<float> sinus(1, d);
    for (std::size_t i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        sinus(0, i) = static_cast<float>(std::sin(t * f));
        sinus(0, half + i) = static_cast<float>(std::cos(t * f));
    }
    Id temb = linear(c, g.constant(std::move(sinus)), "time.fc1", true);
    temb = g.silu(linear(c, g.silu(temb), "time.fc2", true));  // resblocks consume silu(temb)

    const std::size_t levels = cfg_.channel_multipliers.size();
    Id h = g.conv3x3(g.constant(z_t.data), param(c, "conv_in.weight"), param(c, "conv_in.bias"), n, n);
    std::vector<Id> skips;
    for (std::size_t l = 0; l < levels; ++l) {
        const std::size_t r = n >> l;
        h = resblock(c, h, temb, r, r, level_name("down", l) + ".res");
        if (has_attention(cfg_, l)) h = transformer(c, h, r, r, level_name("down", l) + ".attn");
        skips.push_back(h);
        if (l + 1 < levels) h = g.avgpool2(h, r, r);
    }
    {
        const std::size_t r = n >> (levels - 1);
        h = resblock(c, h, temb, r, r, "mid.res");
    }
    for (std::size_t l = levels; l-- > 0;) {
        const std::size_t r = n >> l;
        h = g.concat_cols(h, skips[l]);
        h = resblock(c, h, temb, r, r, level_name("up", l) + ".res");
        if (has_attention(cfg_, l)) h = transformer(c, h, r, r, level_name("up", l) + ".attn");
        if (l > 0) h = g.upsample2(h, r, r);
    }
    h = g.silu(g.group_norm(h, cfg_.groups));
    return g.conv3x3(h, param(c, "out.conv.weight"), param(c, "out.conv.bias"), n, n);
}

double UNet::skip_coeff(int t) const {
    const double ab = sched_.alpha_bar_at(t), s2 = cfg_.prior_std * cfg_.prior_std;
    return std::sqrt(1.0 - ab) / (ab * s2 + 1.0 - ab);
}

double UNet::body_gain(int t) const { return -skip_coeff(t) * std::sqrt(sched_.alpha_bar_at(t)); }

Latent UNet::epsilon(const Latent& z_t, const Matrix<float>& body, int t) const {
    if (!body.same_shape(z_t.data)) throw ShapeError("body output shape differs from latent");
    const double cs = skip_coeff(t), ra = std::sqrt(sched_.alpha_bar_at(t));
    Latent eps{z_t.height, z_t.width, Matrix<float>(body.rows(), body.cols())};
    for (std::size_t i = 0; i < body.size(); ++i)
        eps.data.data()[i] = static_cast<float>(cs * (z_t.data.data()[i] - ra * body.data()[i]));
    return eps;
}

Latent UNet::forward(const Latent& z_t, int t, const ConditionBundle& cond, const AttentionHooks& hooks) const {
    Graph<float> g(false);
    const Id c_id = cond.c_id.empty() ? Graph<float>::none : g.constant(cond.c_id);
    const Id c_t = cond.c_t.empty() ? Graph<float>::none : g.constant(cond.c_t);
    const Id body = build(g, z_t, t, c_id, c_t, cond.text_cross_attention, hooks, nullptr);
    return epsilon(z_t, g.value(body), t);
}

}  // namespace idfuse
