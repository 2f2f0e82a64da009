#include "idfuse/training.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "idfuse/io.hpp"

namespace idfuse {

const char* to_string(TrainMode m) {
    return m == TrainMode::identity_enhanced ? "identity_enhanced" : "entangled";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "identity_enhanced") return TrainMode::identity_enhanced;
    if (s == "entangled") return TrainMode::entangled;
    throw InputError("unknown training mode '" + s + "'");
}

void validate(const TrainConfig& c) {
    if (!(c.learning_rate > 0) || !std::isfinite(c.learning_rate)) throw InputError("learning_rate must be positive");
    if (!(c.weight_decay >= 0)) throw InputError("weight_decay must be non-negative");
    if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) throw InputError("betas must lie in [0, 1)");
    if (!(c.epsilon > 0)) throw InputError("epsilon must be positive");
    if (c.batch_size == 0) throw InputError("batch_size must be positive");
    if (c.steps == 0) throw InputError("steps must be positive");
}

PreparedData prepare_training_data(const Dataset& d, const Encoders& enc, std::size_t latent_factor,
                                   std::size_t latent_channels) {
    if (d.identities.empty() || d.pairs.empty()) throw InputError("dataset has no training pairs");
    PreparedData out;
    out.pairs = d.pairs;
    for (const auto& id : d.identities) {
        std::vector<Latent> lat;
        std::vector<IdentityFeatures> feats;
        for (const auto& img : id.images) {
            lat.push_back(encode_latent(img, latent_factor, latent_channels));
            feats.push_back(encode_identity(img, *enc.clip, *enc.face, enc.align_size));
        }
        out.latents.push_back(std::move(lat));
        out.features.push_back(std::move(feats));
        out.captions.push_back(enc.text.encode(id.caption));
    }
    return out;
}

std::vector<TrainSample> sample_batch(const PreparedData& data, TrainMode mode, std::size_t batch_size,
                                      const NoiseSchedule& sched, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, data.pairs.size() - 1);
    std::uniform_int_distribution<int> step(1, sched.steps);
    std::vector<TrainSample> batch;
    batch.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const TrainingPair& p = data.pairs[pick(rng)];
        TrainSample s;
        s.z0 = data.latents[p.identity][p.target_variant];
        s.features = data.features[p.identity][p.id_variant];
        if (mode == TrainMode::entangled) s.caption = data.captions[p.identity];
        s.t = step(rng);
        s.eps = gaussian_latent(s.z0.height, s.z0.width, s.z0.channels(), rng);
        batch.push_back(std::move(s));
    }
    return batch;
}

namespace {

Graph<float>::Id mapped(Graph<float>& g, const ParamStore& params, GradStore* grads, const Matrix<float>& x,
                        const std::string& prefix) {
    auto bind = [&](const std::string& name) {
        return g.parameter(params.value(name), grads ? grads->find(name) : nullptr);
    };
    return g.add_row(g.matmul(g.constant(x), bind(prefix + ".weight")), bind(prefix + ".bias"));
}

}  // namespace

double training_loss(const std::vector<TrainSample>& batch, const UNet& unet, TrainMode mode, GradStore* grads) {
    if (batch.empty()) throw InputError("empty batch");
    // The mappers live in the same store the U-Net reads from.
    const ParamStore& params = unet.params();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0;
    for (const auto& s : batch) {
        if (mode == TrainMode::identity_enhanced && s.caption)
            throw InputError("identity-enhanced training takes no caption");
        if (mode == TrainMode::entangled && !s.caption) throw InputError("entangled training needs a caption");

        const Latent z_t = q_sample(s.z0, s.t, s.eps, unet.schedule());
        Graph<float> g(grads != nullptr);
        const auto c_id = g.concat_rows(mapped(g, params, grads, s.features.clip_tokens, "mapper.clip"),
                                        mapped(g, params, grads, s.features.face_tokens, "mapper.face"));
        const auto c_t = s.caption ? g.constant(*s.caption) : Graph<float>::none;
        const auto body = unet.build(g, z_t, s.t, c_id, c_t, mode == TrainMode::entangled, {}, grads);
        const Latent eps_hat = unet.epsilon(z_t, g.value(body), s.t);

        const std::size_t n = eps_hat.data.size();
        double se = 0;
        Matrix<float> seed(eps_hat.data.rows(), eps_hat.data.cols());
        const double scale = 2.0 * inv_b / static_cast<double>(n) * unet.body_gain(s.t);
        for (std::size_t i = 0; i < n; ++i) {
            const double r = static_cast<double>(eps_hat.data.data()[i]) - s.eps.data.data()[i];
            se += r * r;
            seed.data()[i] = static_cast<float>(scale * r);
        }
        total += se / static_cast<double>(n) * inv_b;
        if (grads) g.backward(body, seed);
    }
    return total;
}

void adamw_step(ParamStore& params, const GradStore& grads, OptimizerState& st, const TrainConfig& cfg) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (const auto& [name, grad] : grads.all()) {
        Parameter& p = params.at(name);
        if (!p.trainable) continue;
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m = Matrix<float>(grad.rows(), grad.cols());
        if (v.empty()) v = Matrix<float>(grad.rows(), grad.cols());
        float* w = p.value.data();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const double gi = grad.data()[i];
            const double mi = cfg.beta1 * m.data()[i] + (1 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v.data()[i] + (1 - cfg.beta2) * gi * gi;
            m.data()[i] = static_cast<float>(mi);
            v.data()[i] = static_cast<float>(vi);
            const double upd = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon) + cfg.weight_decay * w[i];
            w[i] = static_cast<float>(w[i] - cfg.learning_rate * upd);
        }
    }
}

namespace {

bool all_finite(const Matrix<float>& m) {
    for (float v : m.flat())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

TrainResult train(const PreparedData& data, ParamStore& params, const UNet& unet, const TrainConfig& cfg,
                  const ProgressFn& progress, OptimizerState initial) {
    validate(cfg);
    if (&unet.params() != &params) throw StateError("U-Net is bound to a different parameter store");
    const std::string frozen = params.frozen_digest();
    std::mt19937_64 rng(cfg.seed);
    GradStore grads(params, false);
    TrainResult res;
    res.optimizer = std::move(initial);
    res.losses.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const long at = static_cast<long>(step);
        const auto batch = sample_batch(data, cfg.mode, cfg.batch_size, unet.schedule(), rng);
        grads.zero();
        const double loss = training_loss(batch, unet, cfg.mode, &grads);
        if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step), at, "loss");
        for (const auto& [name, g] : grads.all())
            if (!all_finite(g))
                throw NumericError("non-finite gradient for " + name + " at step " + std::to_string(step), at,
                                   params.at(name).group);
        adamw_step(params, grads, res.optimizer, cfg);
        for (const auto& [name, g] : grads.all())
            if (!all_finite(params.value(name)))
                throw NumericError("non-finite value in " + name + " at step " + std::to_string(step), at,
                                   params.at(name).group);
        res.losses.push_back(loss);
        if (progress) progress(step, loss);
    }
    if (params.frozen_digest() != frozen) throw StateError("frozen parameters changed during training");
    return res;
}

SmoothedLoss smoothed_loss(const std::vector<double>& losses) {
    if (losses.empty()) throw InputError("empty loss trace");
    const std::size_t w = std::max<std::size_t>(1, losses.size() / 10);
    double a = 0, b = 0;
    for (std::size_t i = 0; i < w; ++i) {
        a += losses[i];
        b += losses[losses.size() - w + i];
    }
    a /= static_cast<double>(w);
    b /= static_cast<double>(w);
    return {a, b, b / a};
}

std::string loss_csv(const std::vector<double>& losses) {
    std::ostringstream os;
    os << "step,loss\n" << std::setprecision(9);
    for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
    return os.str();
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    write_file_atomic(path, loss_csv(losses));
}

}  // namespace idfuse
